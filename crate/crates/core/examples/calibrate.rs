//! Short training run on synthetic scenes followed by pyramid evaluation.
//! Usage: calibrate <iters> <lr> <c1,c2,c3> <head_hidden> <batch> <landmarks> [f32|f64] [full]

use std::time::Instant;

use densebox::eval::evaluate;
use densebox::inference::{detect, PyramidConfig};
use densebox::net::{Model, ModelConfig};
use densebox::synth::{generate_scene, SceneConfig};
use densebox::train::{fit, TrainSettings};
use densebox::Scalar;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let f32_train = a.get(7).is_some_and(|v| v == "f32");
    if f32_train {
        run::<f32>(&a);
    } else {
        run::<f64>(&a);
    }
}

fn run<T: Scalar>(a: &[String]) {
    let iters: usize = a[1].parse().unwrap();
    let lr: f64 = a[2].parse().unwrap();
    let ch: Vec<usize> = a[3].split(',').map(|v| v.parse().unwrap()).collect();
    let hh: usize = a[4].parse().unwrap();
    let bs: usize = a[5].parse().unwrap();
    let nl: usize = a[6].parse().unwrap();
    let full = a.get(8).is_some_and(|v| v == "full");
    let scene = SceneConfig::default();
    let n_train = if full { 400 } else { 80 };
    let train: Vec<_> = (0..n_train)
        .map(|i| generate_scene(1000 + i, &scene).unwrap())
        .collect();
    let test: Vec<_> = (0..if full { 50 } else { 30 })
        .map(|i| generate_scene(90_000 + i, &scene).unwrap())
        .collect();
    let mcfg = ModelConfig {
        stage_channels: [ch[0], ch[1], ch[2]],
        head_hidden: hh,
        n_landmarks: nl,
        ..ModelConfig::default()
    };
    let mut settings = TrainSettings::default();
    settings.geometry.n_landmarks = nl;
    settings.optim.lr = lr;
    settings.optim.iterations = iters;
    settings.optim.batch_size = bs;
    let mut model = Model::<T>::new(mcfg, 7).unwrap();
    let t0 = Instant::now();
    let mut acc = (0.0, 0.0, 0.0, 0);
    fit(&mut model, &train, &settings, 11, |s, _| {
        acc.0 += s.det_loss;
        acc.1 += s.lm_loss;
        acc.2 += s.rf_loss;
        acc.3 += 1;
        if (s.iter + 1) % 50 == 0 {
            let n = acc.3 as f64;
            println!(
                "iter {} det {:.4} lm {:.4} rf {:.4} pos {} t {:.0}s",
                s.iter + 1,
                acc.0 / n,
                acc.1 / n,
                acc.2 / n,
                s.n_pos,
                t0.elapsed().as_secs_f64()
            );
            acc = (0.0, 0.0, 0.0, 0);
        }
        Ok(())
    })
    .unwrap();
    let pyr = if full {
        PyramidConfig::default()
    } else {
        PyramidConfig {
            min_exp: -1.2,
            max_exp: 0.9,
            ..PyramidConfig::default()
        }
    };
    let t1 = Instant::now();
    let fast = model.cast::<f32>();
    for refine in [false, true] {
        if refine && nl == 0 {
            continue;
        }
        let per: Vec<_> = test
            .iter()
            .map(|s| {
                (
                    detect(&s.image, &fast, &pyr, refine).unwrap(),
                    s.objects.iter().map(|o| o.bbox).collect(),
                )
            })
            .collect();
        let r5 = evaluate(&per, 0.5).unwrap();
        let r7 = evaluate(&per, 0.7).unwrap();
        println!(
            "refine={refine} AP50 {:.3} AP70 {:.3} ndet {} ngt {} eval {:.0}s",
            r5.ap,
            r7.ap,
            r5.n_det,
            r5.n_gt,
            t1.elapsed().as_secs_f64()
        );
    }
}
