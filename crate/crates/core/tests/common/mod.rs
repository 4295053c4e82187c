//! Finite-difference gradient oracle shared by the integration tests.

#![allow(dead_code, clippy::needless_range_loop)]

use densebox::geometry::BBox;
use densebox::groundtruth::{encode_patch, GeometryConfig, GroundTruthMap, ObjectAnnotation};
use densebox::net::{Model, ModelConfig};
use densebox::sampling::{LossWeights, MiningConfig};
use densebox::train::{mine_patch, patch_loss, PatchMasks};
use densebox::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect()
}

/// Builds an op from its inputs; the result is probed with fixed random
/// weights as `sum(r * out^2)`.
pub type OpBuilder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Maximum relative error between the tape's input gradients and central
/// differences of the probed op output.
pub fn check_op(inputs: &[Tensor<f64>], build: &OpBuilder<'_>, seed: u64) -> f64 {
    let probe = |tape: &mut Tape<f64>, vars: &[Var], r: &Tensor<f64>| -> Var {
        let out = build(tape, vars);
        let shape = tape.value(out).shape().to_vec();
        tape.weighted_sq_error(out, &Tensor::zeros(&shape), r, 1.0)
            .unwrap()
    };
    let eval = |inputs: &[Tensor<f64>],
                r: Option<&Tensor<f64>>|
     -> (Tape<f64>, Vec<Var>, Var, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let r = match r {
            Some(r) => r.clone(),
            None => {
                let mut scratch = Tape::new();
                let v: Vec<Var> = inputs.iter().map(|t| scratch.input(t.clone())).collect();
                let out = build(&mut scratch, &v);
                let shape = scratch.value(out).shape().to_vec();
                let mut g = rng(seed ^ 0xfeed);
                Tensor::from_fn(&shape, |_| g.gen_range(0.5..1.5))
            }
        };
        let l = probe(&mut tape, &vars, &r);
        (tape, vars, l, r)
    };
    let (mut tape, vars, loss, r) = eval(inputs, None);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for i in 0..inputs[k].len() {
            let f = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                let (t, _, l, _) = eval(&moved, Some(&r));
                t.value(l).data()[0]
            };
            let numeric = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i], numeric));
        }
    }
    worst
}

/// The tiny end-to-end configuration: 16x16 input, stages (2, 3, 4).
pub fn tiny_model_config(n_landmarks: usize) -> ModelConfig {
    ModelConfig {
        stage_channels: [2, 3, 4],
        head_hidden: 4,
        n_landmarks,
        refine_hidden: 2,
        input_channels: 3,
    }
}

pub fn tiny_geometry(n_landmarks: usize) -> GeometryConfig {
    GeometryConfig {
        patch_size: 16,
        target_height: 8.0,
        reg_norm: 2.0,
        n_landmarks,
        r_near: 1.0,
        ..GeometryConfig::default()
    }
}

/// A random tiny patch with one centred in-range object and its encoding.
pub fn tiny_patch(seed: u64, n_landmarks: usize) -> (Tensor<f64>, GroundTruthMap) {
    let mut g = rng(seed);
    let image = Tensor::from_fn(&[3, 16, 16], |_| g.gen_range(0.0..1.0));
    let h = g.gen_range(7.0..9.0);
    let (cx, cy) = (8.0 + g.gen_range(-1.0..1.0), 8.0 + g.gen_range(-1.0..1.0));
    let mut obj = ObjectAnnotation::new(BBox::from_center(cx, cy, 0.8 * h, h));
    obj.landmarks = (0..n_landmarks)
        .map(|_| Some([cx + g.gen_range(-2.0..2.0), cy + g.gen_range(-2.0..2.0)]))
        .collect();
    let gt = encode_patch(&[obj], &tiny_geometry(n_landmarks)).unwrap();
    (image, gt)
}

fn full_loss_value(
    model: &Model<f64>,
    image: &Tensor<f64>,
    gt: &GroundTruthMap,
    masks: &PatchMasks,
) -> (Tape<f64>, Var) {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, image).unwrap();
    let loss = patch_loss(&mut tape, &out, gt, masks, &LossWeights::default()).unwrap();
    (tape, loss.full)
}

/// Maximum relative error of every parameter gradient of the full loss,
/// with mining masks frozen at the unperturbed forward pass.
pub fn check_model(seed: u64, n_landmarks: usize) -> f64 {
    let mut model = Model::<f64>::new(tiny_model_config(n_landmarks), seed).unwrap();
    // Small random biases keep ReLUs off their kinks.
    let mut g = rng(seed ^ 0xb1a5);
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = g.gen_range(-0.1..0.1);
            }
        }
    }
    let (image, gt) = tiny_patch(seed, n_landmarks);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &image).unwrap();
    let masks = mine_patch(&tape, &out, &gt, &MiningConfig::default(), &mut rng(seed)).unwrap();
    let (mut tape, loss) = full_loss_value(&model, &image, &gt, &masks);
    tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.value.len()])
        .collect();
    for (slot, grad) in tape.param_grads() {
        analytic[slot].copy_from_slice(grad);
    }
    let mut worst = 0.0f64;
    for k in 0..model.params().len() {
        for i in 0..model.params()[k].value.len() {
            let mut f = |delta: f64| {
                let old = model.params()[k].value.data()[i];
                model.params_mut()[k].value.data_mut()[i] = old + delta;
                let (t, l) = full_loss_value(&model, &image, &gt, &masks);
                model.params_mut()[k].value.data_mut()[i] = old;
                t.value(l).data()[0]
            };
            let numeric = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[k][i], numeric));
        }
    }
    worst
}

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

fn tensor(g: &mut rand_chacha::ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), away_from_zero(g, n, gap)).unwrap()
}

/// Per-op worst relative errors over `SEEDS` random shapes.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut run =
        |name: &'static str, make: &dyn Fn(u64) -> (Vec<Tensor<f64>>, Box<OpBuilder<'static>>)| {
            let worst = (0..SEEDS)
                .map(|s| {
                    let (inputs, build) = make(s);
                    check_op(&inputs, &*build, s)
                })
                .fold(0.0, f64::max);
            out.push((name, worst));
        };
    run("conv2d 3x3", &|s| {
        let mut g = rng(s);
        let (ci, co, h, w) = (
            g.gen_range(1..4),
            g.gen_range(1..6),
            g.gen_range(1..7),
            g.gen_range(1..7),
        );
        let inputs = vec![
            tensor(&mut g, &[ci, h, w], 0.0),
            tensor(&mut g, &[co, ci, 3, 3], 0.0),
            tensor(&mut g, &[co], 0.0),
        ];
        (
            inputs,
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2], 1).unwrap()),
        )
    });
    run("conv2d 1x1", &|s| {
        let mut g = rng(s + 100);
        let (ci, co, h, w) = (
            g.gen_range(1..5),
            g.gen_range(1..6),
            g.gen_range(1..6),
            g.gen_range(1..20),
        );
        let inputs = vec![
            tensor(&mut g, &[ci, h, w], 0.0),
            tensor(&mut g, &[co, ci, 1, 1], 0.0),
            tensor(&mut g, &[co], 0.0),
        ];
        (
            inputs,
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2], 0).unwrap()),
        )
    });
    run("maxpool2", &|s| {
        let mut g = rng(s + 200);
        let (c, h, w) = (
            g.gen_range(1..4),
            2 * g.gen_range(1..4),
            2 * g.gen_range(1..4),
        );
        // Distinct values on a coarse lattice keep window maxima unambiguous.
        let n = c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, g.gen_range(0..=i));
        }
        let inputs = vec![Tensor::new(vec![c, h, w], vals).unwrap()];
        (
            inputs,
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.maxpool2(v[0]).unwrap()),
        )
    });
    run("relu", &|s| {
        let mut g = rng(s + 300);
        let n = g.gen_range(1..40);
        let inputs = vec![tensor(&mut g, &[n], 1e-3)];
        (
            inputs,
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.relu(v[0])),
        )
    });
    run("upsample2", &|s| {
        let mut g = rng(s + 400);
        let (c, h, w) = (g.gen_range(1..3), g.gen_range(1..5), g.gen_range(1..5));
        let inputs = vec![tensor(&mut g, &[c, h, w], 0.0)];
        (
            inputs,
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.upsample2(v[0]).unwrap()),
        )
    });
    run("concat_channels", &|s| {
        let mut g = rng(s + 500);
        let (ca, cb, h, w) = (
            g.gen_range(0..3),
            g.gen_range(1..3),
            g.gen_range(1..4),
            g.gen_range(1..4),
        );
        let inputs = vec![
            tensor(&mut g, &[ca, h, w], 0.0),
            tensor(&mut g, &[cb, h, w], 0.0),
        ];
        (
            inputs,
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat_channels(v[0], v[1]).unwrap()),
        )
    });
    run("masked_l2", &|s| {
        let mut g = rng(s + 600);
        let n = g.gen_range(1..30);
        let target = Tensor::from_fn(&[n], |_| g.gen_range(0.0..1.0));
        let mask = Tensor::from_fn(&[n], |_| if g.gen_bool(0.6) { 1.0 } else { 0.0 });
        let inputs = vec![tensor(&mut g, &[n], 0.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                t.masked_l2(v[0], &target, &mask).unwrap()
            }),
        )
    });
    run("combine", &|s| {
        let mut g = rng(s + 700);
        let (a, b) = (g.gen_range(-2.0..2.0), g.gen_range(-2.0..2.0));
        let inputs = vec![tensor(&mut g, &[3], 0.0), tensor(&mut g, &[2], 0.0)];
        (
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let ones3 = Tensor::full(&[3], 1.0);
                let ones2 = Tensor::full(&[2], 1.0);
                let la = t.masked_l2(v[0], &Tensor::zeros(&[3]), &ones3).unwrap();
                let lb = t.masked_l2(v[1], &Tensor::zeros(&[2]), &ones2).unwrap();
                t.combine(&[(la, a), (lb, b)]).unwrap()
            }),
        )
    });
    out
}
