//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails at the end if any criterion failed.
//!
//! Everything runs inside a single test so the timed training run does not
//! share the CPU with other tests of this binary.

mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use densebox::config::RunConfig;
use densebox::geometry::{iou, nms_indices, BBox, Detection};
use densebox::groundtruth::{
    decode_offsets, encode_patch, GeometryConfig, GroundTruthMap, ObjectAnnotation,
};
use densebox::inference::{decode_map, detect, pyramid_scales, resize, PyramidConfig};
use densebox::net::{Model, ModelConfig, OutputMaps};
use densebox::runner::{
    cmd_detect, cmd_eval, cmd_synth, cmd_train, resolve_inputs, Split, CHECKPOINT, TRAIN_LOG,
};
use densebox::sampling::{
    detection_loss, mine_and_select, squared_error_map, LossWeights, MiningConfig,
};
use densebox::synth::{generate_scene, SceneConfig};
use densebox::train::{fit, TrainSettings};
use densebox::{Tape, Tensor};
use rand::Rng;

/// Criterion 1: finite-difference wall-clock budget.
const GRADIENT_BUDGET_SECS: f64 = 120.0;
/// Criterion 2: decoded boxes must match the source within this many output units.
const ROUNDTRIP_TOL: f64 = 1e-9;
const RANDOM_CASES: u64 = 1000;
/// Criterion 5: pinned after calibration of the desk configuration.
const AP50_MIN: f64 = 0.90;
const AP70_MIN: f64 = 0.70;
const END_TO_END_BUDGET_SECS: f64 = 30.0 * 60.0;
const MAX_ITERATIONS: usize = 20_000;
/// Criterion 6: allowed refine-channel shortfall against the plain score.
const REFINE_SLACK: f64 = 0.05;
/// Trained-model checks: blank-scene false positives and two-scale recall.
const BLANK_FP_MAX: f64 = 1.0;
const TWO_SCALE_RECALL_MIN: f64 = 0.9;
/// Criterion 7: share of objects with unannotated landmarks.
const NULL_LANDMARK_FRACTION: f64 = 0.73;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    RunConfig::load(&path).expect("configs/desk.json loads")
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let ops = op_errors();
    let (worst_op, worst_op_err) =
        ops.iter()
            .copied()
            .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let worst_model = (0..SEEDS)
        .map(|seed| check_model(seed, if seed % 2 == 0 { 2 } else { 0 }))
        .fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_op_err < OP_TOL && worst_model < MODEL_TOL && secs < GRADIENT_BUDGET_SECS,
        format!(
            "{} ops x {SEEDS} seeds, worst op {worst_op} {worst_op_err:.1e} (< {OP_TOL:.0e}); \
             tiny model worst {worst_model:.1e} (< {MODEL_TOL:.0e}); {secs:.1}s",
            ops.len()
        ),
    )
}

/// Random objects inside a 240 px patch, pairwise disjoint, some out of the
/// labelled scale range.
fn random_layout(g: &mut rand_chacha::ChaCha8Rng, geo: &GeometryConfig) -> Vec<BBox> {
    let p = geo.patch_size as f64;
    let n = g.gen_range(1..=4);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < n && attempts < 200 {
        attempts += 1;
        let h = if g.gen_bool(0.75) {
            geo.target_height * g.gen_range(geo.scale_range.0..geo.scale_range.1)
        } else {
            geo.target_height * g.gen_range(1.4..2.5)
        };
        let w = h * g.gen_range(0.6..1.0);
        let (x, y) = (g.gen_range(0.0..p - w), g.gen_range(0.0..p - h));
        let b = BBox::new(x, y, x + w, y + h);
        if boxes.iter().all(|o| o.intersection(&b) == 0.0) {
            boxes.push(b);
        }
    }
    boxes
}

fn criterion_2() -> Outcome {
    let geo = GeometryConfig {
        n_landmarks: 0,
        ..GeometryConfig::default()
    };
    let pyr = PyramidConfig::default();
    let down = geo.down_factor as f64;
    let (mut worst, mut pixels, mut objects) = (0.0f64, 0usize, 0usize);
    let mut failures = Vec::new();
    for case in 0..RANDOM_CASES {
        let mut g = rng(10_000 + case);
        let boxes = random_layout(&mut g, &geo);
        let objs: Vec<ObjectAnnotation> =
            boxes.iter().copied().map(ObjectAnnotation::new).collect();
        let gt = encode_patch(&objs, &geo).unwrap();
        let in_range: Vec<BBox> = boxes
            .iter()
            .filter(|b| geo.in_scale_range(b.height() / down))
            .copied()
            .collect();
        let (h, w) = (gt.height(), gt.width());
        for y in 0..h {
            for x in 0..w {
                if gt.score.at3(0, y, x) == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                let source = in_range
                    .iter()
                    .map(|b| b.scaled(1.0 / down))
                    .min_by(|a, b| {
                        let d =
                            |o: &BBox| (o.center().0 - px).powi(2) + (o.center().1 - py).powi(2);
                        d(a).total_cmp(&d(b))
                    })
                    .expect("positive pixel implies an in-range object");
                let d = [0, 1, 2, 3].map(|c| gt.reg.at3(c, y, x));
                let dec = decode_offsets((px, py), d, geo.reg_norm);
                let err = dec
                    .to_array()
                    .iter()
                    .zip(source.to_array())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst = worst.max(err);
                pixels += 1;
            }
        }
        let maps = OutputMaps {
            score: gt.score.clone(),
            reg: gt.reg.clone(),
            landmarks: Tensor::zeros(&[0, h, w]),
            refine_score: None,
        };
        let dets = decode_map(&maps, 1.0, &pyr, false).detections;
        let kept: Vec<Detection> = nms_indices(&dets, pyr.nms_iou)
            .into_iter()
            .map(|i| dets[i])
            .collect();
        objects += in_range.len();
        let one_each = kept.len() == in_range.len()
            && in_range.iter().all(|b| {
                kept.iter()
                    .filter(|d| iou(&d.bbox, b) >= 1.0 - 1e-12)
                    .count()
                    == 1
            });
        if !one_each && failures.len() < 3 {
            failures.push(format!(
                "case {case}: {} kept for {} objects",
                kept.len(),
                in_range.len()
            ));
        }
    }
    outcome(
        worst <= ROUNDTRIP_TOL && failures.is_empty(),
        format!(
            "{RANDOM_CASES} patches, {pixels} positive pixels, worst decode error {worst:.1e} output units; \
             {objects} in-range objects{}",
            if failures.is_empty() {
                ", one IoU-1 detection each after NMS".to_string()
            } else {
                format!("; {}", failures.join("; "))
            }
        ),
    )
}

/// Reference NMS: repeatedly take the best remaining detection and discard
/// everything overlapping it.
fn nms_reference(dets: &[Detection], t: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou(&dets[i].bbox, &dets[best].bbox) <= t);
    }
    keep
}

fn criterion_3() -> Outcome {
    let mut mismatch = 0;
    let mut not_idempotent = 0;
    for case in 0..RANDOM_CASES {
        let mut g = rng(20_000 + case);
        let n = g.gen_range(0..=20);
        let t = [0.3, 0.5, 0.75][g.gen_range(0..3)];
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (g.gen_range(0.0..60.0), g.gen_range(0.0..60.0));
                let (w, h) = (g.gen_range(5.0..30.0), g.gen_range(5.0..30.0));
                // Coarse scores produce ties.
                let score = (g.gen_range(0..10) as f64) / 10.0;
                Detection {
                    bbox: BBox::new(x, y, x + w, y + h),
                    score,
                    scale: 1.0,
                }
            })
            .collect();
        let keep = nms_indices(&dets, t);
        if keep != nms_reference(&dets, t) {
            mismatch += 1;
        }
        let kept: Vec<Detection> = keep.iter().map(|&i| dets[i]).collect();
        let again: Vec<usize> = nms_indices(&kept, t);
        if again != (0..kept.len()).collect::<Vec<_>>() {
            not_idempotent += 1;
        }
    }
    outcome(
        mismatch == 0 && not_idempotent == 0,
        format!("{RANDOM_CASES} sets: {mismatch} differ from brute force, {not_idempotent} not idempotent"),
    )
}

fn random_gt(g: &mut rand_chacha::ChaCha8Rng) -> GroundTruthMap {
    let (h, w) = (g.gen_range(4..40), g.gen_range(4..40));
    let pos_rate = [0.0, 0.02, 0.1, 0.4][g.gen_range(0..4)];
    let score = Tensor::from_fn(&[1, h, w], |_| if g.gen_bool(pos_rate) { 1.0 } else { 0.0 });
    let ignore = Tensor::from_fn(&[1, h, w], |i| {
        if score.data()[i] == 0.0 && g.gen_bool(0.15) {
            1.0
        } else {
            0.0
        }
    });
    GroundTruthMap {
        reg: Tensor::from_fn(&[4, h, w], |_| g.gen_range(-2.0..2.0)),
        landmarks: Tensor::zeros(&[0, h, w]),
        landmark_ignore: Tensor::zeros(&[0, h, w]),
        score,
        ignore,
        skipped: 0,
    }
}

fn criterion_4() -> Outcome {
    let cfg = MiningConfig::default();
    let (mut ratio_bad, mut pool_bad, mut ignored_bad, mut grad_bad) = (0, 0, 0, 0);
    let mut feasible = 0;
    for case in 0..RANDOM_CASES {
        let mut g = rng(30_000 + case);
        let gt = random_gt(&mut g);
        let n = gt.height() * gt.width();
        let pred = Tensor::from_fn(&[1, gt.height(), gt.width()], |_| g.gen_range(-0.5..1.5));
        let labels = gt.score.data();
        let ign = gt.ignore.data();
        let loss = squared_error_map(pred.data(), labels);
        let (mask, st) = mine_and_select(&loss, labels, ign, &cfg, &mut g).unwrap();

        let eligible = (0..n)
            .filter(|&i| labels[i] == 0.0 && ign[i] == 0.0)
            .count();
        let n_neg = (0..n).filter(|&i| mask.m[i] && labels[i] == 0.0).count();
        if st.n_pos > 0 && st.n_pos <= eligible {
            feasible += 1;
            if n_neg != st.n_pos {
                ratio_bad += 1;
            }
        }
        if st.hard_pool != (0.01 * eligible as f64).ceil() as usize {
            pool_bad += 1;
        }
        if (0..n).any(|i| ign[i] > 0.0 && (mask.m[i] || mask.f_sel[i])) {
            ignored_bad += 1;
        }

        let mut tape = Tape::<f64>::new();
        let s = tape.input(pred.clone());
        let r = tape.input(Tensor::from_fn(&[4, gt.height(), gt.width()], |_| {
            g.gen_range(-2.0..2.0)
        }));
        let l = detection_loss(&mut tape, s, r, &gt, &mask, &LossWeights::default()).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(r).expect("reg gradient");
        let leaks = (0..4).any(|c| (0..n).any(|i| labels[i] == 0.0 && grad[c * n + i] != 0.0));
        if leaks {
            grad_bad += 1;
        }
    }
    outcome(
        ratio_bad + pool_bad + ignored_bad + grad_bad == 0,
        format!(
            "{RANDOM_CASES} maps ({feasible} with a feasible 1:1 quota): ratio violations {ratio_bad}, \
             hard-pool size violations {pool_bad}, ignored pixels selected {ignored_bad}, \
             nonzero reg gradient at background {grad_bad}"
        ),
    )
}

/// One synth -> train -> detect -> eval pass in `dir`.
struct RunResult {
    ap50: f64,
    ap70: f64,
    ap50_refine: f64,
    secs: f64,
    checkpoint: Vec<u8>,
    full_losses: Vec<f64>,
}

fn end_to_end(cfg: &RunConfig, dir: &Path) -> RunResult {
    let data = dir.join("data");
    let run = dir.join("run");
    let t0 = Instant::now();
    cmd_synth(cfg, &data).unwrap();
    let train = cmd_train(cfg, &data, &run).unwrap();
    let ckpt = run.join(CHECKPOINT);
    let inputs = resolve_inputs(std::slice::from_ref(&data), Split::Test).unwrap();
    let dets = dir.join("dets.json");
    cmd_detect(cfg, &ckpt, &inputs, &dets, None).unwrap();
    let r50 = cmd_eval(
        &dets,
        &data,
        Split::Test,
        0.5,
        &dir.join("eval50.json"),
        None,
    )
    .unwrap();
    let r70 = cmd_eval(
        &dets,
        &data,
        Split::Test,
        0.7,
        &dir.join("eval70.json"),
        None,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    assert_eq!(train.steps, cfg.optim.iterations);

    let mut refine_cfg = cfg.clone();
    refine_cfg.inference.use_refine = true;
    let refine_dets = dir.join("dets_refine.json");
    cmd_detect(&refine_cfg, &ckpt, &inputs, &refine_dets, None).unwrap();
    let rr = cmd_eval(
        &refine_dets,
        &data,
        Split::Test,
        0.5,
        &dir.join("eval_refine.json"),
        None,
    )
    .unwrap();

    let log = fs::read_to_string(run.join(TRAIN_LOG)).unwrap();
    let full_losses = log
        .lines()
        .filter_map(|l| {
            l.split_whitespace()
                .find_map(|f| f.strip_prefix("full_loss="))
        })
        .map(|v| v.parse::<f64>().unwrap())
        .collect();
    RunResult {
        ap50: r50.ap,
        ap70: r70.ap,
        ap50_refine: rr.ap,
        secs,
        checkpoint: fs::read(&ckpt).unwrap(),
        full_losses,
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn criterion_5(cfg: &RunConfig, r: &RunResult) -> Outcome {
    let (_, _, n_test) = cfg.dataset.split_counts();
    let shape_ok = cfg.dataset.count == 500
        && n_test == 50
        && cfg.model.n_landmarks == 4
        && cfg.geometry.patch_size == 240
        && cfg.optim.batch_size == 10
        && cfg.optim.iterations <= MAX_ITERATIONS;
    outcome(
        shape_ok && r.ap50 >= AP50_MIN && r.ap70 >= AP70_MIN && r.secs <= END_TO_END_BUDGET_SECS,
        format!(
            "{} scenes, {n_test} held out, {} iterations: AP@0.5 {:.4} (>= {AP50_MIN}), \
             AP@0.7 {:.4} (>= {AP70_MIN}), {:.0}s (<= {END_TO_END_BUDGET_SECS:.0}s)",
            cfg.dataset.count, cfg.optim.iterations, r.ap50, r.ap70, r.secs
        ),
    )
}

fn criterion_6(r: &RunResult) -> Outcome {
    let n = r.full_losses.len();
    let decile = (n / 10).max(1);
    let first = median(&r.full_losses[..decile]);
    let last = median(&r.full_losses[n - decile..]);
    outcome(
        last < first && r.ap50_refine >= r.ap50 - REFINE_SLACK,
        format!(
            "full_loss median first decile {first:.4} -> last decile {last:.4}; \
             refine AP@0.5 {:.4} vs score AP@0.5 {:.4} (slack {REFINE_SLACK})",
            r.ap50_refine, r.ap50
        ),
    )
}

fn criterion_7() -> Outcome {
    let scales = pyramid_scales(&PyramidConfig::default());
    let expected: Vec<f64> = (0..15).map(|k| 2f64.powf(-3.0 + 0.3 * k as f64)).collect();
    let schedule_ok = scales.len() == 15
        && scales
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() < 1e-12 * b);

    let mut scenes: Vec<_> = (0..100)
        .map(|i| generate_scene(500 + i, &SceneConfig::default()).unwrap())
        .collect();
    // Spread the nulls evenly so the share is exact rather than sampled.
    let step = |k: usize| (k as f64 * NULL_LANDMARK_FRACTION).floor();
    for (k, o) in scenes
        .iter_mut()
        .flat_map(|s| s.objects.iter_mut())
        .enumerate()
    {
        if step(k + 1) > step(k) {
            o.landmarks.iter_mut().for_each(|l| *l = None);
        }
    }
    let objects: Vec<_> = scenes.iter().flat_map(|s| &s.objects).collect();
    let null = objects
        .iter()
        .filter(|o| o.landmarks.iter().all(Option::is_none))
        .count();
    let share = null as f64 / objects.len() as f64;
    let mut settings = TrainSettings::default();
    settings.optim.iterations = 4;
    settings.optim.batch_size = 4;
    let mcfg = ModelConfig {
        stage_channels: [2, 2, 2],
        head_hidden: 2,
        refine_hidden: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(mcfg, 3).unwrap();
    let mut finite = true;
    let trained = fit(&mut model, &scenes, &settings, 5, |s, _| {
        finite &= s.full_loss.is_finite() && s.lm_loss.is_finite();
        Ok(())
    });
    outcome(
        schedule_ok && trained.is_ok() && finite && (share - NULL_LANDMARK_FRACTION).abs() < 0.01,
        format!(
            "{} pyramid scales 2^-3..2^1.2; {} of {} objects ({:.0}%) without landmarks trained {}",
            scales.len(),
            null,
            objects.len(),
            100.0 * share,
            match &trained {
                Ok(()) if finite => "without error".to_string(),
                Ok(()) => "with non-finite losses".to_string(),
                Err(e) => format!("with error: {e}"),
            }
        ),
    )
}

/// Object-free scenes (clutter and decoys only) should yield almost no
/// detections, and objects should be found both as rendered and after the
/// whole scene is upsampled 2x.
fn trained_model_checks(cfg: &RunConfig, ckpt: &Path) -> Vec<(&'static str, Outcome)> {
    let model = Model::<f64>::load(ckpt, &cfg.model).unwrap().cast::<f32>();
    let blank_cfg = SceneConfig {
        min_objects: 0,
        max_objects: 0,
        ..cfg.scene.clone()
    };
    let n_blank = 20;
    let fp: usize = (0..n_blank)
        .map(|i| {
            let s = generate_scene(700_000 + i, &blank_cfg).unwrap();
            detect(&s.image, &model, &cfg.pyramid, false).unwrap().len()
        })
        .sum();
    let mean_fp = fp as f64 / n_blank as f64;

    let scenes: Vec<_> = (0..10)
        .map(|i| generate_scene(800_000 + i, &cfg.scene).unwrap())
        .collect();
    let recall = |factor: usize| {
        let (mut hit, mut total) = (0, 0);
        for s in &scenes {
            let (_, h, w) = s.image.chw().unwrap();
            let image = resize(&s.image, h * factor, w * factor).unwrap();
            let dets = detect(&image, &model, &cfg.pyramid, false).unwrap();
            for o in &s.objects {
                let b = o.bbox.scaled(factor as f64);
                total += 1;
                hit += usize::from(dets.iter().any(|d| iou(&d.bbox, &b) >= 0.5));
            }
        }
        hit as f64 / total as f64
    };
    let (r1, r2) = (recall(1), recall(2));

    let again_a = detect(&scenes[0].image, &model, &cfg.pyramid, false).unwrap();
    let again_b = detect(&scenes[0].image, &model, &cfg.pyramid, false).unwrap();
    vec![
        (
            "blank-scene false positives",
            outcome(
                mean_fp < BLANK_FP_MAX,
                format!("{fp} detections on {n_blank} object-free scenes, mean {mean_fp:.2} (< {BLANK_FP_MAX})"),
            ),
        ),
        (
            "two-scale recall",
            outcome(
                r1 >= TWO_SCALE_RECALL_MIN && r2 >= TWO_SCALE_RECALL_MIN,
                format!("recall at IoU 0.5: {r1:.3} as rendered, {r2:.3} upsampled 2x (>= {TWO_SCALE_RECALL_MIN})"),
            ),
        ),
        (
            "repeatable detection",
            outcome(again_a == again_b, format!("{} detections, identical on repeat", again_a.len())),
        ),
    ]
}

fn criterion_8(a: &RunResult, b: &RunResult) -> Outcome {
    let same_ckpt = a.checkpoint == b.checkpoint;
    let same_ap = a.ap50.to_bits() == b.ap50.to_bits()
        && a.ap70.to_bits() == b.ap70.to_bits()
        && a.ap50_refine.to_bits() == b.ap50_refine.to_bits();
    outcome(
        same_ckpt && same_ap,
        format!(
            "checkpoints {} ({} bytes); AP@0.5 {} vs {}, AP@0.7 {} vs {}",
            if same_ckpt {
                "byte-identical"
            } else {
                "differ"
            },
            a.checkpoint.len(),
            a.ap50,
            b.ap50,
            a.ap70,
            b.ap70
        ),
    )
}

/// Writes to the process stdout directly so the lines survive the test
/// harness's output capture.
fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn report(label: &str, name: &str, o: &Outcome) -> bool {
    emit(format!(
        "{} {label} ({name}): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    ));
    o.pass
}

fn scratch(name: &str) -> PathBuf {
    let dir =
        std::env::temp_dir().join(format!("densebox-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn acceptance() {
    let mut all = true;
    all &= report("criterion 1", "gradient suite", &criterion_1());
    all &= report("criterion 2", "encode/decode roundtrip", &criterion_2());
    all &= report("criterion 3", "NMS oracle", &criterion_3());
    all &= report("criterion 4", "mining invariants", &criterion_4());

    let cfg = desk_config();
    cfg.validate().unwrap();
    let dir_a = scratch("a");
    let first = end_to_end(&cfg, &dir_a);
    all &= report(
        "criterion 5",
        "end-to-end synthetic run",
        &criterion_5(&cfg, &first),
    );
    all &= report(
        "criterion 6",
        "multi-task non-degradation",
        &criterion_6(&first),
    );
    all &= report(
        "criterion 7",
        "pyramid schedule and partial landmarks",
        &criterion_7(),
    );
    for (name, o) in trained_model_checks(&cfg, &dir_a.join("run").join(CHECKPOINT)) {
        all &= report("check", name, &o);
    }
    let dir_b = scratch("b");
    let second = end_to_end(&cfg, &dir_b);
    all &= report("criterion 8", "determinism", &criterion_8(&first, &second));
    let _ = fs::remove_dir_all(&dir_a);
    let _ = fs::remove_dir_all(&dir_b);
    assert!(
        all,
        "at least one acceptance criterion failed; see the FAIL lines above"
    );
}
