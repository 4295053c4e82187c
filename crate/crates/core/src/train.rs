//! One optimisation step over a batch of encoded patches.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Precision;
use crate::error::{Error, Result};
use crate::groundtruth::{encode_patch, GeometryConfig, GroundTruthMap};
use crate::net::{ForwardVars, Model};
use crate::sampling::{
    detection_loss, full_loss_var, mine_and_select, squared_error_map, LossWeights, MiningConfig,
    MiningStats, SampleMask,
};
use crate::scalar::Scalar;
use crate::synth::{assemble_batch, PatchConfig, PatchSample, SceneAnnotation};
use crate::tensor::{sgd_step, Tape, Tensor};

/// Everything a training run needs besides the model and the scenes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSettings {
    pub geometry: GeometryConfig,
    pub patches: PatchConfig,
    pub weights: LossWeights,
    pub mining: MiningConfig,
    pub optim: OptimConfig,
}

/// Encodes sampled patches into training pairs.
pub fn encode_batch<T: Scalar>(
    samples: &[PatchSample],
    geo: &GeometryConfig,
) -> Result<Vec<(Tensor<T>, GroundTruthMap)>> {
    samples
        .iter()
        .map(|s| Ok((s.patch.cast(), encode_patch(&s.objects, geo)?)))
        .collect()
}

/// Runs `optim.iterations` steps starting from `start`; `on_step` sees every
/// step's statistics and the updated model. One seeded stream drives patch
/// sampling and negative mining.
pub fn fit<T: Scalar, F>(
    model: &mut Model<T>,
    scenes: &[SceneAnnotation],
    settings: &TrainSettings,
    seed: u64,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepStats, &Model<T>) -> Result<()>,
{
    settings.optim.validate()?;
    settings.mining.validate()?;
    settings.geometry.validate()?;
    if settings.geometry.n_landmarks != model.config().n_landmarks {
        return Err(Error::Config(
            "geometry.n_landmarks must equal model.n_landmarks".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for iter in 0..settings.optim.iterations {
        let samples = assemble_batch(
            scenes,
            settings.optim.batch_size,
            &settings.geometry,
            &settings.patches,
            &mut rng,
        )?;
        let batch = encode_batch::<T>(&samples, &settings.geometry)?;
        let stats = train_step(
            model,
            &batch,
            &settings.weights,
            &settings.mining,
            &settings.optim,
            iter,
            &mut rng,
        )?;
        on_step(&stats, model)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Divide the learning rate by 10 every this many iterations; `None` keeps it constant.
    pub lr_step: Option<usize>,
    /// Scalar type used for training; checkpoints are always stored as f64.
    pub precision: Precision,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 10,
            iterations: 2000,
            lr_step: None,
            precision: Precision::F64,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, iter: usize) -> f64 {
        match self.lr_step {
            Some(step) if step > 0 => self.lr * 0.1f64.powi((iter / step) as i32),
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("optim: batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "optim: lr, momentum and weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One training-log record. Losses are batch means; counts are batch sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: usize,
    pub det_loss: f64,
    pub lm_loss: f64,
    pub rf_loss: f64,
    pub full_loss: f64,
    pub n_pos: usize,
    pub n_hard: usize,
    pub n_rand: usize,
}

impl fmt::Display for StepStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} det_loss={:.6} lm_loss={:.6} rf_loss={:.6} full_loss={:.6} n_pos={} n_hard={} n_rand={}",
            self.iter,
            self.det_loss,
            self.lm_loss,
            self.rf_loss,
            self.full_loss,
            self.n_pos,
            self.n_hard,
            self.n_rand
        )
    }
}

/// Masks used for one patch's losses.
#[derive(Debug, Clone)]
pub struct PatchMasks {
    pub det: SampleMask,
    pub landmarks: Option<SampleMask>,
    pub refine: Option<SampleMask>,
    pub stats: MiningStats,
}

fn values<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Mines the masks for one forward pass against its ground truth.
pub fn mine_patch<T: Scalar, R: Rng + ?Sized>(
    tape: &Tape<T>,
    out: &ForwardVars,
    gt: &GroundTruthMap,
    mining: &MiningConfig,
    rng: &mut R,
) -> Result<PatchMasks> {
    let score = values(tape.value(out.score));
    let labels = gt.score.data();
    let loss = squared_error_map(&score, labels);
    let (det, stats) = mine_and_select(&loss, labels, gt.ignore.data(), mining, rng)?;

    let landmarks = match out.landmarks {
        Some(lm) => {
            let pred = values(tape.value(lm));
            let plane = gt.height() * gt.width();
            let n = gt.landmarks.shape()[0];
            if pred.len() != n * plane {
                return Err(Error::shape(format!(
                    "landmark output has {} values, ground truth {}",
                    pred.len(),
                    n * plane
                )));
            }
            let mut masks = Vec::with_capacity(n);
            for k in 0..n {
                let r = k * plane..(k + 1) * plane;
                let l = squared_error_map(&pred[r.clone()], &gt.landmarks.data()[r.clone()]);
                let (m, _) = mine_and_select(
                    &l,
                    &gt.landmarks.data()[r.clone()],
                    &gt.landmark_ignore.data()[r],
                    mining,
                    rng,
                )?;
                masks.push(m);
            }
            Some(SampleMask::stack(&masks))
        }
        None => None,
    };

    let refine = match out.refine {
        Some(_) if mining.refine_reuses_det_mask => Some(det.clone()),
        Some(rf) => {
            let l = squared_error_map(&values(tape.value(rf)), labels);
            Some(mine_and_select(&l, labels, gt.ignore.data(), mining, rng)?.0)
        }
        None => None,
    };

    Ok(PatchMasks {
        det,
        landmarks,
        refine,
        stats,
    })
}

/// Per-task loss nodes for one patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchLoss {
    pub det: crate::tensor::Var,
    pub lm: Option<crate::tensor::Var>,
    pub rf: Option<crate::tensor::Var>,
    pub full: crate::tensor::Var,
}

pub fn patch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardVars,
    gt: &GroundTruthMap,
    masks: &PatchMasks,
    weights: &LossWeights,
) -> Result<PatchLoss> {
    let det = detection_loss(tape, out.score, out.reg, gt, &masks.det, weights)?;
    let lm = match (out.landmarks, &masks.landmarks) {
        (Some(lm), Some(m)) => {
            let mt = m.to_tensor(gt.landmarks.shape())?;
            Some(tape.masked_l2(lm, &gt.landmarks.cast(), &mt)?)
        }
        _ => None,
    };
    let rf = match (out.refine, &masks.refine) {
        (Some(rf), Some(m)) => {
            let mt = m.to_tensor(gt.score.shape())?;
            Some(tape.masked_l2(rf, &gt.score.cast(), &mt)?)
        }
        _ => None,
    };
    let full = full_loss_var(tape, det, lm, rf, weights)?;
    Ok(PatchLoss { det, lm, rf, full })
}

/// Forward, mine, backward for every patch, then one momentum-SGD update
/// with the batch-mean gradient.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    batch: &[(Tensor<T>, GroundTruthMap)],
    weights: &LossWeights,
    mining: &MiningConfig,
    optim: &OptimConfig,
    iter: usize,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::State("train_step needs a non-empty batch".into()));
    }
    let inv = T::one() / T::from_usize(batch.len()).expect("batch size fits");
    let mut stats = StepStats {
        iter,
        ..StepStats::default()
    };
    for p in model.params_mut() {
        p.value.clear_grad();
    }
    for (image, gt) in batch {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, image)?;
        let masks = mine_patch(&tape, &out, gt, mining, rng)?;
        let loss = patch_loss(&mut tape, &out, gt, &masks, weights)?;
        let scaled = tape.combine(&[(loss.full, inv)])?;
        let v = |x: Option<crate::tensor::Var>| {
            x.map_or(0.0, |x| tape.value(x).data()[0].to_f64_lossy())
        };
        let full = v(Some(loss.full));
        if !full.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter}"
            )));
        }
        let n = batch.len() as f64;
        stats.det_loss += v(Some(loss.det)) / n;
        stats.lm_loss += v(loss.lm) / n;
        stats.rf_loss += v(loss.rf) / n;
        stats.full_loss += full / n;
        stats.n_pos += masks.stats.n_pos;
        stats.n_hard += masks.stats.n_hard;
        stats.n_rand += masks.stats.n_rand;
        tape.backward(scaled)?;
        model.accumulate_grads(&tape)?;
    }
    model.ensure_grads();
    if model.params().iter().any(|p| {
        p.value
            .grad()
            .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
    }) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at iteration {iter}"
        )));
    }
    sgd_step(
        model.params_mut(),
        T::from_f64_lossy(optim.lr_at(iter)),
        T::from_f64_lossy(optim.momentum),
        T::from_f64_lossy(optim.weight_decay),
    )?;
    Ok(stats)
}
