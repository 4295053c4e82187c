//! Balanced sampling (gray zone, online hard-negative mining) and the masked
//! multi-task losses built on the tape.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::GroundTruthMap;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_det: f64,
    pub lambda_lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_loc: 3.0,
            lambda_det: 1.0,
            lambda_lm: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Share of eligible negatives forming the hard pool.
    pub hard_fraction: f64,
    /// Share of the negative quota taken from the hard pool.
    pub hard_share: f64,
    pub neg_pos_ratio: f64,
    pub rng_seed: u64,
    /// Negatives selected from a patch without positives.
    pub zero_positive_negatives: usize,
    /// Refine loss reuses the detection mask when true, else mines its own.
    pub refine_reuses_det_mask: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            hard_fraction: 0.01,
            hard_share: 0.5,
            neg_pos_ratio: 1.0,
            rng_seed: 0x5eed,
            zero_positive_negatives: 16,
            refine_reuses_det_mask: true,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::Config(
                "mining: hard_fraction must be in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_share) {
            return Err(Error::Config("mining: hard_share must be in [0, 1]".into()));
        }
        if !(self.neg_pos_ratio >= 0.0) {
            return Err(Error::Config("mining: neg_pos_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel training flags. `m[i] = !f_ign[i] && f_sel[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMask {
    pub f_ign: Vec<bool>,
    pub f_sel: Vec<bool>,
    pub m: Vec<bool>,
}

impl SampleMask {
    pub fn from_flags(f_ign: Vec<bool>, f_sel: Vec<bool>) -> Self {
        let m = f_ign.iter().zip(&f_sel).map(|(&i, &s)| !i && s).collect();
        Self { f_ign, f_sel, m }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn selected(&self) -> usize {
        self.m.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor<T: Scalar>(&self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::new(
            shape.to_vec(),
            self.m
                .iter()
                .map(|&v| if v { T::one() } else { T::zero() })
                .collect(),
        )
    }

    /// Concatenates per-channel masks into one.
    pub fn stack(masks: &[SampleMask]) -> SampleMask {
        let f_ign = masks.iter().flat_map(|m| m.f_ign.iter().copied()).collect();
        let f_sel = masks.iter().flat_map(|m| m.f_sel.iter().copied()).collect();
        SampleMask::from_flags(f_ign, f_sel)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub n_pos: usize,
    pub n_hard: usize,
    pub n_rand: usize,
    pub hard_pool: usize,
    pub no_positives: bool,
}

impl std::ops::AddAssign for MiningStats {
    fn add_assign(&mut self, o: Self) {
        self.n_pos += o.n_pos;
        self.n_hard += o.n_hard;
        self.n_rand += o.n_rand;
        self.hard_pool += o.hard_pool;
        self.no_positives |= o.no_positives;
    }
}

/// `ceil(x)` that does not round `36.000000000000004` up to 37.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Online hard-negative mining over one map.
///
/// All positives are selected. The negative quota is
/// `round(neg_pos_ratio * n_pos)`; of it, `round(quota * hard_share)` come
/// from the hard pool (the top `ceil(hard_fraction * eligible)` eligible
/// negatives by loss, ties by index) and the rest uniformly from the other
/// eligible negatives, backfilled from the pool on shortfall. Eligible means
/// label 0 and not ignored.
pub fn mine_and_select<R: Rng + ?Sized>(
    cls_loss: &[f64],
    labels: &[f64],
    ignore: &[f64],
    cfg: &MiningConfig,
    rng: &mut R,
) -> Result<(SampleMask, MiningStats)> {
    let n = labels.len();
    if cls_loss.len() != n || ignore.len() != n {
        return Err(Error::shape(format!(
            "mining inputs differ in length: loss {}, labels {n}, ignore {}",
            cls_loss.len(),
            ignore.len()
        )));
    }
    let f_ign: Vec<bool> = ignore.iter().map(|&v| v > 0.0).collect();
    let mut f_sel: Vec<bool> = labels.iter().map(|&v| v > 0.0).collect();
    let n_pos = f_sel.iter().filter(|&&v| v).count();

    let eligible: Vec<usize> = (0..n).filter(|&i| labels[i] <= 0.0 && !f_ign[i]).collect();
    let no_positives = n_pos == 0;
    let quota = if no_positives {
        cfg.zero_positive_negatives
    } else {
        (cfg.neg_pos_ratio * n_pos as f64).round() as usize
    }
    .min(eligible.len());

    let pool_size = ceil_tol(cfg.hard_fraction * eligible.len() as f64).min(eligible.len());
    let mut ranked = eligible.clone();
    ranked.sort_by(|&a, &b| cls_loss[b].total_cmp(&cls_loss[a]).then(a.cmp(&b)));
    let pool = &ranked[..pool_size];
    let rest = &ranked[pool_size..];

    let n_hard = ((quota as f64 * cfg.hard_share).round() as usize).min(pool.len());
    for &i in &pool[..n_hard] {
        f_sel[i] = true;
    }
    let mut remaining = quota - n_hard;
    let n_from_rest = remaining.min(rest.len());
    // Draw from the eligible non-hard negatives in index order so the draw
    // depends only on the rng state and the set itself.
    let mut rest_sorted = rest.to_vec();
    rest_sorted.sort_unstable();
    for j in sample(rng, rest_sorted.len(), n_from_rest).into_iter() {
        f_sel[rest_sorted[j]] = true;
    }
    remaining -= n_from_rest;
    let backfill = remaining.min(pool.len() - n_hard);
    for &i in &pool[n_hard..n_hard + backfill] {
        f_sel[i] = true;
    }

    let stats = MiningStats {
        n_pos,
        n_hard: n_hard + backfill,
        n_rand: n_from_rest,
        hard_pool: pool_size,
        no_positives,
    };
    Ok((SampleMask::from_flags(f_ign, f_sel), stats))
}

fn count_norm<T: Scalar>(n: usize) -> T {
    T::from_usize(n.max(1)).unwrap_or_else(T::one)
}

/// Masked detection loss:
/// `sum M (y^ - y*)^2 / n_sel + lambda_loc * sum [y* > 0] M |d^ - d*|^2 / max(1, n_pos)`.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred_score: Var,
    pred_reg: Var,
    gt: &GroundTruthMap,
    mask: &SampleMask,
    w: &LossWeights,
) -> Result<Var> {
    let shape = gt.score.shape().to_vec();
    let (h, wd) = (shape[1], shape[2]);
    if mask.len() != h * wd {
        return Err(Error::shape(format!(
            "mask has {} pixels, map has {}",
            mask.len(),
            h * wd
        )));
    }
    let m: Tensor<T> = mask.to_tensor(&shape)?;
    let cls = tape.masked_l2(pred_score, &gt.score.cast(), &m)?;

    let gate: Vec<bool> = mask
        .m
        .iter()
        .zip(gt.score.data())
        .map(|(&m, &y)| m && y > 0.0)
        .collect();
    let n_pos = gate.iter().filter(|&&g| g).count();
    let plane: Vec<T> = gate
        .iter()
        .map(|&g| if g { T::one() } else { T::zero() })
        .collect();
    let reg_weight = Tensor::new(vec![4, h, wd], plane.repeat(4))?;
    let reg = tape.weighted_sq_error(pred_reg, &gt.reg.cast(), &reg_weight, count_norm(n_pos))?;
    tape.combine(&[(cls, T::one()), (reg, T::from_f64_lossy(w.lambda_loc))])
}

/// Scalar form of the combined loss: `lambda_det * det + lambda_lm * lm + rf`.
pub fn full_loss(det: f64, lm: f64, rf: f64, w: &LossWeights) -> f64 {
    w.lambda_det * det + w.lambda_lm * lm + rf
}

/// Tape form of [`full_loss`].
pub fn full_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    det: Var,
    lm: Option<Var>,
    rf: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut terms = vec![(det, T::from_f64_lossy(w.lambda_det))];
    if let Some(lm) = lm {
        terms.push((lm, T::from_f64_lossy(w.lambda_lm)));
    }
    if let Some(rf) = rf {
        terms.push((rf, T::one()));
    }
    tape.combine(&terms)
}

/// Per-pixel squared error, the ranking signal for mining.
pub fn squared_error_map(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .collect()
}
