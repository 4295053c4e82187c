//! Image-pyramid detection: resize, pad, forward, decode per-pixel boxes,
//! then one NMS over all scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, Detection};
use crate::net::{Model, OutputMaps};
use crate::scalar::Scalar;
use crate::tensor::kernels::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub min_exp: f64,
    pub max_exp: f64,
    pub step: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub reg_norm: f64,
    /// Longest side allowed before the pyramid; larger images are downsampled first.
    pub max_side: Option<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            min_exp: -3.0,
            max_exp: 1.2,
            step: 0.3,
            score_threshold: 0.5,
            nms_iou: 0.5,
            reg_norm: 12.5,
            max_side: Some(800),
        }
    }
}

impl PyramidConfig {
    /// Same schedule with the 0.75 suppression threshold.
    pub fn strict() -> Self {
        Self {
            nms_iou: 0.75,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_exp <= self.max_exp) || !(self.step > 0.0) {
            return Err(Error::Config(
                "pyramid: need min_exp <= max_exp and step > 0".into(),
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config("pyramid: nms_iou must be in (0, 1]".into()));
        }
        if !(self.reg_norm > 0.0) {
            return Err(Error::Config("pyramid: reg_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `2^(min_exp + k * step)` for every `k` with exponent `<= max_exp`.
pub fn pyramid_scales(cfg: &PyramidConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let e = cfg.min_exp + k as f64 * cfg.step;
        if e > cfg.max_exp + 1e-9 {
            break;
        }
        out.push(e.exp2());
        k += 1;
    }
    out
}

/// Decoded candidates of one map plus the number of degenerate boxes dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decoded {
    pub detections: Vec<Detection>,
    pub degenerate: usize,
}

/// Converts every output pixel above the score threshold into a box in
/// original-image coordinates.
pub fn decode_map<T: Scalar>(
    out: &OutputMaps<T>,
    scale: f64,
    cfg: &PyramidConfig,
    use_refine: bool,
) -> Decoded {
    decode_map_xy(out, scale, scale, scale, cfg, use_refine)
}

fn decode_map_xy<T: Scalar>(
    out: &OutputMaps<T>,
    sx: f64,
    sy: f64,
    scale: f64,
    cfg: &PyramidConfig,
    use_refine: bool,
) -> Decoded {
    let score = match (&out.refine_score, use_refine) {
        (Some(r), true) => r,
        _ => &out.score,
    };
    let (h, w) = (score.shape()[1], score.shape()[2]);
    let stride = crate::net::ModelConfig::STRIDE as f64;
    let mut res = Decoded::default();
    for y in 0..h {
        for x in 0..w {
            let s = score.at3(0, y, x).to_f64_lossy();
            if !(s > cfg.score_threshold) {
                continue;
            }
            let d = |c| out.reg.at3(c, y, x).to_f64_lossy() * cfg.reg_norm;
            let (xi, yi) = (x as f64, y as f64);
            let b = BBox::new(
                (xi - d(0)) * stride / sx,
                (yi - d(1)) * stride / sy,
                (xi - d(2)) * stride / sx,
                (yi - d(3)) * stride / sy,
            );
            if !b.is_valid() || b.width() <= 0.0 || b.height() <= 0.0 {
                res.degenerate += 1;
                continue;
            }
            res.detections.push(Detection {
                bbox: b,
                score: s,
                scale,
            });
        }
    }
    res
}

/// Replicates the last row / column until both sides are multiples of 8.
pub fn pad_to_multiple<T: Scalar>(image: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out.set3(ch, y, x, image.at3(ch, y.min(h - 1), x.min(w - 1)));
            }
        }
    }
    Ok(out)
}

pub fn resize<T: Scalar>(image: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    Tensor::new(
        vec![c, oh, ow],
        resize_bilinear(c, h, w, image.data(), oh, ow),
    )
}

/// Candidates from every pyramid level before NMS.
pub fn detect_candidates<T: Scalar>(
    image: &Tensor<f64>,
    model: &Model<T>,
    cfg: &PyramidConfig,
    use_refine: bool,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (_, h, w) = image.chw()?;
    if h == 0 || w == 0 {
        return Err(Error::Data("empty image".into()));
    }
    let base: Tensor<T> = image.cast();
    let pre = match cfg.max_side {
        Some(m) if h.max(w) > m => m as f64 / h.max(w) as f64,
        _ => 1.0,
    };
    let mut all = Vec::new();
    for s in pyramid_scales(cfg) {
        let eff = pre * s;
        let (oh, ow) = (
            (h as f64 * eff).round() as usize,
            (w as f64 * eff).round() as usize,
        );
        if oh < 8 || ow < 8 {
            continue;
        }
        let level = if (oh, ow) == (h, w) {
            base.clone()
        } else {
            resize(&base, oh, ow)?
        };
        let padded = pad_to_multiple(&level, 8)?;
        let out = model.predict(&padded)?;
        let dec = decode_map_xy(
            &out,
            ow as f64 / w as f64,
            oh as f64 / h as f64,
            eff,
            cfg,
            use_refine,
        );
        for mut d in dec.detections {
            if let Some(b) = d.bbox.clip(w as f64, h as f64) {
                d.bbox = b;
                all.push(d);
            }
        }
    }
    Ok(all)
}

/// Full pyramid detection with one NMS over the pooled candidates.
pub fn detect<T: Scalar>(
    image: &Tensor<f64>,
    model: &Model<T>,
    cfg: &PyramidConfig,
    use_refine: bool,
) -> Result<Vec<Detection>> {
    let all = detect_candidates(image, model, cfg, use_refine)?;
    Ok(nms(&all, cfg.nms_iou))
}
