//! Dense ground-truth maps for a training patch: score circles, normalized
//! box offsets, landmark heatmaps and the gray-zone ignore flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// One annotated object. Landmarks may be `null` where unannotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default)]
    pub landmarks: Vec<Option<[f64; 2]>>,
}

impl ObjectAnnotation {
    pub fn new(bbox: BBox) -> Self {
        Self {
            bbox,
            landmarks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub patch_size: usize,
    pub target_height: f64,
    pub down_factor: usize,
    pub r_c_factor: f64,
    pub scale_range: (f64, f64),
    pub r_near: f64,
    pub r_l: f64,
    pub n_landmarks: usize,
    pub reg_norm: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            patch_size: 240,
            target_height: 50.0,
            down_factor: 4,
            r_c_factor: 0.3,
            scale_range: (0.8, 1.25),
            r_near: 2.0,
            r_l: 1.0,
            n_landmarks: 4,
            reg_norm: 12.5,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("geometry: {m}")));
        if self.down_factor != 4 {
            return bad("down_factor is fixed at 4");
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.down_factor) {
            return bad("down_factor must divide patch_size");
        }
        let (lo, hi) = self.scale_range;
        if !(lo < 1.0 && 1.0 < hi) {
            return bad("scale_range must satisfy low < 1 < high");
        }
        if !(self.r_c_factor > 0.0) || !(self.target_height > 0.0) || !(self.reg_norm > 0.0) {
            return bad("r_c_factor, target_height and reg_norm must be positive");
        }
        if self.r_near < 0.0 || self.r_l < 0.0 {
            return bad("radii must be non-negative");
        }
        Ok(())
    }

    /// Side of the output map.
    pub fn map_size(&self) -> usize {
        self.patch_size / self.down_factor
    }

    /// Whether a box of this height (output coordinates) is labeled positive.
    pub fn in_scale_range(&self, h_out: f64) -> bool {
        let base = self.target_height / self.down_factor as f64;
        let (lo, hi) = self.scale_range;
        let eps = 1e-9 * base;
        h_out >= lo * base - eps && h_out <= hi * base + eps
    }
}

/// Target stack at 1/4 of the patch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    /// `1 x h x w`, values in {0, 1}.
    pub score: Tensor<f64>,
    /// `4 x h x w`: `(dx_t, dy_t, dx_b, dy_b) / reg_norm`.
    pub reg: Tensor<f64>,
    /// `N x h x w`, values in {0, 1}.
    pub landmarks: Tensor<f64>,
    /// `1 x h x w` gray-zone flags for the score channel.
    pub ignore: Tensor<f64>,
    /// `N x h x w` gray-zone and unannotated-landmark flags.
    pub landmark_ignore: Tensor<f64>,
    /// Boxes dropped because they lie fully outside the patch.
    pub skipped: usize,
}

impl GroundTruthMap {
    pub fn height(&self) -> usize {
        self.score.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.score.shape()[2]
    }

    pub fn positive_count(&self) -> usize {
        self.score.data().iter().filter(|&&v| v > 0.0).count()
    }
}

/// `(x - x_t, y - y_t, x - x_b, y - y_b) / reg_norm`, everything in output coordinates.
pub fn regression_target(pixel: (f64, f64), bbox: &BBox, reg_norm: f64) -> [f64; 4] {
    let (x, y) = pixel;
    [
        (x - bbox.x_t) / reg_norm,
        (y - bbox.y_t) / reg_norm,
        (x - bbox.x_b) / reg_norm,
        (y - bbox.y_b) / reg_norm,
    ]
}

/// Inverse of [`regression_target`].
pub fn decode_offsets(pixel: (f64, f64), d: [f64; 4], reg_norm: f64) -> BBox {
    let (x, y) = pixel;
    BBox::new(
        x - d[0] * reg_norm,
        y - d[1] * reg_norm,
        x - d[2] * reg_norm,
        y - d[3] * reg_norm,
    )
}

/// Lattice offsets within Euclidean distance `r` of the origin.
fn disc_offsets(r: f64) -> Vec<(isize, isize)> {
    let ri = r.floor() as isize;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Sets `plane[y][x] = 1` for lattice points within `r` of `(cx, cy)`.
fn fill_circle(plane: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, r: f64) {
    if r < 0.0 {
        return;
    }
    let y0 = (cy - r).ceil().max(0.0) as usize;
    let x0 = (cx - r).ceil().max(0.0) as usize;
    let y1 = (cy + r).floor();
    let x1 = (cx + r).floor();
    if y1 < 0.0 || x1 < 0.0 {
        return;
    }
    let y1 = (y1 as usize).min(h.saturating_sub(1));
    let x1 = (x1 as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                plane[y * w + x] = 1.0;
            }
        }
    }
}

/// Gray zone: a non-positive pixel is ignored iff some positive pixel lies
/// within Euclidean distance `r_near`. Works on any `.. x h x w` stack,
/// channel by channel.
pub fn compute_ignore_flags(score: &Tensor<f64>, r_near: f64) -> Result<Tensor<f64>> {
    let (c, h, w) = score.chw()?;
    let offsets = disc_offsets(r_near);
    let mut out = Tensor::zeros(score.shape());
    for ch in 0..c {
        let s = score.channel(ch);
        let o = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                if s[y * w + x] <= 0.0 {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        o[ny as usize * w + nx as usize] = 1.0;
                    }
                }
            }
        }
        for (o, &s) in o.iter_mut().zip(s) {
            if s > 0.0 {
                *o = 0.0;
            }
        }
    }
    Ok(out)
}

/// Encodes annotations given in patch pixels into the square output map of
/// side `patch_size / down_factor`.
pub fn encode_patch(objects: &[ObjectAnnotation], cfg: &GeometryConfig) -> Result<GroundTruthMap> {
    encode_map(objects, cfg.patch_size, cfg.patch_size, cfg)
}

/// Encodes annotations for an input of `width x height` pixels.
pub fn encode_map(
    objects: &[ObjectAnnotation],
    width: usize,
    height: usize,
    cfg: &GeometryConfig,
) -> Result<GroundTruthMap> {
    cfg.validate()?;
    let down = cfg.down_factor as f64;
    let (h, w) = (height / cfg.down_factor, width / cfg.down_factor);
    let n = cfg.n_landmarks;
    let mut score = Tensor::zeros(&[1, h, w]);
    let mut reg = Tensor::zeros(&[4, h, w]);
    let mut landmarks = Tensor::zeros(&[n, h, w]);
    let mut unlabeled = Tensor::zeros(&[n, h, w]);
    let mut skipped = 0;

    let mut in_range: Vec<BBox> = Vec::new();
    for obj in objects {
        let Some(clipped) = obj.bbox.clip(width as f64, height as f64) else {
            skipped += 1;
            continue;
        };
        let b = clipped.scaled(1.0 / down);
        if cfg.in_scale_range(b.height()) {
            let (cx, cy) = b.center();
            fill_circle(score.data_mut(), h, w, cx, cy, cfg.r_c_factor * b.height());
            in_range.push(b);
        }
        for k in 0..n {
            match obj.landmarks.get(k).copied().flatten() {
                Some([px, py]) => fill_circle(
                    landmarks.channel_mut(k),
                    h,
                    w,
                    px / down,
                    py / down,
                    cfg.r_l,
                ),
                None => {
                    let plane = unlabeled.channel_mut(k);
                    let ys = (b.y_t.ceil().max(0.0) as usize)
                        ..=(b.y_b.floor().max(0.0) as usize).min(h.saturating_sub(1));
                    for y in ys {
                        for x in (b.x_t.ceil().max(0.0) as usize)
                            ..=(b.x_b.floor().max(0.0) as usize).min(w.saturating_sub(1))
                        {
                            plane[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }

    if !in_range.is_empty() {
        let centers: Vec<(f64, f64)> = in_range.iter().map(BBox::center).collect();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &(cx, cy)) in centers.iter().enumerate() {
                    let d = (px - cx).powi(2) + (py - cy).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                let t = regression_target((px, py), &in_range[best], cfg.reg_norm);
                for (c, v) in t.into_iter().enumerate() {
                    reg.set3(c, y, x, v);
                }
            }
        }
    }

    let ignore = compute_ignore_flags(&score, cfg.r_near)?;
    let mut landmark_ignore = compute_ignore_flags(&landmarks, cfg.r_near)?;
    for ((li, &u), &l) in landmark_ignore
        .data_mut()
        .iter_mut()
        .zip(unlabeled.data())
        .zip(landmarks.data())
    {
        if u > 0.0 && l == 0.0 {
            *li = 1.0;
        }
    }

    Ok(GroundTruthMap {
        score,
        reg,
        landmarks,
        ignore,
        landmark_ignore,
        skipped,
    })
}
