//! Synthetic scenes of face-like objects over clutter, and the positive /
//! random training-patch sampler with flip, shift and scale jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::groundtruth::{GeometryConfig, ObjectAnnotation};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object (box) height range in pixels.
    pub min_height: f64,
    pub max_height: f64,
    /// Clutter shapes per 10,000 pixels.
    pub clutter_density: f64,
    /// Share of clutter ellipses drawn in face colours (featureless decoys).
    pub decoy_fraction: f64,
    /// Share of objects whose landmarks are all written as `null`.
    pub landmark_null_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            min_objects: 1,
            max_objects: 3,
            min_height: 32.0,
            max_height: 96.0,
            clutter_density: 1.5,
            decoy_fraction: 0.3,
            landmark_null_fraction: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("scene: image must be at least 16x16".into()));
        }
        if self.min_objects > self.max_objects
            || !(self.min_height > 0.0 && self.min_height <= self.max_height)
        {
            return Err(Error::Config(
                "scene: empty object count or height range".into(),
            ));
        }
        if self.max_height > self.height as f64 * 0.9 {
            return Err(Error::Config(
                "scene: max_height must fit in the image".into(),
            ));
        }
        Ok(())
    }
}

/// Landmarks drawn per object: left eye, right eye, nose, mouth.
pub const SCENE_LANDMARKS: usize = 4;

/// Index permutation applied to landmarks on a horizontal flip.
pub const FLIP_PERMUTATION: [usize; SCENE_LANDMARKS] = [1, 0, 2, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    /// `3 x H x W`, values quantised to multiples of 1/255.
    pub image: Tensor<f64>,
    pub objects: Vec<ObjectAnnotation>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    /// Paints pixels whose centres fall inside the axis-aligned ellipse.
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
        let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + ry + 1.0).ceil().max(0.0) as usize).min(self.h);
        let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + rx + 1.0).ceil().max(0.0) as usize).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.px[y * self.w + x] = color;
                }
            }
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3]) {
        let c = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
        for y in c(y0, self.h)..c(y1, self.h) {
            for x in c(x0, self.w)..c(x1, self.w) {
                self.px[y * self.w + x] = color;
            }
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn face_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    let r = rng.gen_range(0.7..0.98);
    let g = r * rng.gen_range(0.62..0.82);
    let b = g * rng.gen_range(0.6..0.85);
    [r, g, b]
}

fn dark<R: Rng>(rng: &mut R) -> [f64; 3] {
    let v = rng.gen_range(0.02..0.2);
    [v, v * rng.gen_range(0.8..1.2), v * rng.gen_range(0.8..1.2)]
}

/// Renders one scene; `(seed, cfg)` determine it completely.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneAnnotation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let vertical = rng.gen_bool(0.5);
    let mut canvas = Canvas {
        w,
        h,
        px: vec![[0.0; 3]; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let t = if vertical {
                y as f64 / h as f64
            } else {
                x as f64 / w as f64
            };
            let mut p = [0.0; 3];
            for c in 0..3 {
                p[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            canvas.px[y * w + x] = p;
        }
    }

    let n_clutter = (cfg.clutter_density * (w * h) as f64 / 10_000.0).round() as usize;
    for _ in 0..n_clutter {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let sx = rng.gen_range(4.0..cfg.max_height * 0.6);
        let sy = rng.gen_range(4.0..cfg.max_height * 0.6);
        match rng.gen_range(0..3) {
            0 => canvas.rect(cx - sx, cy - sy, cx + sx, cy + sy, random_color(&mut rng)),
            1 => {
                let color = if rng.gen_bool(cfg.decoy_fraction.clamp(0.0, 1.0)) {
                    face_color(&mut rng)
                } else {
                    random_color(&mut rng)
                };
                canvas.ellipse(cx, cy, sx * 0.5, sy * 0.6, color);
            }
            _ => {
                let r = rng.gen_range(1.5..5.0);
                canvas.ellipse(cx, cy, r, r, dark(&mut rng));
            }
        }
    }

    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectAnnotation> = Vec::new();
    let mut attempts = 0;
    while objects.len() < n_obj && attempts < 200 {
        attempts += 1;
        let oh = rng.gen_range(cfg.min_height..=cfg.max_height);
        let ow = oh * rng.gen_range(0.68..0.82);
        let cx = rng.gen_range(ow / 2.0 + 1.0..w as f64 - ow / 2.0 - 1.0);
        let cy = rng.gen_range(oh / 2.0 + 1.0..h as f64 - oh / 2.0 - 1.0);
        let b = BBox::from_center(cx, cy, ow, oh);
        let margin = BBox::from_center(cx, cy, ow + 6.0, oh + 6.0);
        if objects.iter().any(|o| o.bbox.intersection(&margin) > 0.0) {
            continue;
        }
        let (rx, ry) = (ow / 2.0, oh / 2.0);
        canvas.ellipse(cx, cy, rx, ry, face_color(&mut rng));
        let eye_dx = rx * rng.gen_range(0.36..0.46);
        let eye_y = cy - ry * rng.gen_range(0.15..0.3);
        let eye_r = (oh * 0.07).max(1.0);
        let nose_y = cy + ry * rng.gen_range(0.05..0.15);
        let mouth_y = cy + ry * rng.gen_range(0.45..0.55);
        let ink = dark(&mut rng);
        canvas.ellipse(cx - eye_dx, eye_y, eye_r, eye_r, ink);
        canvas.ellipse(cx + eye_dx, eye_y, eye_r, eye_r, ink);
        let nose = face_color(&mut rng).map(|v| v * 0.7);
        canvas.ellipse(cx, nose_y, eye_r * 0.8, eye_r * 1.1, nose);
        canvas.ellipse(cx, mouth_y, rx * 0.35, (oh * 0.04).max(1.0), ink);
        let null = rng.gen_bool(cfg.landmark_null_fraction.clamp(0.0, 1.0));
        let landmarks = [
            [cx - eye_dx, eye_y],
            [cx + eye_dx, eye_y],
            [cx, nose_y],
            [cx, mouth_y],
        ]
        .into_iter()
        .map(|p| (!null).then_some(p))
        .collect();
        objects.push(ObjectAnnotation { bbox: b, landmarks });
    }

    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = canvas.px[y * w + x];
            for (c, &pc) in p.iter().enumerate() {
                let v = pc + rng.gen_range(-0.04..0.04);
                image.set3(c, y, x, crate::image_io::to_u8(v) as f64 / 255.0);
            }
        }
    }
    Ok(SceneAnnotation { image, objects })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub jitter: bool,
    pub flip_prob: f64,
    /// Maximum shift in patch pixels at a 240-pixel patch; scaled with patch size.
    pub translate: f64,
    pub scale_jitter: (f64, f64),
    /// Log-uniform range of patch-pixels-per-scene-pixel for random patches.
    pub random_scale_range: (f64, f64),
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            jitter: true,
            flip_prob: 0.5,
            translate: 25.0,
            scale_jitter: (0.8, 1.25),
            random_scale_range: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Positive,
    Random,
}

/// Patch coordinate `u` maps to scene coordinate `ax * u + bx` (same for y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTransform {
    pub ax: f64,
    pub bx: f64,
    pub ay: f64,
    pub by: f64,
}

impl PatchTransform {
    pub fn flipped(&self) -> bool {
        self.ax < 0.0
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.bx) / self.ax, (y - self.by) / self.ay)
    }

    pub fn to_scene(&self, u: f64, v: f64) -> (f64, f64) {
        (self.ax * u + self.bx, self.ay * v + self.by)
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        let (u0, v0) = self.to_patch(b.x_t, b.y_t);
        let (u1, v1) = self.to_patch(b.x_b, b.y_b);
        BBox::new(u0.min(u1), v0.min(v1), u0.max(u1), v0.max(v1))
    }

    pub fn object_to_patch(&self, o: &ObjectAnnotation) -> ObjectAnnotation {
        let moved: Vec<Option<[f64; 2]>> = o
            .landmarks
            .iter()
            .map(|p| {
                p.map(|[x, y]| {
                    let (u, v) = self.to_patch(x, y);
                    [u, v]
                })
            })
            .collect();
        let landmarks = if self.flipped() && moved.len() == SCENE_LANDMARKS {
            FLIP_PERMUTATION.iter().map(|&k| moved[k]).collect()
        } else {
            moved
        };
        ObjectAnnotation {
            bbox: self.box_to_patch(&o.bbox),
            landmarks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch: Tensor<f64>,
    pub objects: Vec<ObjectAnnotation>,
    pub kind: PatchKind,
    pub transform: PatchTransform,
}

/// Bilinear resampling of the scene under `t`; pixels that fall outside the
/// scene are filled with noise.
fn render_patch<R: Rng>(
    scene: &Tensor<f64>,
    size: usize,
    t: &PatchTransform,
    rng: &mut R,
) -> Tensor<f64> {
    let (_, h, w) = scene.chw().expect("scene is C x H x W");
    let mut out = Tensor::zeros(&[3, size, size]);
    for v in 0..size {
        let (_, sy) = t.to_scene(0.0, v as f64 + 0.5);
        for u in 0..size {
            let (sx, _) = t.to_scene(u as f64 + 0.5, 0.0);
            if sx < 0.0 || sy < 0.0 || sx > w as f64 || sy > h as f64 {
                for c in 0..3 {
                    out.set3(c, v, u, rng.gen_range(0.2..0.8));
                }
                continue;
            }
            let (px, py) = (sx - 0.5, sy - 0.5);
            let (fx, fy) = (px.floor(), py.floor());
            let (wx, wy) = (px - fx, py - fy);
            let cl = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
            let (x0, x1) = (cl(fx, w), cl(fx + 1.0, w));
            let (y0, y1) = (cl(fy, h), cl(fy + 1.0, h));
            for c in 0..3 {
                let top = scene.at3(c, y0, x0) * (1.0 - wx) + scene.at3(c, y0, x1) * wx;
                let bot = scene.at3(c, y1, x0) * (1.0 - wx) + scene.at3(c, y1, x1) * wx;
                out.set3(c, v, u, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

fn make_patch<R: Rng>(
    scene: &SceneAnnotation,
    size: usize,
    t: PatchTransform,
    kind: PatchKind,
    rng: &mut R,
) -> PatchSample {
    PatchSample {
        patch: render_patch(&scene.image, size, &t, rng),
        objects: scene.objects.iter().map(|o| t.object_to_patch(o)).collect(),
        kind,
        transform: t,
    }
}

/// Crop centred on object `index`, scaled so its height equals the target
/// height, then flip / shift / scale jitter.
pub fn sample_positive_patch<R: Rng>(
    scene: &SceneAnnotation,
    index: usize,
    geo: &GeometryConfig,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<PatchSample> {
    let obj = scene
        .objects
        .get(index)
        .ok_or_else(|| Error::Data(format!("scene has no object {index}")))?;
    let p = geo.patch_size as f64;
    let (cx, cy) = obj.bbox.center();
    let mut s = geo.target_height / obj.bbox.height();
    let (mut tx, mut ty, mut sign) = (0.0, 0.0, 1.0);
    if cfg.jitter {
        if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
            sign = -1.0;
        }
        let max_shift = cfg.translate * p / 240.0;
        if max_shift > 0.0 {
            tx = rng.gen_range(-max_shift..=max_shift);
            ty = rng.gen_range(-max_shift..=max_shift);
        }
        let (lo, hi) = cfg.scale_jitter;
        s *= rng.gen_range(lo..=hi);
    }
    let ax = sign / s;
    let ay = 1.0 / s;
    let t = PatchTransform {
        ax,
        bx: cx - ax * (p / 2.0 + tx),
        ay,
        by: cy - ay * (p / 2.0 + ty),
    };
    Ok(make_patch(
        scene,
        geo.patch_size,
        t,
        PatchKind::Positive,
        rng,
    ))
}

/// Crop at a uniform location and log-uniform scale.
pub fn sample_random_patch<R: Rng>(
    scene: &SceneAnnotation,
    geo: &GeometryConfig,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<PatchSample> {
    let (_, h, w) = scene.image.chw()?;
    let p = geo.patch_size as f64;
    let (lo, hi) = cfg.random_scale_range;
    let s = if lo < hi {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    } else {
        lo
    };
    let side = p / s;
    let place = |len: f64, rng: &mut R| {
        if side < len {
            rng.gen_range(0.0..=len - side)
        } else {
            (len - side) / 2.0
        }
    };
    let x0 = place(w as f64, rng);
    let y0 = place(h as f64, rng);
    let flip = cfg.jitter && rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let t = if flip {
        PatchTransform {
            ax: -1.0 / s,
            bx: x0 + side,
            ay: 1.0 / s,
            by: y0,
        }
    } else {
        PatchTransform {
            ax: 1.0 / s,
            bx: x0,
            ay: 1.0 / s,
            by: y0,
        }
    };
    Ok(make_patch(scene, geo.patch_size, t, PatchKind::Random, rng))
}

/// Alternating positive / random patches (even slots positive).
pub fn assemble_batch<R: Rng>(
    scenes: &[SceneAnnotation],
    size: usize,
    geo: &GeometryConfig,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    let with_objects: Vec<usize> = (0..scenes.len())
        .filter(|&i| !scenes[i].objects.is_empty())
        .collect();
    if with_objects.is_empty() {
        return Err(Error::Data("no training scene contains an object".into()));
    }
    (0..size)
        .map(|slot| {
            if slot % 2 == 0 {
                let si = with_objects[rng.gen_range(0..with_objects.len())];
                let oi = rng.gen_range(0..scenes[si].objects.len());
                sample_positive_patch(&scenes[si], oi, geo, cfg, rng)
            } else {
                let si = rng.gen_range(0..scenes.len());
                sample_random_patch(&scenes[si], geo, cfg, rng)
            }
        })
        .collect()
}
