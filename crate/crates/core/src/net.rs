//! Desk-scale dense detector: a three-stage conv backbone with /4 output,
//! two-level fusion through bilinear upsampling, 1x1 heads for score and box
//! offsets, and optional landmark and refine branches.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{read_checkpoint, write_checkpoint, Param, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; 3],
    pub head_hidden: usize,
    /// 0 disables the landmark and refine branches.
    pub n_landmarks: usize,
    pub refine_hidden: usize,
    pub input_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64],
            head_hidden: 48,
            n_landmarks: 4,
            refine_hidden: 8,
            input_channels: 3,
        }
    }
}

impl ModelConfig {
    pub const STRIDE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0)
            || self.head_hidden == 0
            || self.refine_hidden == 0
            || self.input_channels == 0
        {
            return Err(Error::Config(
                "model: channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn has_landmarks(&self) -> bool {
        self.n_landmarks > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSpec {
    name: &'static str,
    in_c: usize,
    out_c: usize,
    k: usize,
}

fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let [c1, c2, c3] = cfg.stage_channels;
    let fused = c2 + c3;
    let hh = cfg.head_hidden;
    let l = |name, in_c, out_c, k| LayerSpec {
        name,
        in_c,
        out_c,
        k,
    };
    let mut v = vec![
        l("stage1.conv1", cfg.input_channels, c1, 3),
        l("stage1.conv2", c1, c1, 3),
        l("stage2.conv1", c1, c2, 3),
        l("stage2.conv2", c2, c2, 3),
        l("stage3.conv1", c2, c3, 3),
        l("stage3.conv2", c3, c3, 3),
        l("score.hidden", fused, hh, 1),
        l("score.out", hh, 1, 1),
        l("reg.hidden", fused, hh, 1),
        l("reg.out", hh, 4, 1),
    ];
    if cfg.has_landmarks() {
        let n = cfg.n_landmarks;
        let rh = cfg.refine_hidden;
        v.extend([
            l("landmark.hidden", fused, hh, 1),
            l("landmark.out", hh, n, 1),
            l("refine.conv1", 1 + n, rh, 3),
            l("refine.conv2", rh, rh, 3),
            l("refine.out", rh, 1, 1),
        ]);
    }
    v
}

/// Pixels in `[0, 1]` are mapped to `(v - INPUT_MEAN) * INPUT_SCALE` before
/// the first convolution. Without the scale the signal shrinks through the
/// Xavier-initialised stack and early layers barely train.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

mod layer {
    pub const STAGE1: [usize; 2] = [0, 1];
    pub const STAGE2: [usize; 2] = [2, 3];
    pub const STAGE3: [usize; 2] = [4, 5];
    pub const SCORE: [usize; 2] = [6, 7];
    pub const REG: [usize; 2] = [8, 9];
    pub const LANDMARK: [usize; 2] = [10, 11];
    pub const REFINE: [usize; 3] = [12, 13, 14];
}

/// Dense prediction maps at a quarter of the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMaps<T> {
    pub score: Tensor<T>,
    pub reg: Tensor<T>,
    /// `N x h x w`; zero channels when the landmark branch is disabled.
    pub landmarks: Tensor<T>,
    pub refine_score: Option<Tensor<T>>,
}

/// Tape handles for the outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub score: Var,
    pub reg: Var,
    pub landmarks: Option<Var>,
    pub refine: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    specs: Vec<LayerSpec>,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Model<T> {
    /// Xavier-uniform weights, zero biases, fully determined by `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = layer_specs(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * specs.len());
        for s in &specs {
            let fan_in = (s.in_c * s.k * s.k) as f64;
            let fan_out = (s.out_c * s.k * s.k) as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let w = Tensor::from_fn(&[s.out_c, s.in_c, s.k, s.k], |_| {
                lit(rng.gen_range(-limit..limit))
            });
            params.push(Param::new(format!("{}.weight", s.name), w));
            params.push(Param::new(
                format!("{}.bias", s.name),
                Tensor::zeros(&[s.out_c]),
            ));
        }
        Ok(Self { cfg, specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Param::cast).collect(),
        }
    }

    fn conv(&self, tape: &mut Tape<T>, layer: usize, x: Var, relu: bool) -> Result<Var> {
        let w = tape.param(2 * layer, &self.params[2 * layer].value);
        let b = tape.param(2 * layer + 1, &self.params[2 * layer + 1].value);
        let y = tape.conv2d(x, w, b, self.specs[layer].k / 2)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn head(&self, tape: &mut Tape<T>, layers: [usize; 2], x: Var) -> Result<Var> {
        let h = self.conv(tape, layers[0], x, true)?;
        self.conv(tape, layers[1], h, false)
    }

    /// Records the forward pass of an image with values in `[0, 1]`.
    /// Height and width must be multiples of 8.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<ForwardVars> {
        let (c, h, w) = image.chw()?;
        if c != self.cfg.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not a multiple of 8; pad the image before calling forward"
            )));
        }
        let (mean, scale) = (lit::<T>(INPUT_MEAN), lit::<T>(INPUT_SCALE));
        let x = tape.input(image.map(|v| (v - mean) * scale));

        let mut f = x;
        for l in layer::STAGE1 {
            f = self.conv(tape, l, f, true)?;
        }
        f = tape.maxpool2(f)?;
        for l in layer::STAGE2 {
            f = self.conv(tape, l, f, true)?;
        }
        let low = tape.maxpool2(f)?;
        let mut high = tape.maxpool2(low)?;
        for l in layer::STAGE3 {
            high = self.conv(tape, l, high, true)?;
        }
        let up = tape.upsample2(high)?;
        let fused = tape.concat_channels(low, up)?;

        let score = self.head(tape, layer::SCORE, fused)?;
        let reg = self.head(tape, layer::REG, fused)?;
        let (landmarks, refine) = if self.cfg.has_landmarks() {
            let lm = self.head(tape, layer::LANDMARK, fused)?;
            let joined = tape.concat_channels(score, lm)?;
            let r1 = self.conv(tape, layer::REFINE[0], joined, true)?;
            let r2 = self.conv(tape, layer::REFINE[1], r1, true)?;
            let rf = self.conv(tape, layer::REFINE[2], r2, false)?;
            (Some(lm), Some(rf))
        } else {
            (None, None)
        };
        Ok(ForwardVars {
            score,
            reg,
            landmarks,
            refine,
        })
    }

    /// Forward pass without keeping the tape around.
    pub fn predict(&self, image: &Tensor<T>) -> Result<OutputMaps<T>> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, image)?;
        let score = tape.value(v.score).clone();
        let (_, h, w) = score.chw()?;
        Ok(OutputMaps {
            reg: tape.value(v.reg).clone(),
            landmarks: v
                .landmarks
                .map(|l| tape.value(l).clone())
                .unwrap_or_else(|| Tensor::zeros(&[0, h, w])),
            refine_score: v.refine.map(|r| tape.value(r).clone()),
            score,
        })
    }

    /// Adds the parameter gradients recorded on `tape` (after `backward`)
    /// into the model's parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for (slot, g) in tape.param_grads() {
            self.params[slot].value.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Gives every parameter a zero gradient if it has none, so unused
    /// branches still take a weight-decay step.
    pub fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if p.value.grad().is_none() {
                let n = p.value.len();
                p.value
                    .set_grad(vec![T::zero(); n])
                    .expect("matching length");
            }
        }
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.params)?;
        Ok(buf)
    }

    /// Writes the binary checkpoint and its JSON config header next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(BufWriter::new(f), &self.params).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            e => e,
        })?;
        let header = header_path(path);
        let json = serde_json::to_string_pretty(&self.cfg).expect("config serializes");
        std::fs::write(&header, json + "\n").map_err(|e| Error::io(&header, e))
    }

    /// Loads a checkpoint, checking it against `cfg` and its own header.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let header = header_path(path);
        if header.exists() {
            let text = std::fs::read_to_string(&header).map_err(|e| Error::io(&header, e))?;
            let saved: ModelConfig =
                serde_json::from_str(&text).map_err(|e| Error::json(&header, e))?;
            if let Some(field) = config_mismatch(&saved, cfg) {
                return Err(Error::Data(format!(
                    "checkpoint {} was trained with a different model.{field}",
                    path.display()
                )));
            }
        }
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let records = read_checkpoint(BufReader::new(f))?;
        let mut model = Self::new(cfg.clone(), 0)?;
        if records.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint {} has {} tensors, model needs {}",
                path.display(),
                records.len(),
                model.params.len()
            )));
        }
        for (p, (name, t)) in model.params.iter_mut().zip(records) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *p = Param::new(name, t.cast());
        }
        Ok(model)
    }
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// First differing field name, if any.
pub fn config_mismatch(a: &ModelConfig, b: &ModelConfig) -> Option<&'static str> {
    if a.stage_channels != b.stage_channels {
        Some("stage_channels")
    } else if a.head_hidden != b.head_hidden {
        Some("head_hidden")
    } else if a.n_landmarks != b.n_landmarks {
        Some("n_landmarks")
    } else if a.refine_hidden != b.refine_hidden {
        Some("refine_hidden")
    } else if a.input_channels != b.input_channels {
        Some("input_channels")
    } else {
        None
    }
}
