//! Run configuration: one JSON document aggregating every module's settings,
//! plus `--key=value` overrides and cross-field validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::groundtruth::GeometryConfig;
use crate::inference::PyramidConfig;
use crate::net::ModelConfig;
use crate::sampling::{LossWeights, MiningConfig};
use crate::synth::{PatchConfig, SceneConfig};
use crate::train::{OptimConfig, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl DatasetConfig {
    /// `(train, val, test)` scene counts; the test split takes the remainder.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let train = (self.count as f64 * self.train_fraction).round() as usize;
        let val = ((self.count as f64 * self.val_fraction).round() as usize)
            .min(self.count - train.min(self.count));
        let train = train.min(self.count);
        (train, val, self.count - train - val)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub precision: Precision,
    pub use_refine: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub mining: MiningConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub pyramid: PyramidConfig,
    pub scene: SceneConfig,
    pub patches: PatchConfig,
    pub dataset: DatasetConfig,
    pub inference: InferenceConfig,
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {msg}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides. `key` is a dotted path such as
    /// `optim.lr`, or a bare field name that occurs exactly once in the tree.
    /// Values are parsed as JSON and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serialises");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let path = resolve_key(&tree, key)?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut tree;
            for part in &path {
                slot = slot.get_mut(part.as_str()).expect("path resolved above");
            }
            *slot = value;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("override rejected: {e}")))
    }

    /// Per-module checks followed by cross-field consistency. Errors name the
    /// offending field.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.model.validate()?;
        self.mining.validate()?;
        self.optim.validate()?;
        self.pyramid.validate()?;
        self.scene.validate()?;
        let g = &self.geometry;
        check(
            g.patch_size.is_multiple_of(8),
            "geometry.patch_size",
            "must be divisible by 8",
        )?;
        check(
            (g.reg_norm - g.target_height / 4.0).abs() < 1e-9,
            "geometry.reg_norm",
            "must equal geometry.target_height / 4",
        )?;
        check(
            g.n_landmarks == self.model.n_landmarks,
            "model.n_landmarks",
            "must equal geometry.n_landmarks",
        )?;
        check(
            (self.pyramid.reg_norm - g.reg_norm).abs() < 1e-12,
            "pyramid.reg_norm",
            "must equal geometry.reg_norm",
        )?;
        let d = &self.dataset;
        check(
            (0.0..=1.0).contains(&d.train_fraction)
                && (0.0..=1.0).contains(&d.val_fraction)
                && d.train_fraction + d.val_fraction <= 1.0 + 1e-12,
            "dataset.train_fraction",
            "train and val fractions must lie in [0, 1] and sum to at most 1",
        )?;
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            geometry: self.geometry.clone(),
            patches: self.patches.clone(),
            weights: self.loss,
            mining: self.mining.clone(),
            optim: self.optim.clone(),
        }
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    if key.contains('.') {
        let parts: Vec<String> = key.split('.').map(str::to_string).collect();
        let mut node = tree;
        for p in &parts {
            node = node
                .get(p.as_str())
                .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        }
        return Ok(parts);
    }
    let mut hits = Vec::new();
    find_leaf(tree, key, &mut Vec::new(), &mut hits);
    match hits.len() {
        1 => Ok(hits.remove(0)),
        0 => Err(Error::Config(format!("unknown config key '{key}'"))),
        _ => Err(Error::Config(format!(
            "config key '{key}' is ambiguous: {}",
            hits.iter()
                .map(|h| h.join("."))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn find_leaf(node: &Value, key: &str, path: &mut Vec<String>, hits: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = node {
        for (k, v) in map {
            path.push(k.clone());
            if k == key {
                hits.push(path.clone());
            }
            find_leaf(v, key, path, hits);
            path.pop();
        }
    }
}
