//! Command implementations behind the `densebox` binary: dataset synthesis,
//! training, detection and evaluation, each reproducible from its config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_pr_curve, EvalReport};
use crate::geometry::{BBox, Detection};
use crate::groundtruth::ObjectAnnotation;
use crate::image_io::{draw_box, read_ppm, write_ppm};
use crate::inference::detect;
use crate::net::Model;
use crate::scalar::Scalar;
use crate::synth::{generate_scene, SceneAnnotation};
use crate::tensor::Tensor;
use crate::train::{fit, StepStats};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split '{s}' (train, val, test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub annotation: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSummary {
    pub scenes: usize,
    pub objects: usize,
}

/// Writes `count` scenes as PPM + JSON annotation pairs, the manifest and
/// the resolved config.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let scenes_dir = out_dir.join("scenes");
    create_dir(&scenes_dir)?;
    let (n_train, n_val, _) = cfg.dataset.split_counts();
    let mut manifest = Manifest::default();
    let mut objects = 0;
    for i in 0..cfg.dataset.count {
        let scene = generate_scene(scene_seed(cfg.seed, i), &cfg.scene)?;
        let key = format!("scene_{i:05}");
        let image = format!("scenes/{key}.ppm");
        let annotation = format!("scenes/{key}.json");
        write_ppm(&out_dir.join(&image), &scene.image)?;
        write_json(&out_dir.join(&annotation), &scene.objects)?;
        objects += scene.objects.len();
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        manifest.entries.push(ManifestEntry {
            key,
            image,
            annotation,
            split,
        });
    }
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    cfg.save(&out_dir.join(CONFIG))?;
    Ok(SynthSummary {
        scenes: manifest.entries.len(),
        objects,
    })
}

pub fn load_annotation(path: &Path) -> Result<Vec<ObjectAnnotation>> {
    read_json(path)
}

/// Loads every scene of `split` with its key.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(String, SceneAnnotation)>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .split(split)
        .map(|e| {
            let image = read_ppm(&dir.join(&e.image))?;
            let objects = load_annotation(&dir.join(&e.annotation))?;
            Ok((e.key.clone(), SceneAnnotation { image, objects }))
        })
        .collect()
}

/// Checkpoint cadence: every `max(1, iterations / 10)` steps.
pub fn checkpoint_interval(iterations: usize) -> usize {
    (iterations / 10).max(1)
}

fn save_atomic<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, model.checkpoint_bytes()?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    let header = crate::net::header_path(path);
    write_json(&header, model.config())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub last: Option<StepStats>,
    pub steps: usize,
}

/// Trains on the dataset's train split. The initial weights are
/// checkpointed before the first step, so a numeric failure always leaves
/// the last good checkpoint on disk.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let scenes: Vec<SceneAnnotation> = load_split(dataset, Split::Train)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    if scenes.is_empty() {
        return Err(Error::Data(format!(
            "{}: train split is empty",
            dataset.display()
        )));
    }
    train_on_scenes(cfg, &scenes, out_dir)
}

/// Training loop shared by [`cmd_train`] and in-memory callers, run in the
/// scalar type selected by `optim.precision`.
pub fn train_on_scenes(
    cfg: &RunConfig,
    scenes: &[SceneAnnotation],
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(CONFIG))?;
    match cfg.optim.precision {
        Precision::F64 => train_typed::<f64>(cfg, scenes, out_dir),
        Precision::F32 => train_typed::<f32>(cfg, scenes, out_dir),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    scenes: &[SceneAnnotation],
    out_dir: &Path,
) -> Result<TrainSummary> {
    let ckpt = out_dir.join(CHECKPOINT);
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    save_atomic(&model, &ckpt)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log =
        std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let every = checkpoint_interval(cfg.optim.iterations);
    let total = cfg.optim.iterations;
    let mut last = None;
    let mut steps = 0;
    let result = fit(
        &mut model,
        scenes,
        &cfg.train_settings(),
        cfg.seed.wrapping_add(1),
        |s, m| {
            writeln!(log, "{s}").map_err(|e| Error::io(&log_path, e))?;
            last = Some(*s);
            steps += 1;
            if (s.iter + 1) % every == 0 || s.iter + 1 == total {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                save_atomic(m, &ckpt)?;
            }
            Ok(())
        },
    );
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        last,
        steps,
    })
}

/// Detections keyed by image.
pub type DetectionFile = BTreeMap<String, Vec<Detection>>;

/// One image to run detection on.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub key: String,
    pub path: PathBuf,
}

/// Expands inputs: a dataset directory contributes the images of `split`,
/// a file contributes itself keyed by its stem.
pub fn resolve_inputs(paths: &[PathBuf], split: Split) -> Result<Vec<ImageInput>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let manifest = Manifest::load(p)?;
            out.extend(manifest.split(split).map(|e| ImageInput {
                key: e.key.clone(),
                path: p.join(&e.image),
            }));
        } else {
            let key = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| {
                Error::Data(format!("{}: cannot derive an image key", p.display()))
            })?;
            out.push(ImageInput {
                key: key.to_string(),
                path: p.clone(),
            });
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for i in &out {
        if !seen.insert(&i.key) {
            return Err(Error::Data(format!("duplicate image key '{}'", i.key)));
        }
    }
    Ok(out)
}

/// An input with its decoded image and final detections.
pub type DetectedImage = (ImageInput, Tensor<f64>, Vec<Detection>);

/// Runs pyramid detection on every input with the configured precision.
pub fn detect_images(
    cfg: &RunConfig,
    model: &Model<f64>,
    inputs: &[ImageInput],
) -> Result<Vec<DetectedImage>> {
    if cfg.inference.use_refine && !model.config().has_landmarks() {
        return Err(Error::Config(
            "inference.use_refine: the model has no refine branch (model.n_landmarks is 0)".into(),
        ));
    }
    let fast = match cfg.inference.precision {
        Precision::F32 => Some(model.cast::<f32>()),
        Precision::F64 => None,
    };
    inputs
        .iter()
        .map(|input| {
            let image = read_ppm(&input.path)?;
            let dets = match &fast {
                Some(m) => detect(&image, m, &cfg.pyramid, cfg.inference.use_refine)?,
                None => detect(&image, model, &cfg.pyramid, cfg.inference.use_refine)?,
            };
            Ok((input.clone(), image, dets))
        })
        .collect()
}

/// Loads the checkpoint (its header must match `cfg.model`), detects on
/// every input and writes the detection JSON; overlays go to `overlay_dir`.
pub fn cmd_detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    inputs: &[ImageInput],
    out: &Path,
    overlay_dir: Option<&Path>,
) -> Result<DetectionFile> {
    cfg.validate()?;
    let model = Model::<f64>::load(checkpoint, &cfg.model)?;
    let results = detect_images(cfg, &model, inputs)?;
    let mut file = DetectionFile::new();
    if let Some(dir) = overlay_dir {
        create_dir(dir)?;
    }
    for (input, mut image, dets) in results {
        if let Some(dir) = overlay_dir {
            for d in &dets {
                draw_box(&mut image, &d.bbox, [1.0, 0.1, 0.1]);
            }
            write_ppm(&dir.join(format!("{}.ppm", input.key)), &image)?;
        }
        file.insert(input.key, dets);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &file)?;
    Ok(file)
}

/// Ground-truth boxes keyed by image: a dataset directory (one split) or a
/// JSON object mapping keys to annotation lists.
pub fn load_ground_truth(path: &Path, split: Split) -> Result<BTreeMap<String, Vec<BBox>>> {
    let boxes = |objs: Vec<ObjectAnnotation>| objs.into_iter().map(|o| o.bbox).collect();
    if path.is_dir() {
        let manifest = Manifest::load(path)?;
        manifest
            .split(split)
            .map(|e| {
                Ok((
                    e.key.clone(),
                    boxes(load_annotation(&path.join(&e.annotation))?),
                ))
            })
            .collect()
    } else {
        let map: BTreeMap<String, Vec<ObjectAnnotation>> = read_json(path)?;
        Ok(map.into_iter().map(|(k, v)| (k, boxes(v))).collect())
    }
}

/// Scores detections against ground truth; every key must appear on both sides.
pub fn evaluate_files(
    dets: &DetectionFile,
    gts: &BTreeMap<String, Vec<BBox>>,
    iou: f64,
) -> Result<EvalReport> {
    let missing_gt: Vec<&String> = dets.keys().filter(|k| !gts.contains_key(*k)).collect();
    let missing_det: Vec<&String> = gts.keys().filter(|k| !dets.contains_key(*k)).collect();
    if !missing_gt.is_empty() || !missing_det.is_empty() {
        let list = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(Error::Data(format!(
            "image keys do not match; without annotations: [{}]; without detections: [{}]",
            list(&missing_gt),
            list(&missing_det)
        )));
    }
    let per_image: Vec<(Vec<Detection>, Vec<BBox>)> = gts
        .iter()
        .map(|(k, g)| (dets[k].clone(), g.clone()))
        .collect();
    evaluate(&per_image, iou)
}

/// Writes the report JSON to `out` and, if asked, the PR curve as a PPM.
pub fn cmd_eval(
    detections: &Path,
    annotations: &Path,
    split: Split,
    iou: f64,
    out: &Path,
    pr_image: Option<&Path>,
) -> Result<EvalReport> {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(Error::Config(format!("iou must lie in (0, 1], got {iou}")));
    }
    let dets: DetectionFile = read_json(detections)?;
    let gts = load_ground_truth(annotations, split)?;
    let report = evaluate_files(&dets, &gts, iou)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    if let Some(p) = pr_image {
        write_ppm(p, &render_pr_curve(&report, 200))?;
    }
    Ok(report)
}
