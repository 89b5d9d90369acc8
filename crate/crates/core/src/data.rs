//! Task registry, dataset manifests, preprocessing and train/validation splits.
//!
//! A manifest is a JSON document listing tasks, each with its own sample
//! records. Paths inside the manifest are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BoundingBox;
use crate::trainer::Paradigm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Seg,
    Cls,
    Reg,
    Det,
}

impl TaskType {
    /// Metric used for checkpoint selection.
    pub fn primary_metric(self) -> &'static str {
        match self {
            TaskType::Seg => "DSC",
            TaskType::Cls => "AUC",
            TaskType::Reg => "MRE",
            TaskType::Det => "IoU",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Seg => "seg",
            TaskType::Cls => "cls",
            TaskType::Reg => "reg",
            TaskType::Det => "det",
        }
    }
}

/// Label as written in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelRecord {
    /// Single-channel PNG of class ids.
    Mask(PathBuf),
    Class(usize),
    /// Measurement in original-resolution pixels.
    Value(f64),
    /// `[cx, cy, bw, bh]`, image-normalized.
    Box([f64; 4]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub label: LabelRecord,
    /// Overrides the task's `original_resolution` for this sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_resolution: Option<[usize; 2]>,
}

fn default_weight() -> f64 {
    1.0
}

fn all_paradigms() -> Vec<Paradigm> {
    vec![Paradigm::Ts, Paradigm::Cg, Paradigm::Au]
}

fn is_all_paradigms(p: &[Paradigm]) -> bool {
    p == all_paradigms().as_slice()
}

fn is_unit_weight(w: &f64) -> bool {
    *w == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(rename = "type")]
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// `[H, W]` of the original images.
    pub original_resolution: [usize; 2],
    #[serde(default = "default_weight", skip_serializing_if = "is_unit_weight")]
    pub loss_weight: f64,
    /// Paradigms this task takes part in.
    #[serde(default = "all_paradigms", skip_serializing_if = "is_all_paradigms")]
    pub paradigms: Vec<Paradigm>,
    pub train: Vec<SampleRecord>,
    #[serde(default)]
    pub test: Vec<SampleRecord>,
}

impl TaskSpec {
    /// Class count of a classification or segmentation task (segmentation
    /// defaults to background + one structure).
    pub fn classes(&self) -> usize {
        match self.task_type {
            TaskType::Seg => self.num_classes.unwrap_or(2),
            TaskType::Cls => self.num_classes.unwrap_or(0),
            TaskType::Reg | TaskType::Det => 0,
        }
    }

    pub fn in_paradigm(&self, p: Paradigm) -> bool {
        self.paradigms.contains(&p)
    }
}

/// Parsed manifest: the task registry plus the directory its paths resolve against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tasks: Vec<TaskSpec>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: source.to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        manifest.validate(source)?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Checks registry invariants, reporting the offending field path.
    pub fn validate(&self, source: &str) -> Result<()> {
        let fail = |field: String, message: String| {
            Err(Error::Schema {
                path: source.to_string(),
                field,
                message,
            })
        };
        if self.tasks.is_empty() {
            return fail("tasks".into(), "task list is empty".into());
        }
        let mut ids = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let at = format!("tasks[{i}]");
            if t.task_id.is_empty() {
                return fail(format!("{at}.task_id"), "empty task id".into());
            }
            if !ids.insert(t.task_id.as_str()) {
                return fail(format!("{at}.task_id"), format!("duplicate task id `{}`", t.task_id));
            }
            if t.group.as_deref() == Some("") {
                return fail(format!("{at}.group"), "empty group name".into());
            }
            if t.original_resolution.contains(&0) {
                return fail(format!("{at}.original_resolution"), "zero dimension".into());
            }
            if !(t.loss_weight >= 0.0) || !t.loss_weight.is_finite() {
                return fail(format!("{at}.loss_weight"), format!("{} is not a nonnegative weight", t.loss_weight));
            }
            match (t.task_type, t.num_classes) {
                (TaskType::Cls, None) => return fail(format!("{at}.num_classes"), "required for cls tasks".into()),
                (TaskType::Cls, Some(n)) if n < 2 => {
                    return fail(format!("{at}.num_classes"), format!("cls tasks need >= 2 classes, got {n}"))
                }
                (TaskType::Seg, Some(n)) if n < 2 => {
                    return fail(format!("{at}.num_classes"), format!("seg tasks need >= 2 classes, got {n}"))
                }
                _ => {}
            }
            for (split, records) in [("train", &t.train), ("test", &t.test)] {
                for (j, r) in records.iter().enumerate() {
                    if let Err(message) = check_label(t, &r.label) {
                        return fail(format!("{at}.{split}[{j}].label"), message);
                    }
                    if r.original_resolution.is_some_and(|o| o.contains(&0)) {
                        return fail(format!("{at}.{split}[{j}].original_resolution"), "zero dimension".into());
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_label(task: &TaskSpec, label: &LabelRecord) -> std::result::Result<(), String> {
    match (task.task_type, label) {
        (TaskType::Seg, LabelRecord::Mask(_)) => Ok(()),
        (TaskType::Cls, LabelRecord::Class(c)) => {
            if *c < task.classes() {
                Ok(())
            } else {
                Err(format!("class {c} out of range for {} classes", task.classes()))
            }
        }
        (TaskType::Reg, LabelRecord::Value(v)) => {
            if v.is_finite() {
                Ok(())
            } else {
                Err("non-finite regression value".into())
            }
        }
        (TaskType::Det, LabelRecord::Box([cx, cy, bw, bh])) => {
            let b = BoundingBox::new(*cx, *cy, *bw, *bh);
            if b.is_valid() && *bw > 0.0 && *bh > 0.0 {
                Ok(())
            } else {
                Err(format!("invalid box {:?}", [cx, cy, bw, bh]))
            }
        }
        (ty, _) => Err(format!("label variant does not match task type `{}`", ty.as_str())),
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = Manifest::from_json(&text, &path.display().to_string())?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            size: 224,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// RGB conversion (grayscale replicated), bilinear resize to `size x size`,
/// per-channel normalization. Returns a `3 x size x size` CHW buffer.
pub fn preprocess(raw: &DynamicImage, cfg: &PreprocessConfig) -> Result<Vec<f32>> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::InvalidSample("empty image".into()));
    }
    let rgb = raw.to_rgb8();
    let s = cfg.size as u32;
    let rgb = if rgb.width() == s && rgb.height() == s {
        rgb
    } else {
        imageops::resize(&rgb, s, s, FilterType::Triangle)
    };
    let n = cfg.size * cfg.size;
    let mut out = vec![0f32; 3 * n];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = (px[c] as f32 / 255.0 - cfg.mean[c]) / cfg.std[c];
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize of a class-id mask.
pub fn preprocess_mask(mask: &GrayImage, size: usize) -> Vec<u8> {
    let s = size as u32;
    if mask.width() == s && mask.height() == s {
        return mask.as_raw().clone();
    }
    imageops::resize(mask, s, s, FilterType::Nearest).into_raw()
}

/// Ratio between original and resized width, used to map regression
/// predictions back to original pixels.
pub fn regression_scale(original_width: usize, size: usize) -> f64 {
    original_width as f64 / size as f64
}

/// Label of a preprocessed sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Mask(Vec<u8>),
    Class(usize),
    Value {
        /// Training target in resized-input pixels.
        target: f64,
        /// Ground truth in original pixels.
        original: f64,
        /// original / resized.
        scale: f64,
    },
    Box(BoundingBox),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `3 x S x S`, normalized.
    pub image: Vec<f32>,
    pub label: Label,
}

/// Loads and preprocesses `records`, skipping unreadable samples with a warning.
pub fn load_samples(
    manifest: &Manifest,
    task: &TaskSpec,
    records: &[SampleRecord],
    cfg: &PreprocessConfig,
) -> Vec<LabeledSample> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match load_sample(manifest, task, r, cfg) {
            Ok(s) => out.push(s),
            Err(e) => log::warn!("skipping {} in task `{}`: {e}", r.image.display(), task.task_id),
        }
    }
    out
}

fn load_sample(manifest: &Manifest, task: &TaskSpec, r: &SampleRecord, cfg: &PreprocessConfig) -> Result<LabeledSample> {
    let raw = image::open(manifest.resolve(&r.image))?;
    let image = preprocess(&raw, cfg)?;
    let original = r.original_resolution.unwrap_or(task.original_resolution);
    let label = match &r.label {
        LabelRecord::Mask(p) => {
            let m = image::open(manifest.resolve(p))?.to_luma8();
            let ids = preprocess_mask(&m, cfg.size);
            let classes = task.classes();
            if let Some(bad) = ids.iter().find(|&&v| v as usize >= classes) {
                return Err(Error::InvalidSample(format!("mask id {bad} >= {classes} classes")));
            }
            Label::Mask(ids)
        }
        LabelRecord::Class(c) => Label::Class(*c),
        LabelRecord::Value(v) => {
            let scale = regression_scale(original[1], cfg.size);
            Label::Value {
                target: v / scale,
                original: *v,
                scale,
            }
        }
        LabelRecord::Box([cx, cy, bw, bh]) => Label::Box(BoundingBox::new(*cx, *cy, *bw, *bh)),
    };
    Ok(LabeledSample { image, label })
}

/// Train/validation/test samples of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Loads every task in `task_ids`, splitting each task's training records
/// into train/validation with `val_fraction`.
pub fn load_tasks(
    manifest: &Manifest,
    task_ids: &[String],
    cfg: &PreprocessConfig,
    val_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, TaskData>> {
    let mut out = BTreeMap::new();
    for id in task_ids {
        let spec = manifest.task(id)?;
        let samples = load_samples(manifest, spec, &spec.train, cfg);
        let (train_idx, val_idx) = split_train_val(samples.len(), val_fraction, mix_seed(seed, id))?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        out.insert(
            id.clone(),
            TaskData {
                spec: spec.clone(),
                train: pick(&train_idx),
                val: pick(&val_idx),
                test: load_samples(manifest, spec, &spec.test, cfg),
            },
        );
    }
    Ok(out)
}

/// Seeded shuffle of `0..n`; the first `max(1, floor(n * fraction))` indices
/// form the validation set. Both halves are returned in ascending order.
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidSample(format!("cannot split {n} samples")));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let n_val = ((n as f64 * fraction).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Derives a stream seed from a base seed and a tag (FNV-1a over the tag).
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(tag.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_probability: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
    /// Maximum brightness offset in normalized units.
    pub brightness: f64,
}

/// Horizontal flip plus brightness/contrast jitter, label-consistent.
pub fn augment(sample: &LabeledSample, size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> LabeledSample {
    if !cfg.enabled {
        return sample.clone();
    }
    let mut out = sample.clone();
    if rng.random::<f64>() < cfg.flip_probability {
        for plane in out.image.chunks_mut(size * size) {
            for row in plane.chunks_mut(size) {
                row.reverse();
            }
        }
        match &mut out.label {
            Label::Mask(ids) => ids.chunks_mut(size).for_each(<[u8]>::reverse),
            Label::Box(b) => b.cx = 1.0 - b.cx,
            Label::Class(_) | Label::Value { .. } => {}
        }
    }
    let c = 1.0 + cfg.contrast * (2.0 * rng.random::<f64>() - 1.0);
    let b = cfg.brightness * (2.0 * rng.random::<f64>() - 1.0);
    for v in &mut out.image {
        *v = (*v as f64 * c + b) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_json(tasks: &str) -> String {
        format!(r#"{{"tasks": [{tasks}]}}"#)
    }

    const CLS: &str = r#"{"task_id": "a", "type": "cls", "group": "OB", "num_classes": 2,
        "original_resolution": [64, 64], "train": [{"image": "x.png", "label": {"class": 1}}]}"#;

    #[test]
    fn parses_and_round_trips() {
        let m = Manifest::from_json(&manifest_json(CLS), "m.json").unwrap();
        assert_eq!(m.tasks.len(), 1);
        assert_eq!(m.tasks[0].paradigms, all_paradigms());
        let back = Manifest::from_json(&m.to_json().unwrap(), "m.json").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn duplicate_ids_named() {
        let err = Manifest::from_json(&manifest_json(&format!("{CLS},{CLS}")), "m.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate task id `a`"), "{msg}");
        assert!(msg.contains("tasks[1].task_id"), "{msg}");
    }

    #[test]
    fn empty_and_unknown_type_rejected() {
        assert!(Manifest::from_json(&manifest_json(""), "m.json").is_err());
        let bad = CLS.replace("\"cls\"", "\"depth\"");
        let err = Manifest::from_json(&manifest_json(&bad), "m.json").unwrap_err();
        assert!(err.to_string().contains("tasks[0].type"), "{err}");
    }

    #[test]
    fn label_mismatch_rejected() {
        let bad = CLS.replace(r#"{"class": 1}"#, r#"{"value": 3.0}"#);
        let err = Manifest::from_json(&manifest_json(&bad), "m.json").unwrap_err();
        assert!(err.to_string().contains("tasks[0].train[0].label"), "{err}");
        let bad = CLS.replace(r#"{"class": 1}"#, r#"{"class": 2}"#);
        assert!(Manifest::from_json(&manifest_json(&bad), "m.json").is_err());
    }

    #[test]
    fn gray_input_replicated_to_rgb() {
        let gray = GrayImage::from_fn(400, 300, |x, y| image::Luma([((x + y) % 256) as u8]));
        let cfg = PreprocessConfig {
            size: 224,
            mean: [0.5; 3],
            std: [0.25; 3],
        };
        let out = preprocess(&DynamicImage::ImageLuma8(gray), &cfg).unwrap();
        let n = 224 * 224;
        assert_eq!(out.len(), 3 * n);
        assert_eq!(&out[..n], &out[n..2 * n]);
        assert_eq!(&out[..n], &out[2 * n..]);
    }

    #[test]
    fn nearest_mask_keeps_label_set() {
        let m = GrayImage::from_fn(300, 300, |x, y| image::Luma([if x < 100 { 0 } else if y < 150 { 1 } else { 2 }]));
        let ids = preprocess_mask(&m, 224);
        let set: BTreeSet<u8> = ids.iter().copied().collect();
        assert_eq!(set, [0, 1, 2].into_iter().collect());
    }

    #[test]
    fn preprocessing_sized_rgb_is_normalization_only() {
        let rgb = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 7, y as u8 * 5, 9]));
        let cfg = PreprocessConfig {
            size: 32,
            ..Default::default()
        };
        let out = preprocess(&DynamicImage::ImageRgb8(rgb.clone()), &cfg).unwrap();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                let want = (px[c] as f32 / 255.0 - cfg.mean[c]) / cfg.std[c];
                assert_eq!(out[c * 1024 + i], want);
            }
        }
    }

    #[test]
    fn scale_ratio() {
        assert_eq!(regression_scale(448, 224), 2.0);
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split_train_val(100, 0.2, 1).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
        let (t, v) = split_train_val(7, 0.2, 1).unwrap();
        assert_eq!((t.len(), v.len()), (6, 1));
        assert_eq!(split_train_val(7, 0.2, 1).unwrap(), split_train_val(7, 0.2, 1).unwrap());
        assert!(split_train_val(1, 0.2, 1).is_err());
    }

    #[test]
    fn flip_mirrors_labels() {
        let s = LabeledSample {
            image: (0..12).map(|v| v as f32).collect(),
            label: Label::Box(BoundingBox::new(0.25, 0.5, 0.1, 0.1)),
        };
        let cfg = AugmentConfig {
            enabled: true,
            flip_probability: 1.0,
            contrast: 0.0,
            brightness: 0.0,
        };
        let out = augment(&s, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&out.image[..4], &[1.0, 0.0, 3.0, 2.0]);
        assert_eq!(out.label, Label::Box(BoundingBox::new(0.75, 0.5, 0.1, 0.1)));
        let off = augment(&s, 2, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(off, s);
    }
}
