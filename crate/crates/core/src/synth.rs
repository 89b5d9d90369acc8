//! Synthetic multi-task ultrasound-like datasets with exact labels.
//!
//! Each image shows one bright shape on a speckled background. Labels are
//! derived from the shape parameters, so a perfect predictor scores exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, LabelRecord, Manifest, SampleRecord, TaskSpec, TaskType};
use crate::error::{Error, Result};
use crate::trainer::Paradigm;

const BACKGROUND: f64 = 0.15;
const FOREGROUND: f64 = 0.75;
/// Gamma shape of the multiplicative speckle (mean 1, variance 1/k).
const SPECKLE_SHAPE: f64 = 8.0;

fn default_size() -> usize {
    64
}

fn default_one() -> usize {
    1
}

fn default_paradigms() -> Vec<Paradigm> {
    vec![Paradigm::Ts, Paradigm::Cg, Paradigm::Au]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPlan {
    /// Default rendered `H = W` for tasks without `original_resolution`.
    #[serde(default = "default_size")]
    pub image_size: usize,
    pub tasks: Vec<SynthTask>,
}

/// One row of the plan; `num_tasks > 1` expands into that many tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(rename = "type")]
    pub task_type: TaskType,
    pub group: String,
    #[serde(default = "default_one")]
    pub num_tasks: usize,
    pub num_train: usize,
    #[serde(default)]
    pub num_test: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_resolution: Option<[usize; 2]>,
    #[serde(default = "default_paradigms")]
    pub paradigms: Vec<Paradigm>,
}

impl SynthPlan {
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: source.to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Seven OB tasks (3 reg, 2 cls, 2 seg), three Lung tasks (2 cls, 1 seg) and
/// three Breast tasks (1 cls, 2 seg). One Lung and one Breast task are grouped
/// but have no single-task baseline, leaving eleven single-task rows.
pub fn grouped_plan(num_train: usize, num_test: usize, image_size: usize) -> SynthPlan {
    let row = |ty, group: &str, n, paradigms: Vec<Paradigm>| SynthTask {
        task_id: None,
        task_type: ty,
        group: group.to_string(),
        num_tasks: n,
        num_train,
        num_test,
        num_classes: None,
        original_resolution: None,
        paradigms,
    };
    let all = default_paradigms;
    let grouped = || vec![Paradigm::Cg, Paradigm::Au];
    SynthPlan {
        image_size,
        tasks: vec![
            row(TaskType::Reg, "OB", 3, all()),
            row(TaskType::Cls, "OB", 2, all()),
            row(TaskType::Seg, "OB", 2, all()),
            row(TaskType::Cls, "Lung", 1, all()),
            row(TaskType::Cls, "Lung", 1, grouped()),
            row(TaskType::Seg, "Lung", 1, all()),
            row(TaskType::Cls, "Breast", 1, all()),
            row(TaskType::Seg, "Breast", 1, all()),
            row(TaskType::Seg, "Breast", 1, grouped()),
        ],
    }
}

/// One task per type, split over two groups.
pub fn four_task_plan(num_train: usize, num_test: usize, image_size: usize) -> SynthPlan {
    let row = |ty, group: &str| SynthTask {
        task_id: None,
        task_type: ty,
        group: group.to_string(),
        num_tasks: 1,
        num_train,
        num_test,
        num_classes: None,
        original_resolution: None,
        paradigms: default_paradigms(),
    };
    SynthPlan {
        image_size,
        tasks: vec![
            row(TaskType::Seg, "OB"),
            row(TaskType::Reg, "OB"),
            row(TaskType::Cls, "Lung"),
            row(TaskType::Det, "Lung"),
        ],
    }
}

/// Shape parameters in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Half extents along x and y.
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Diamond,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Diamond];
}

impl Shape {
    /// Whether the pixel with center `(x + 0.5, y + 0.5)` lies inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let u = (x as f64 + 0.5 - self.cx) / self.a;
        let v = (y as f64 + 0.5 - self.cy) / self.b;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }

    pub fn major_axis(&self) -> f64 {
        2.0 * self.a.max(self.b)
    }

    /// `[cx, cy, bw, bh]` normalized by the image size.
    pub fn normalized_box(&self, height: usize, width: usize) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [self.cx / w, self.cy / h, 2.0 * self.a / w, 2.0 * self.b / h]
    }
}

fn random_shape(kind: ShapeKind, height: usize, width: usize, rng: &mut impl Rng) -> Shape {
    let (w, h) = (width as f64, height as f64);
    Shape {
        kind,
        cx: w * rng.random_range(0.35..0.65),
        cy: h * rng.random_range(0.35..0.65),
        a: w * rng.random_range(0.12..0.28),
        b: h * rng.random_range(0.12..0.28),
    }
}

/// Renders `shape` over multiplicative gamma speckle.
pub fn render(shape: &Shape, height: usize, width: usize, rng: &mut impl Rng) -> GrayImage {
    let speckle = Gamma::new(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE).expect("valid gamma");
    let mut img = GrayImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let base = if shape.contains(x, y) { FOREGROUND } else { BACKGROUND };
            let v = (base * speckle.sample(rng)).clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, Luma([(v * 255.0).round() as u8]));
        }
    }
    img
}

pub fn shape_mask(shape: &Shape, height: usize, width: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([shape.contains(x as usize, y as usize) as u8])
    })
}

/// Generated dataset: a manifest whose paths are relative to the eventual
/// output directory, plus the image files to write there.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: Manifest,
    pub files: BTreeMap<PathBuf, GrayImage>,
}

impl SynthDataset {
    /// Writes images and `manifest.json` to `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (rel, img) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save(&path)?;
        }
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

fn expand_ids(plan: &SynthPlan) -> Result<Vec<(String, &SynthTask)>> {
    let mut counters: BTreeMap<(String, TaskType), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, row) in plan.tasks.iter().enumerate() {
        if row.num_tasks == 0 || row.num_train == 0 {
            return Err(Error::Config(format!("tasks[{i}]: zero task or sample count")));
        }
        if row.task_id.is_some() && row.num_tasks > 1 {
            return Err(Error::Config(format!("tasks[{i}]: explicit task_id with num_tasks > 1")));
        }
        for _ in 0..row.num_tasks {
            let id = match &row.task_id {
                Some(id) => id.clone(),
                None => {
                    let k = counters.entry((row.group.clone(), row.task_type)).or_default();
                    *k += 1;
                    format!("{}_{}_{}", row.group.to_lowercase(), row.task_type.as_str(), *k - 1)
                }
            };
            out.push((id, row));
        }
    }
    Ok(out)
}

pub fn synth_generate(plan: &SynthPlan, seed: u64) -> Result<SynthDataset> {
    if plan.image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    let mut tasks = Vec::new();
    let mut files = BTreeMap::new();
    for (task_id, row) in expand_ids(plan)? {
        let [height, width] = row.original_resolution.unwrap_or([plan.image_size; 2]);
        let num_classes = match row.task_type {
            TaskType::Cls => {
                let c = row.num_classes.unwrap_or(2);
                if !(2..=ShapeKind::ALL.len()).contains(&c) {
                    return Err(Error::Config(format!("{task_id}: synthetic cls supports 2..=3 classes")));
                }
                Some(c)
            }
            TaskType::Seg => {
                if row.num_classes.is_some_and(|c| c != 2) {
                    return Err(Error::Config(format!("{task_id}: synthetic seg supports 2 classes")));
                }
                Some(2)
            }
            _ => None,
        };
        let mut splits = Vec::new();
        for (split, n) in [("train", row.num_train), ("test", row.num_test)] {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("{task_id}/{split}")));
            let mut records = Vec::with_capacity(n);
            for i in 0..n {
                let kind = match row.task_type {
                    TaskType::Cls => ShapeKind::ALL[i % num_classes.unwrap()],
                    _ => ShapeKind::Ellipse,
                };
                let shape = random_shape(kind, height, width, &mut rng);
                let stem = PathBuf::from(&task_id).join(split);
                let image = stem.join(format!("{i:04}.png"));
                files.insert(image.clone(), render(&shape, height, width, &mut rng));
                let label = match row.task_type {
                    TaskType::Seg => {
                        let mask = stem.join(format!("{i:04}_mask.png"));
                        files.insert(mask.clone(), shape_mask(&shape, height, width));
                        LabelRecord::Mask(mask)
                    }
                    TaskType::Cls => LabelRecord::Class(i % num_classes.unwrap()),
                    TaskType::Reg => LabelRecord::Value(shape.major_axis()),
                    TaskType::Det => LabelRecord::Box(shape.normalized_box(height, width)),
                };
                records.push(SampleRecord {
                    image,
                    label,
                    original_resolution: None,
                });
            }
            splits.push(records);
        }
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        tasks.push(TaskSpec {
            task_id,
            task_type: row.task_type,
            group: Some(row.group.clone()),
            num_classes,
            original_resolution: [height, width],
            loss_weight: 1.0,
            paradigms: row.paradigms.clone(),
            train,
            test,
        });
    }
    let manifest = Manifest {
        tasks,
        root: PathBuf::new(),
    };
    manifest.validate("synthetic plan")?;
    Ok(SynthDataset { manifest, files })
}
