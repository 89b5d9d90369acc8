//! Paradigm plans, the multi-task model, optimization and validation-based
//! checkpoint selection.

pub mod checkpoint;
pub mod plan;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Encoder, EncoderConfig};
use crate::data::{augment, mix_seed, AugmentConfig, Label, LabeledSample, PreprocessConfig, TaskData, TaskSpec, TaskType};
use crate::error::{Error, Result};
use crate::heads::{detect_decode, detect_encode, BoundingBox, DetectionHead, PooledHead, SegmentationHead, SegmentationHeadConfig};
use crate::metrics::{self, HausdorffMode, Mask, MetricReport};
use crate::nn::{self, ParamStore};
use crate::objectives::{self, LossWeights};

pub use checkpoint::Checkpoint;
pub use plan::{build_plan, sample_batches, Batch, Paradigm, ParadigmPlan, TrainingUnit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub segmentation: SegmentationHeadConfig,
    /// Per-channel normalization constants.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            encoder: EncoderConfig::default(),
            segmentation: SegmentationHeadConfig::default(),
            mean: p.mean,
            std: p.std,
        }
    }
}

impl ModelConfig {
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            size: self.encoder.image_size,
            mean: self.mean,
            std: self.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate of parameters outside the named components.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub backbone_lr: f64,
    /// Segmentation decoder.
    pub decoder_lr: f64,
    /// Experts, gates and task embeddings.
    pub moe_lr: f64,
    /// Classification, regression and detection heads.
    pub head_lr: f64,
    /// Backbone rates tried when `lr_search` is set; other rates scale along.
    pub lr_grid: Vec<f64>,
    pub lr_search: bool,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            base_lr: 1e-5,
            weight_decay: 1e-4,
            backbone_lr: 2e-5,
            decoder_lr: 1e-5,
            moe_lr: 2e-4,
            head_lr: 1e-3,
            lr_grid: vec![1e-5, 2e-5, 5e-5],
            lr_search: false,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_lr", self.base_lr),
            ("backbone_lr", self.backbone_lr),
            ("decoder_lr", self.decoder_lr),
            ("moe_lr", self.moe_lr),
            ("head_lr", self.head_lr),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.lr_grid.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("lr_grid entries must be positive".into()));
        }
        if !self.lr_grid.contains(&self.backbone_lr) {
            return Err(Error::Config(format!(
                "lr_grid {:?} does not contain backbone_lr {}",
                self.lr_grid, self.backbone_lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Copy with the backbone rate set to `lr` and every other rate scaled by
    /// the same factor.
    pub fn with_backbone_lr(&self, lr: f64) -> Self {
        let k = lr / self.backbone_lr;
        Self {
            base_lr: self.base_lr * k,
            backbone_lr: lr,
            decoder_lr: self.decoder_lr * k,
            moe_lr: self.moe_lr * k,
            head_lr: self.head_lr * k,
            ..self.clone()
        }
    }
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_paradigm")]
    pub paradigm: Paradigm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Checkpoint directory or `weights.bin` to initialize matching parameters from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

fn default_paradigm() -> Paradigm {
    Paradigm::Au
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>, paradigm: Paradigm) -> Self {
        Self {
            manifest: manifest.into(),
            paradigm,
            seed: 0,
            out: default_out(),
            deterministic: false,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            val_fraction: default_val_fraction(),
            augment: AugmentConfig::default(),
            pretrained: None,
        }
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.out = base.join(&cfg.out);
        cfg.pretrained = cfg.pretrained.map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.segmentation.validate(self.model.encoder.depth)?;
        self.optimizer.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// SHA-256 over everything that influences the trained weights.
    pub fn config_hash(&self) -> String {
        let v = serde_json::json!({
            "model": self.model,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "augment": self.augment,
        });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Restricts the compute backend to one thread so reductions run in a fixed order.
pub fn enable_deterministic_compute() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
}

#[derive(Debug, Clone)]
pub enum TaskHead {
    Seg(SegmentationHead),
    Cls(PooledHead),
    Reg(PooledHead),
    Det(DetectionHead),
}

/// Shared encoder plus one head per task. Parameters are named `encoder.*`,
/// `moe.*`, `task_embed.{task}` and `head.{task}.*`.
pub struct MultiTaskModel {
    store: ParamStore,
    encoder: Encoder,
    heads: BTreeMap<String, TaskHead>,
    tasks: BTreeMap<String, TaskSpec>,
    config: ModelConfig,
}

impl MultiTaskModel {
    pub fn new(config: &ModelConfig, tasks: &[TaskSpec], moe_enabled: bool, seed: u64) -> Result<Self> {
        let mut encoder_cfg = config.encoder.clone();
        encoder_cfg.moe_enabled &= moe_enabled;
        let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
        let mut store = ParamStore::new(seed, DType::F32);
        let encoder = Encoder::new(&mut store, &encoder_cfg, &ids)?;
        let d = encoder_cfg.embed_dim;
        let mut heads = BTreeMap::new();
        for t in tasks {
            let name = format!("head.{}", t.task_id);
            let head = match t.task_type {
                TaskType::Seg => TaskHead::Seg(SegmentationHead::new(
                    &mut store,
                    &name,
                    &config.segmentation,
                    d,
                    encoder_cfg.depth,
                    t.classes(),
                )?),
                TaskType::Cls => TaskHead::Cls(PooledHead::classifier(&mut store, &name, d, t.classes())?),
                TaskType::Reg => TaskHead::Reg(PooledHead::regressor(&mut store, &name, d, encoder_cfg.image_size as f64)?),
                TaskType::Det => TaskHead::Det(DetectionHead::new(&mut store, &name, d)?),
            };
            heads.insert(t.task_id.clone(), head);
        }
        let config = ModelConfig {
            encoder: encoder_cfg,
            ..config.clone()
        };
        Ok(Self {
            store,
            encoder,
            heads,
            tasks: tasks.iter().map(|t| (t.task_id.clone(), t.clone())).collect(),
            config,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn moe_block_count(&self) -> usize {
        self.encoder.moe_blocks().count()
    }

    /// Scalar count of gates, experts and task embeddings.
    pub fn moe_parameter_count(&self) -> usize {
        self.store.count(|n| n.starts_with("moe.") || n.starts_with("task_embed."))
    }

    /// Raw head output for a `(B, 3, S, S)` batch.
    pub fn forward(&self, task_id: &str, images: &Tensor) -> Result<Tensor> {
        let head = self.heads.get(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        match head {
            TaskHead::Seg(h) => {
                let out = self.encoder.encode_with_taps(images, Some(task_id), &h.config().tap_layers)?;
                let s = self.config.encoder.image_size;
                h.forward(&h.select_taps(&out)?, (s, s))
            }
            TaskHead::Cls(h) | TaskHead::Reg(h) => h.forward(&self.encoder.encode(images, Some(task_id))?.feature_maps),
            TaskHead::Det(h) => h.forward(&self.encoder.encode(images, Some(task_id))?.feature_maps),
        }
    }

    pub fn images(&self, samples: &[&LabeledSample]) -> Result<Tensor> {
        let s = self.config.encoder.image_size;
        let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
        for x in samples {
            if x.image.len() != 3 * s * s {
                return Err(Error::Shape(format!("sample has {} values, expected 3x{s}x{s}", x.image.len())));
            }
            data.extend_from_slice(&x.image);
        }
        Ok(Tensor::from_vec(data, (samples.len(), 3, s, s), self.store.device())?.to_dtype(self.store.dtype())?)
    }

    /// Unweighted task loss on a batch.
    pub fn loss(&self, task_id: &str, samples: &[&LabeledSample]) -> Result<Tensor> {
        let spec = self.task(task_id)?;
        let out = self.forward(task_id, &self.images(samples)?)?;
        let dtype = self.store.dtype();
        let dev = self.store.device();
        let s = self.config.encoder.image_size;
        let mismatch = || Error::InvalidSample(format!("label does not match task `{task_id}`"));
        match spec.task_type {
            TaskType::Seg => {
                let mut ids = Vec::with_capacity(samples.len() * s * s);
                for x in samples {
                    match &x.label {
                        Label::Mask(m) => ids.extend_from_slice(m),
                        _ => return Err(mismatch()),
                    }
                }
                let target = objectives::one_hot(&ids, samples.len(), spec.classes(), s, s, dtype)?;
                objectives::dice_loss_from_logits(&out, &target)
            }
            TaskType::Cls => {
                let classes = samples
                    .iter()
                    .map(|x| match x.label {
                        Label::Class(c) => Ok(c),
                        _ => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                objectives::cross_entropy_loss(&out, &classes)
            }
            TaskType::Reg => {
                let targets = samples
                    .iter()
                    .map(|x| match x.label {
                        Label::Value { target, .. } => Ok(target as f32),
                        _ => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let t = Tensor::from_vec(targets, (samples.len(), 1), dev)?.to_dtype(dtype)?;
                objectives::l1_loss(&out, &t)
            }
            TaskType::Det => {
                let g = self.config.encoder.grid();
                let targets = samples
                    .iter()
                    .map(|x| match &x.label {
                        Label::Box(b) => detect_encode(b, g, g),
                        _ => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                objectives::detection_loss(&out, &targets)
            }
        }
    }

    /// Host-side predictions for `samples`, evaluated in chunks of `batch`.
    pub fn predict(&self, task_id: &str, samples: &[LabeledSample], batch: usize) -> Result<Vec<Prediction>> {
        let spec = self.task(task_id)?;
        let s = self.config.encoder.image_size;
        let mut preds = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            let refs: Vec<&LabeledSample> = chunk.iter().collect();
            let out = self.forward(task_id, &self.images(&refs)?)?.to_dtype(DType::F64)?;
            match spec.task_type {
                TaskType::Seg => {
                    let c = spec.classes();
                    let ids = out.argmax(1)?.flatten_from(1)?.to_vec2::<u32>()?;
                    preds.extend(ids.into_iter().map(|m| Prediction::Mask(m.into_iter().map(|v| v as u8).collect())));
                    debug_assert!(c > 0 && s > 0);
                }
                TaskType::Cls => {
                    let probs = nn::softmax_last(&out)?.to_vec2::<f64>()?;
                    preds.extend(probs.into_iter().map(Prediction::Scores));
                }
                TaskType::Reg => {
                    let v = out.flatten_all()?.to_vec1::<f64>()?;
                    preds.extend(v.into_iter().map(Prediction::Value));
                }
                TaskType::Det => {
                    let grids = DetectionHead::to_grids(&out)?;
                    preds.extend(grids.iter().map(|g| Prediction::Box(detect_decode(g))));
                }
            }
        }
        Ok(preds)
    }
}

/// Model output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Mask(Vec<u8>),
    /// Class probabilities.
    Scores(Vec<f64>),
    /// Resized-pixel measurement.
    Value(f64),
    Box(BoundingBox),
}

/// Metrics of one task, either the primary metric only or the full set.
pub fn score_predictions(
    report: &mut MetricReport,
    spec: &TaskSpec,
    size: usize,
    samples: &[LabeledSample],
    preds: &[Prediction],
    full: bool,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidSample(format!("task `{}` has no samples to evaluate", spec.task_id)));
    }
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let id = spec.task_id.as_str();
    let n = samples.len();
    let bad = || Error::InvalidSample(format!("prediction does not match task `{id}`"));
    match spec.task_type {
        TaskType::Seg => {
            let (mut dsc_sum, mut hd_sum, mut terms) = (0.0, 0.0, 0usize);
            let mut empty_convention = false;
            for (x, p) in samples.iter().zip(preds) {
                let (Label::Mask(gt), Prediction::Mask(pm)) = (&x.label, p) else { return Err(bad()) };
                for c in 1..spec.classes() as u8 {
                    let a = Mask::from_ids(size, size, pm, c)?;
                    let b = Mask::from_ids(size, size, gt, c)?;
                    dsc_sum += metrics::dsc(&a, &b)?;
                    if full {
                        let hd = metrics::hausdorff_with(&a, &b, HausdorffMode::Max)?;
                        hd_sum += hd.distance;
                        empty_convention |= hd.empty_convention;
                    }
                    terms += 1;
                }
            }
            report.push(id, "DSC", dsc_sum / terms as f64, n, None);
            if full {
                let flag = empty_convention.then(|| "empty_mask_diagonal".to_string());
                report.push(id, "HD", hd_sum / terms as f64, n, flag);
            }
        }
        TaskType::Cls => {
            let mut scores = Vec::with_capacity(n);
            let mut gt = Vec::with_capacity(n);
            for (x, p) in samples.iter().zip(preds) {
                let (Label::Class(c), Prediction::Scores(s)) = (&x.label, p) else { return Err(bad()) };
                scores.push(s.clone());
                gt.push(*c);
            }
            let argmax: Vec<usize> = scores
                .iter()
                .map(|s| {
                    s.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                        .0
                })
                .collect();
            let acc = metrics::accuracy(&argmax, &gt)?;
            match metrics::roc_auc(&scores, &gt) {
                Ok(auc) => report.push(id, "AUC", auc, n, None),
                Err(Error::UndefinedMetric(_)) if !full => {
                    report.push(id, "AUC", acc, n, Some("single_class_accuracy_fallback".into()))
                }
                Err(Error::UndefinedMetric(why)) => log::warn!("AUC undefined for `{id}`: {why}"),
                Err(e) => return Err(e),
            }
            if full {
                let (f1, mcc) = metrics::f1_and_mcc(&argmax, &gt)?;
                report.push(id, "F1", f1, n, None);
                report.push(id, "MCC", mcc, n, None);
                report.push(id, "ACC", acc, n, None);
            }
        }
        TaskType::Reg => {
            let (mut p, mut g, mut s) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for (x, pr) in samples.iter().zip(preds) {
                let (Label::Value { original, scale, .. }, Prediction::Value(v)) = (&x.label, pr) else { return Err(bad()) };
                p.push(*v);
                g.push(*original);
                s.push(*scale);
            }
            report.push(id, "MRE", metrics::mre(&p, &g, &s)?, n, None);
        }
        TaskType::Det => {
            let mut total = 0.0;
            for (x, p) in samples.iter().zip(preds) {
                let (Label::Box(gt), Prediction::Box(b)) = (&x.label, p) else { return Err(bad()) };
                total += metrics::box_iou(b, gt);
            }
            report.push(id, "IoU", total / n as f64, n, None);
        }
    }
    Ok(())
}

/// Evaluates `split` of every task of the model.
pub fn evaluate(
    model: &MultiTaskModel,
    data: &BTreeMap<String, TaskData>,
    split: Split,
    batch: usize,
    full: bool,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for id in model.task_ids() {
        let d = data.get(&id).ok_or_else(|| Error::UnknownTask(id.clone()))?;
        let samples = match split {
            Split::Train => &d.train,
            Split::Val => &d.val,
            Split::Test => &d.test,
        };
        let preds = model.predict(&id, samples, batch)?;
        score_predictions(&mut report, model.task(&id)?, model.config.encoder.image_size, samples, &preds, full)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// Mean over tasks of direction-normalized primary metrics: DSC, AUC and IoU
/// as is, MRE as `-MRE / MRE_0` with `MRE_0` the task's epoch-0 value.
pub fn selection_score(report: &MetricReport, tasks: &[TaskSpec], mre_reference: &BTreeMap<String, f64>) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Config("selection over an empty task set".into()));
    }
    let mut total = 0.0;
    for t in tasks {
        let metric = t.task_type.primary_metric();
        let v = report
            .get(&t.task_id, metric)
            .ok_or_else(|| Error::UndefinedMetric(format!("{metric} missing for `{}`", t.task_id)))?
            .value;
        total += match t.task_type {
            TaskType::Reg => {
                let r = mre_reference.get(&t.task_id).copied().filter(|r| *r > 0.0).unwrap_or(1.0);
                -v / r
            }
            _ => v,
        };
    }
    Ok(total / tasks.len() as f64)
}

/// Keeps the first strictly best score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `score` becomes the new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => false,
            _ if score.is_nan() => false,
            _ => {
                self.best = Some((epoch, score));
                true
            }
        }
    }
}

/// One row of `log.csv`. Epoch 0 is the pre-training validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: BTreeMap<String, f64>,
    pub val: BTreeMap<String, f64>,
    pub score: f64,
}

/// Optimizer state of one unit: shared groups stepped every batch, per-task
/// groups stepped only when their task is active.
pub struct Trainer {
    shared: Vec<AdamW>,
    per_task: BTreeMap<String, Vec<AdamW>>,
    trainable: Vec<Var>,
    grad_clip: Option<f64>,
}

impl Trainer {
    pub fn new(model: &MultiTaskModel, opt: &OptimizerConfig) -> Result<Self> {
        opt.validate()?;
        let store = model.store();
        let adam = |vars: Vec<Var>, lr: f64| {
            AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: opt.weight_decay,
                    ..Default::default()
                },
            )
        };
        let is_task = |n: &str| n.starts_with("head.") || n.starts_with("task_embed.");
        let mut shared = vec![
            adam(store.select(|n| n.starts_with("encoder.")), opt.backbone_lr)?,
            adam(store.select(|n| n.starts_with("moe.")), opt.moe_lr)?,
        ];
        let rest = store.select(|n| !n.starts_with("encoder.") && !n.starts_with("moe.") && !is_task(n));
        if !rest.is_empty() {
            shared.push(adam(rest, opt.base_lr)?);
        }
        let mut per_task = BTreeMap::new();
        for id in model.task_ids() {
            let head_prefix = format!("head.{id}.");
            let embed = format!("task_embed.{id}");
            let lr = match model.task(&id)?.task_type {
                TaskType::Seg => opt.decoder_lr,
                _ => opt.head_lr,
            };
            let mut groups = vec![adam(store.select(|n| n.starts_with(&head_prefix)), lr)?];
            let e = store.select(|n| n == embed);
            if !e.is_empty() {
                groups.push(adam(e, opt.moe_lr)?);
            }
            per_task.insert(id, groups);
        }
        Ok(Self {
            shared,
            per_task,
            trainable: store.iter().map(|(_, v)| v.clone()).collect(),
            grad_clip: opt.grad_clip,
        })
    }

    /// One optimization step on a single-task batch; returns the pre-step loss.
    pub fn step(&mut self, model: &MultiTaskModel, task_id: &str, samples: &[&LabeledSample]) -> Result<f64> {
        let weights = LossWeights(BTreeMap::from([(task_id.to_string(), model.task(task_id)?.loss_weight)]));
        let loss = objectives::multi_task_loss(&BTreeMap::from([(task_id.to_string(), model.loss(task_id, samples)?)]), &weights)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let mut grads = loss.backward()?;
        if let Some(limit) = self.grad_clip {
            clip_global_norm(&mut grads, &self.trainable, limit)?;
        }
        for opt in &mut self.shared {
            opt.step(&grads)?;
        }
        for opt in self.per_task.get_mut(task_id).ok_or_else(|| Error::UnknownTask(task_id.to_string()))? {
            opt.step(&grads)?;
        }
        Ok(value)
    }
}

/// Scales all gradients so their joint L2 norm is at most `limit`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradStore, vars: &[Var], limit: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > limit {
        let k = limit / norm;
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * k)?);
            }
        }
    }
    Ok(norm)
}

/// Result of training one unit. `model` holds the final-epoch weights;
/// `best_weights` the parameters of the best validation epoch.
pub struct TrainOutcome {
    pub unit: TrainingUnit,
    pub model: MultiTaskModel,
    pub best_weights: BTreeMap<String, Tensor>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub mre_reference: BTreeMap<String, f64>,
    pub log: Vec<LogRow>,
    /// Batch order of every epoch.
    pub batches: Vec<Vec<Batch>>,
    pub optimizer: OptimizerConfig,
}

impl TrainOutcome {
    pub fn restore_best(&self) -> Result<()> {
        self.model.store().restore(&self.best_weights)
    }
}

fn primary_values(report: &MetricReport, tasks: &[TaskSpec]) -> BTreeMap<String, f64> {
    tasks
        .iter()
        .filter_map(|t| {
            report
                .get(&t.task_id, t.task_type.primary_metric())
                .map(|e| (t.task_id.clone(), e.value))
        })
        .collect()
}

pub fn train_unit(
    unit: &TrainingUnit,
    config: &RunConfig,
    opt: &OptimizerConfig,
    data: &BTreeMap<String, TaskData>,
) -> Result<TrainOutcome> {
    if config.deterministic {
        enable_deterministic_compute();
    }
    let specs = unit
        .tasks
        .iter()
        .map(|id| data.get(id).map(|d| d.spec.clone()).ok_or_else(|| Error::UnknownTask(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let unit_data: BTreeMap<String, TaskData> = unit.tasks.iter().map(|id| (id.clone(), data[id].clone())).collect();
    if let Some((id, _)) = unit_data.iter().find(|(_, d)| d.val.is_empty()) {
        return Err(Error::InvalidSample(format!("task `{id}` has an empty validation set")));
    }
    let model = MultiTaskModel::new(&config.model, &specs, unit.moe_enabled, mix_seed(config.seed, &unit.name))?;
    if let Some(p) = &config.pretrained {
        let n = checkpoint::load_pretrained(model.store(), p)?;
        log::info!("initialized {n} parameters from {}", p.display());
    }
    let mut trainer = Trainer::new(&model, opt)?;
    let batch = opt.batch_size;
    let size = config.model.encoder.image_size;

    let val0 = evaluate(&model, &unit_data, Split::Val, batch, false)?;
    let mre_reference: BTreeMap<String, f64> = specs
        .iter()
        .filter(|t| t.task_type == TaskType::Reg)
        .filter_map(|t| val0.get(&t.task_id, "MRE").map(|e| (t.task_id.clone(), e.value)))
        .collect();
    let mut log_rows = vec![LogRow {
        epoch: 0,
        train_loss: BTreeMap::new(),
        val: primary_values(&val0, &specs),
        score: selection_score(&val0, &specs, &mre_reference)?,
    }];

    let sizes: BTreeMap<String, usize> = unit_data.iter().map(|(k, d)| (k.clone(), d.train.len())).collect();
    let mut best = BestTracker::default();
    let mut best_weights = model.store().snapshot()?;
    let mut all_batches = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let batches = sample_batches(&sizes, batch, epoch, config.seed)?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (bi, b) in batches.iter().enumerate() {
            let train = &unit_data[&b.task].train;
            let augmented: Vec<LabeledSample>;
            let samples: Vec<&LabeledSample> = if config.augment.enabled {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &format!("augment/{epoch}/{bi}")));
                augmented = b.indices.iter().map(|&i| augment(&train[i], size, &config.augment, &mut rng)).collect();
                augmented.iter().collect()
            } else {
                b.indices.iter().map(|&i| &train[i]).collect()
            };
            let loss = trainer.step(&model, &b.task, &samples).map_err(|e| match e {
                Error::Numeric(_) => Error::NonFiniteLoss {
                    epoch,
                    task: b.task.clone(),
                    batch: bi,
                },
                e => e,
            })?;
            let s = sums.entry(b.task.clone()).or_default();
            s.0 += loss;
            s.1 += 1;
        }
        let report = evaluate(&model, &unit_data, Split::Val, batch, false)?;
        let score = selection_score(&report, &specs, &mre_reference)?;
        if best.update(epoch, score) {
            best_weights = model.store().snapshot()?;
        }
        log::info!("{} epoch {epoch}: selection score {score:.6}", unit.name);
        log_rows.push(LogRow {
            epoch,
            train_loss: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            val: primary_values(&report, &specs),
            score,
        });
        all_batches.push(batches);
    }
    let (best_epoch, best_score) = best.best.ok_or_else(|| Error::Numeric("no epoch produced a finite selection score".into()))?;
    Ok(TrainOutcome {
        unit: unit.clone(),
        model,
        best_weights,
        best_epoch,
        best_score,
        mre_reference,
        log: log_rows,
        batches: all_batches,
        optimizer: opt.clone(),
    })
}

/// Trains once per grid rate when `lr_search` is set, keeping the run with
/// the best selection score (earliest grid entry on ties).
pub fn train_with_search(unit: &TrainingUnit, config: &RunConfig, data: &BTreeMap<String, TaskData>) -> Result<TrainOutcome> {
    if !config.optimizer.lr_search {
        return train_unit(unit, config, &config.optimizer, data);
    }
    let mut best: Option<TrainOutcome> = None;
    for &lr in &config.optimizer.lr_grid {
        let outcome = train_unit(unit, config, &config.optimizer.with_backbone_lr(lr), data)?;
        log::info!("{} backbone lr {lr}: best score {:.6}", unit.name, outcome.best_score);
        if best.as_ref().is_none_or(|b| outcome.best_score > b.best_score) {
            best = Some(outcome);
        }
    }
    best.ok_or_else(|| Error::Config("empty lr_grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_selection() {
        let mut t = BestTracker::default();
        for (e, s) in [(1, 0.5), (2, 0.7), (3, 0.6)] {
            t.update(e, s);
        }
        assert_eq!(t.best, Some((2, 0.7)));
    }

    #[test]
    fn ties_keep_earliest() {
        let mut t = BestTracker::default();
        for (e, s) in [(1, 0.5), (2, 0.7), (3, 0.7)] {
            t.update(e, s);
        }
        assert_eq!(t.best, Some((2, 0.7)));
    }

    #[test]
    fn default_rates() {
        let o = OptimizerConfig::default();
        o.validate().unwrap();
        assert_eq!((o.epochs, o.batch_size), (200, 16));
        let s = o.with_backbone_lr(5e-5);
        assert!((s.head_lr - 2.5e-3).abs() < 1e-15);
        let bad = OptimizerConfig {
            head_lr: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_task_score_is_monotone() {
        let spec = |ty| TaskSpec {
            task_id: "t".into(),
            task_type: ty,
            group: None,
            num_classes: Some(2),
            original_resolution: [8, 8],
            loss_weight: 1.0,
            paradigms: Paradigm::ALL.to_vec(),
            train: vec![],
            test: vec![],
        };
        let score = |ty, metric: &str, v: f64| {
            let mut r = MetricReport::default();
            r.push("t", metric, v, 1, None);
            selection_score(&r, &[spec(ty)], &BTreeMap::from([("t".to_string(), 10.0)])).unwrap()
        };
        assert!(score(TaskType::Seg, "DSC", 0.8) > score(TaskType::Seg, "DSC", 0.7));
        assert!(score(TaskType::Reg, "MRE", 2.0) > score(TaskType::Reg, "MRE", 3.0));
        assert_eq!(score(TaskType::Reg, "MRE", 5.0), -0.5);
    }
}
