//! Checkpoint directories: `weights.bin`, `meta.json` and `log.csv`.
//!
//! `weights.bin` layout, all integers u32 little-endian:
//! `count`, then per parameter `name_len, name bytes, rank, dims...`,
//! followed by every parameter's f32 LE data in table order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{evaluate, selection_score, LogRow, MultiTaskModel, RunConfig, Split, TrainOutcome, TrainingUnit};
use crate::data::{load_manifest, load_tasks, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::nn::ParamStore;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "meta.json";
pub const LOG_FILE: &str = "log.csv";

pub fn write_weights(path: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in params.values() {
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Config(format!("{}: truncated weights file", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    let count = c.u32()?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Config(format!("{}: parameter name is not UTF-8", path.display())))?;
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut out = BTreeMap::new();
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::from_vec(data, dims.as_slice(), &Device::Cpu)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Config(format!("{}: trailing bytes in weights file", path.display())));
    }
    Ok(out)
}

/// Copies every parameter of `source` (a checkpoint directory or weights file)
/// whose name and shape match. Experts missing from the source start as copies
/// of the dense feed-forward weights of their layer when those are present.
pub fn load_pretrained(store: &ParamStore, source: &Path) -> Result<usize> {
    let path = if source.is_dir() { source.join(WEIGHTS_FILE) } else { source.to_path_buf() };
    let weights = read_weights(&path)?;
    let mut loaded = 0;
    for (name, var) in store.iter() {
        let candidate = weights.get(name).cloned().or_else(|| expert_source(name).and_then(|s| weights.get(&s).cloned()));
        if let Some(t) = candidate {
            if t.dims() == var.dims() {
                store.set(name, &t)?;
                loaded += 1;
            }
        }
    }
    Ok(loaded)
}

/// `moe.layer.{i}.expert.{j}.{rest}` -> `encoder.layer.{i}.mlp.{rest}`.
fn expert_source(name: &str) -> Option<String> {
    let rest = name.strip_prefix("moe.layer.")?;
    let (layer, rest) = rest.split_once('.')?;
    let rest = rest.strip_prefix("expert.")?;
    let (_, tail) = rest.split_once('.')?;
    Some(format!("encoder.layer.{layer}.mlp.{tail}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub config: RunConfig,
    pub unit: TrainingUnit,
    pub registry: Vec<TaskSpec>,
    pub best_score: f64,
    pub best_epoch: usize,
    pub seed: u64,
    pub mre_reference: BTreeMap<String, f64>,
    /// Backbone rate the stored weights were trained with.
    pub backbone_lr: f64,
}

pub fn write_log(path: &Path, rows: &[LogRow], tasks: &[TaskSpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string()];
    for t in tasks {
        header.push(format!("{}/train_loss", t.task_id));
        header.push(format!("{}/val_{}", t.task_id, t.task_type.primary_metric()));
    }
    header.push("score".into());
    w.write_record(&header)?;
    let fmt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.epoch.to_string()];
        for t in tasks {
            rec.push(fmt(r.train_loss.get(&t.task_id)));
            rec.push(fmt(r.val.get(&t.task_id)));
        }
        rec.push(r.score.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A loaded checkpoint: metadata plus the model holding the stored weights.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
    pub model: MultiTaskModel,
}

impl Checkpoint {
    /// Writes the best weights of `outcome` with its metadata and log.
    pub fn save(dir: &Path, outcome: &TrainOutcome, config: &RunConfig) -> Result<CheckpointMeta> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_weights(&dir.join(WEIGHTS_FILE), &outcome.best_weights)?;
        let registry: Vec<TaskSpec> = outcome
            .model
            .task_ids()
            .iter()
            .map(|id| outcome.model.task(id).cloned())
            .collect::<Result<_>>()?;
        let meta = CheckpointMeta {
            config_hash: config.config_hash(),
            config: config.clone(),
            unit: outcome.unit.clone(),
            registry: registry.clone(),
            best_score: outcome.best_score,
            best_epoch: outcome.best_epoch,
            seed: config.seed,
            mre_reference: outcome.mre_reference.clone(),
            backbone_lr: outcome.optimizer.backbone_lr,
        };
        let path = dir.join(META_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        write_log(&dir.join(LOG_FILE), &outcome.log, &registry)?;
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.config_hash != meta.config.config_hash() {
            return Err(Error::Config(format!("{}: config hash mismatch", path.display())));
        }
        let model = MultiTaskModel::new(&meta.config.model, &meta.registry, meta.unit.moe_enabled, 0)?;
        model.store().restore(&read_weights(&dir.join(WEIGHTS_FILE))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            model,
        })
    }

    /// Reloads this unit's data with the split used during training.
    pub fn data(&self) -> Result<BTreeMap<String, TaskData>> {
        let cfg = &self.meta.config;
        let manifest = load_manifest(&cfg.manifest)?;
        load_tasks(&manifest, &self.meta.unit.tasks, &cfg.model.preprocess(), cfg.val_fraction, cfg.seed)
    }

    /// Validation report and selection score, as computed during training.
    pub fn validate(&self, data: &BTreeMap<String, TaskData>) -> Result<(MetricReport, f64)> {
        let report = evaluate(&self.model, data, Split::Val, self.meta.config.optimizer.batch_size, false)?;
        let score = selection_score(&report, &self.meta.registry, &self.meta.mre_reference)?;
        Ok((report, score))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        m.insert("b".to_string(), Tensor::new(&[7.0f32], &Device::Cpu).unwrap());
        write_weights(&path, &m).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a.weight"].to_vec2::<f32>().unwrap(), vec![vec![1.5, -2.0], vec![0.25, 3.0]]);
        assert_eq!(back["b"].dims(), &[1]);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        std::fs::write(&path, [3u8, 0, 0, 0, 9]).unwrap();
        assert!(read_weights(&path).is_err());
    }

    #[test]
    fn expert_names_map_to_dense_mlp() {
        assert_eq!(
            expert_source("moe.layer.7.expert.2.fc1.weight").as_deref(),
            Some("encoder.layer.7.mlp.fc1.weight")
        );
        assert_eq!(expert_source("moe.layer.7.gate.weight"), None);
    }
}
