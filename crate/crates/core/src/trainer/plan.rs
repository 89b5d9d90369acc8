//! Paradigm plans and the per-epoch batch stream.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, TaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    /// One model per task, no MoE.
    Ts,
    /// One model per clinical group.
    Cg,
    /// One model over every task.
    Au,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::Ts, Paradigm::Cg, Paradigm::Au];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Ts => "ts",
            Paradigm::Cg => "cg",
            Paradigm::Au => "au",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ts" => Ok(Paradigm::Ts),
            "cg" => Ok(Paradigm::Cg),
            "au" => Ok(Paradigm::Au),
            _ => Err(Error::Config(format!("unknown paradigm `{s}` (expected ts, cg or au)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingUnit {
    /// Stable name, also the checkpoint directory name.
    pub name: String,
    pub paradigm: Paradigm,
    /// Sorted task ids.
    pub tasks: Vec<String>,
    pub moe_enabled: bool,
    /// Index of the encoder instance this unit owns.
    pub encoder_instance: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParadigmPlan {
    pub paradigm: Paradigm,
    pub units: Vec<TrainingUnit>,
}

/// Builds the units of `paradigm` over the tasks scoped to it.
pub fn build_plan(paradigm: Paradigm, registry: &[TaskSpec]) -> Result<ParadigmPlan> {
    let tasks: Vec<&TaskSpec> = registry.iter().filter(|t| t.in_paradigm(paradigm)).collect();
    if tasks.is_empty() {
        return Err(Error::Config(format!("no tasks take part in paradigm {paradigm}")));
    }
    let mut sets: Vec<(String, Vec<String>)> = match paradigm {
        Paradigm::Ts => tasks
            .iter()
            .map(|t| (format!("ts_{}", t.task_id), vec![t.task_id.clone()]))
            .collect(),
        Paradigm::Cg => {
            let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for t in &tasks {
                let g = t
                    .group
                    .as_deref()
                    .ok_or_else(|| Error::Config(format!("task `{}` has no clinical group", t.task_id)))?;
                groups.entry(g).or_default().push(t.task_id.clone());
            }
            groups.into_iter().map(|(g, ids)| (format!("cg_{g}"), ids)).collect()
        }
        Paradigm::Au => vec![("au".to_string(), tasks.iter().map(|t| t.task_id.clone()).collect())],
    };
    sets.sort();
    let units = sets
        .into_iter()
        .enumerate()
        .map(|(i, (name, mut ids))| {
            ids.sort();
            TrainingUnit {
                name,
                paradigm,
                tasks: ids,
                moe_enabled: paradigm != Paradigm::Ts,
                encoder_instance: i,
            }
        })
        .collect();
    Ok(ParadigmPlan { paradigm, units })
}

/// Single-task batch: `indices` into that task's training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub task: String,
    pub indices: Vec<usize>,
}

/// Batch order for one epoch. The epoch has `sum_t ceil(n_t / B)` batches;
/// each picks a task with probability proportional to `n_t` and takes the
/// next `min(B, n_t)` samples of that task's shuffled stream, reshuffling
/// when the stream runs out.
pub fn sample_batches(sizes: &BTreeMap<String, usize>, batch_size: usize, epoch: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Config("unit has no tasks".into()));
    }
    if let Some((t, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(Error::InvalidSample(format!("task `{t}` has an empty training set")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("epoch/{epoch}")));
    let tasks: Vec<(&String, usize)> = sizes.iter().map(|(k, &v)| (k, v)).collect();
    let picker = WeightedIndex::new(tasks.iter().map(|(_, n)| *n)).map_err(|e| Error::Config(e.to_string()))?;
    let mut streams: Vec<(Vec<usize>, usize)> = tasks
        .iter()
        .map(|&(_, n)| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            (p, 0)
        })
        .collect();
    let total: usize = tasks.iter().map(|(_, n)| n.div_ceil(batch_size)).sum();
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let k = picker.sample(&mut rng);
        let n = tasks[k].1;
        let take = batch_size.min(n);
        let (perm, pos) = &mut streams[k];
        let mut indices = Vec::with_capacity(take);
        while indices.len() < take {
            if *pos == n {
                perm.shuffle(&mut rng);
                *pos = 0;
            }
            indices.push(perm[*pos]);
            *pos += 1;
        }
        out.push(Batch {
            task: tasks[k].0.clone(),
            indices,
        });
    }
    Ok(out)
}
