//! Evaluation metrics and the serialized metric report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// Fixed direction of a metric by name: HD and MRE are errors, all other
    /// metrics are scores.
    pub fn of(metric: &str) -> Direction {
        match metric {
            "HD" | "HD95" | "MRE" => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }
}

/// Binary mask on a row-major `height x width` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} mask",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_ids(height: usize, width: usize, ids: &[u8], class: u8) -> Result<Self> {
        Self::new(height, width, ids.iter().map(|&v| v == class).collect())
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    fn at(&self, r: usize, c: usize) -> bool {
        self.pixels[r * self.width + c]
    }

    /// Foreground pixels with a 4-neighbour that is background or off-image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.at(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == self.height
                    || c + 1 == self.width
                    || !self.at(r - 1, c)
                    || !self.at(r + 1, c)
                    || !self.at(r, c - 1)
                    || !self.at(r, c + 1);
                if edge {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn diagonal(&self) -> f64 {
        let h = self.height.saturating_sub(1) as f64;
        let w = self.width.saturating_sub(1) as f64;
        (h * h + w * w).sqrt()
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "masks {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    #[default]
    Max,
    Percentile95,
}

/// Hausdorff distance between mask boundaries, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HausdorffValue {
    pub distance: f64,
    /// Set when exactly one mask was empty and the image diagonal was returned.
    pub empty_convention: bool,
}

pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<HausdorffValue> {
    hausdorff_with(pred, gt, HausdorffMode::Max)
}

pub fn hausdorff_with(pred: &Mask, gt: &Mask, mode: HausdorffMode) -> Result<HausdorffValue> {
    same_shape(pred, gt)?;
    let a = pred.boundary();
    let b = gt.boundary();
    let value = |distance, empty_convention| Ok(HausdorffValue { distance, empty_convention });
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return value(0.0, false),
        (true, false) | (false, true) => return value(pred.diagonal(), true),
        _ => {}
    }
    match mode {
        HausdorffMode::Max => value(directed_max(&a, &b).max(directed_max(&b, &a)), false),
        HausdorffMode::Percentile95 => {
            let p = percentile(nearest_distances(&a, &b), 95.0).max(percentile(nearest_distances(&b, &a), 95.0));
            value(p, false)
        }
    }
}

fn sq_dist(p: (usize, usize), q: (usize, usize)) -> f64 {
    let dr = p.0 as f64 - q.0 as f64;
    let dc = p.1 as f64 - q.1 as f64;
    dr * dr + dc * dc
}

/// Directed Hausdorff distance with early break: the inner scan stops as soon
/// as a point closer than the running maximum is found.
fn directed_max(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut cmax = 0.0f64;
    for &p in from {
        let mut cmin = f64::INFINITY;
        for &q in to {
            let d = sq_dist(p, q);
            if d < cmax {
                cmin = d;
                break;
            }
            cmin = cmin.min(d);
        }
        if cmin > cmax && cmin.is_finite() {
            cmax = cmin;
        }
    }
    cmax.sqrt()
}

fn nearest_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&p| to.iter().map(|&q| sq_dist(p, q)).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Linear-interpolated percentile `q` in `[0, 100]`.
fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Binary ROC AUC via average ranks (Mann-Whitney U), ties count half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC AUC from per-sample class probabilities `scores[i][c]`. Two columns use
/// the binary statistic on column 1; more columns use the macro one-vs-rest
/// average over the classes present in `gt`.
pub fn roc_auc(scores: &[Vec<f64>], gt: &[usize]) -> Result<f64> {
    if scores.len() != gt.len() {
        return Err(Error::Shape(format!("{} score rows for {} labels", scores.len(), gt.len())));
    }
    let c = scores.first().map(Vec::len).unwrap_or(0);
    if scores.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("ragged score rows".into()));
    }
    let mut present: Vec<usize> = gt.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedMetric("AUC needs at least two classes in the ground truth".into()));
    }
    if let Some(bad) = present.iter().find(|&&k| k >= c) {
        return Err(Error::Shape(format!("label {bad} has no score column")));
    }
    if c == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let p: Vec<bool> = gt.iter().map(|&g| g == 1).collect();
        return binary_auc(&s, &p);
    }
    let mut total = 0.0;
    for &k in &present {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let p: Vec<bool> = gt.iter().map(|&g| g == k).collect();
        total += binary_auc(&s, &p)?;
    }
    Ok(total / present.len() as f64)
}

/// Square confusion matrix indexed `[truth][prediction]`.
pub fn confusion_matrix(pred: &[usize], gt: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("no samples".into()));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= classes || g >= classes {
            return Err(Error::Shape(format!("class index beyond {classes}")));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Multiclass MCC from a confusion matrix; zero when the denominator vanishes.
pub fn mcc_from_confusion(m: &[Vec<usize>]) -> f64 {
    let k = m.len();
    let s: f64 = m.iter().flatten().sum::<usize>() as f64;
    let c: f64 = (0..k).map(|i| m[i][i]).sum::<usize>() as f64;
    let t: Vec<f64> = (0..k).map(|i| m[i].iter().sum::<usize>() as f64).collect();
    let p: Vec<f64> = (0..k).map(|j| m.iter().map(|row| row[j]).sum::<usize>() as f64).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let num = c * s - tp;
    let den = ((s * s - p.iter().map(|v| v * v).sum::<f64>()) * (s * s - t.iter().map(|v| v * v).sum::<f64>())).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Macro F1 over the classes appearing in either predictions or labels.
pub fn macro_f1_from_confusion(m: &[Vec<usize>]) -> f64 {
    let k = m.len();
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..k {
        let tp = m[i][i] as f64;
        let actual: f64 = m[i].iter().sum::<usize>() as f64;
        let predicted: f64 = m.iter().map(|row| row[i]).sum::<usize>() as f64;
        if actual == 0.0 && predicted == 0.0 {
            continue;
        }
        counted += 1;
        let denom = actual + predicted;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

pub fn f1_and_mcc(pred: &[usize], gt: &[usize]) -> Result<(f64, f64)> {
    let classes = pred.iter().chain(gt).copied().max().map_or(0, |m| m + 1);
    let m = confusion_matrix(pred, gt, classes)?;
    Ok((macro_f1_from_confusion(&m), mcc_from_confusion(&m)))
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Intersection over union of two normalized boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean `|pred * scale - gt|` in original-resolution pixels.
pub fn mre(preds: &[f64], gts: &[f64], scales: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() != scales.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "mre over {} predictions, {} labels, {} scales",
            preds.len(),
            gts.len(),
            scales.len()
        )));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidSample(format!("scale factor {s} is not positive")));
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .zip(scales)
        .map(|((p, g), s)| (p * s - g).abs())
        .sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub paradigm: String,
    pub seed: u64,
    pub checkpoint: String,
    /// Clinical group of each task.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, String>,
    /// Training-image count of each task.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub images: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub task_id: String,
    pub metric: String,
    pub value: f64,
    pub direction: Direction,
    pub n: usize,
    /// Convention applied while computing the value, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub results: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, task_id: &str, metric: &str, value: f64, n: usize, flag: Option<String>) {
        debug_assert!(self.get(task_id, metric).is_none(), "duplicate {task_id}/{metric}");
        self.results.push(MetricEntry {
            task_id: task_id.to_string(),
            metric: metric.to_string(),
            value,
            direction: Direction::of(metric),
            n,
            flag,
        });
    }

    pub fn get(&self, task_id: &str, metric: &str) -> Option<&MetricEntry> {
        self.results
            .iter()
            .find(|e| e.task_id == task_id && e.metric == metric)
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.results.iter().map(|e| e.task_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Checks the one-entry-per-(task, metric) and fixed-direction invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.results {
            if !seen.insert((&e.task_id, &e.metric)) {
                return Err(Error::Config(format!("duplicate entry {}/{}", e.task_id, e.metric)));
            }
            if e.direction != Direction::of(&e.metric) {
                return Err(Error::Config(format!("wrong direction for metric {}", e.metric)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
