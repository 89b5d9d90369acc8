//! Relative performance change against single-task baselines, group
//! aggregates, and table/figure rendering.
//!
//! Positive deltas always mean improvement: lower-is-better metrics have the
//! sign flipped. Stored delta values are rounded to 6 significant digits, the
//! precision every rendered format carries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Direction, MetricReport};

/// Metrics that act as each task type's primary metric, in lookup order.
pub const PRIMARY_METRICS: [&str; 4] = ["DSC", "AUC", "MRE", "IoU"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    Percent,
    Absolute,
}

impl FromStr for DeltaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "percent" => Ok(DeltaMode::Percent),
            "absolute" => Ok(DeltaMode::Absolute),
            _ => Err(Error::Config(format!("unknown delta mode `{s}` (expected percent or absolute)"))),
        }
    }
}

impl DeltaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaMode::Percent => "percent",
            DeltaMode::Absolute => "absolute",
        }
    }
}

/// Sign-adjusted absolute change.
pub fn absolute_delta(ts: f64, other: f64, direction: Direction) -> f64 {
    match direction {
        Direction::HigherBetter => other - ts,
        Direction::LowerBetter => ts - other,
    }
}

/// `(delta_percent, delta_absolute)`; undefined for a zero baseline.
pub fn relative_delta(ts: f64, other: f64, direction: Direction) -> Result<(f64, f64)> {
    if !ts.is_finite() || !other.is_finite() {
        return Err(Error::Numeric(format!("non-finite values {ts} -> {other}")));
    }
    if ts == 0.0 {
        return Err(Error::UndefinedMetric("relative change from a zero baseline".into()));
    }
    let abs = absolute_delta(ts, other, direction);
    Ok((abs / ts * 100.0, abs))
}

/// Rounds to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub task_id: String,
    pub group: String,
    pub metric: String,
    pub ts_value: f64,
    pub other_value: f64,
    /// Absent when the baseline is zero.
    pub delta_percent: Option<f64>,
    pub delta_absolute: f64,
    pub direction: Direction,
}

impl DeltaEntry {
    pub fn delta(&self, mode: DeltaMode) -> Result<f64> {
        match mode {
            DeltaMode::Absolute => Ok(self.delta_absolute),
            DeltaMode::Percent => self.delta_percent.ok_or_else(|| {
                Error::UndefinedMetric(format!("percent change of `{}` from a zero baseline", self.task_id))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub group: String,
    pub mean: f64,
    pub n_tasks: usize,
    /// Set when the group mixes different metrics.
    pub cross_metric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub mode: DeltaMode,
    pub baseline: String,
    pub paradigm: String,
    pub per_task: Vec<DeltaEntry>,
    pub per_group: Vec<GroupDelta>,
}

/// Arithmetic mean of the selected delta per group, groups in name order.
pub fn group_average(entries: &[DeltaEntry], mode: DeltaMode) -> Result<Vec<GroupDelta>> {
    let mut groups: BTreeMap<&str, Vec<&DeltaEntry>> = BTreeMap::new();
    for e in entries {
        if e.group.is_empty() {
            return Err(Error::Config(format!("task `{}` has no group", e.task_id)));
        }
        groups.entry(&e.group).or_default().push(e);
    }
    if groups.is_empty() {
        return Err(Error::Config("no entries to aggregate".into()));
    }
    groups
        .into_iter()
        .map(|(g, es)| {
            let mut ids: Vec<&DeltaEntry> = es.clone();
            ids.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            let total = ids.iter().map(|e| e.delta(mode)).sum::<Result<f64>>()?;
            let metrics: BTreeSet<&str> = ids.iter().map(|e| e.metric.as_str()).collect();
            Ok(GroupDelta {
                group: g.to_string(),
                mean: round6(total / ids.len() as f64),
                n_tasks: ids.len(),
                cross_metric: metrics.len() > 1,
            })
        })
        .collect()
}

fn primary_entry<'a>(report: &'a MetricReport, task: &str) -> Option<&'a crate::metrics::MetricEntry> {
    PRIMARY_METRICS.iter().find_map(|m| report.get(task, m))
}

/// Compares `other` against the single-task baseline `ts` on each task's
/// primary metric. Both reports must cover the same tasks.
pub fn compare(ts: &MetricReport, other: &MetricReport, mode: DeltaMode) -> Result<DeltaReport> {
    let a: BTreeSet<String> = ts.task_ids().into_iter().collect();
    let b: BTreeSet<String> = other.task_ids().into_iter().collect();
    if a != b {
        let diff: Vec<&String> = a.symmetric_difference(&b).collect();
        return Err(Error::Config(format!("reports cover different tasks; differing ids: {diff:?}")));
    }
    let mut per_task = Vec::with_capacity(a.len());
    for id in &a {
        let e0 = primary_entry(ts, id).ok_or_else(|| Error::UndefinedMetric(format!("no primary metric for `{id}`")))?;
        let e1 = other
            .get(id, &e0.metric)
            .ok_or_else(|| Error::UndefinedMetric(format!("`{id}` lacks {} in the compared report", e0.metric)))?;
        let group = ts
            .meta
            .groups
            .get(id)
            .or_else(|| other.meta.groups.get(id))
            .cloned()
            .ok_or_else(|| Error::Config(format!("task `{id}` has no group")))?;
        let delta_absolute = absolute_delta(e0.value, e1.value, e0.direction);
        let delta_percent = match relative_delta(e0.value, e1.value, e0.direction) {
            Ok((p, _)) => Some(round6(p)),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        per_task.push(DeltaEntry {
            task_id: id.clone(),
            group,
            metric: e0.metric.clone(),
            ts_value: e0.value,
            other_value: e1.value,
            delta_percent,
            delta_absolute: round6(delta_absolute),
            direction: e0.direction,
        });
    }
    let per_group = group_average(&per_task, mode)?;
    Ok(DeltaReport {
        mode,
        baseline: ts.meta.paradigm.clone(),
        paradigm: other.meta.paradigm.clone(),
        per_task,
        per_group,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Json,
    Csv,
    Markdown,
    Png,
}

impl FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(RenderFormat::Json),
            "csv" => Ok(RenderFormat::Csv),
            "md" | "markdown" => Ok(RenderFormat::Markdown),
            "png" => Ok(RenderFormat::Png),
            _ => Err(Error::Config(format!("unknown render format `{s}`"))),
        }
    }
}

const CSV_HEADER: [&str; 8] = [
    "task_id",
    "group",
    "metric",
    "direction",
    "ts_value",
    "other_value",
    "delta_percent",
    "delta_absolute",
];

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::HigherBetter => "higher_better",
        Direction::LowerBetter => "lower_better",
    }
}

impl DeltaReport {
    pub fn to_json(&self) -> Result<String> {
        let mut r = self.clone();
        for e in &mut r.per_task {
            e.ts_value = round6(e.ts_value);
            e.other_value = round6(e.other_value);
        }
        Ok(serde_json::to_string_pretty(&r)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for e in &self.per_task {
            w.write_record([
                e.task_id.clone(),
                e.group.clone(),
                e.metric.clone(),
                direction_str(e.direction).to_string(),
                round6(e.ts_value).to_string(),
                round6(e.other_value).to_string(),
                e.delta_percent.map(|v| v.to_string()).unwrap_or_default(),
                e.delta_absolute.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Parses the per-task rows written by [`DeltaReport::to_csv`].
    pub fn entries_from_csv(text: &str) -> Result<Vec<DeltaEntry>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number `{s}` in delta csv"))) };
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let direction = match &rec[3] {
                "higher_better" => Direction::HigherBetter,
                "lower_better" => Direction::LowerBetter,
                d => return Err(Error::Config(format!("bad direction `{d}` in delta csv"))),
            };
            out.push(DeltaEntry {
                task_id: rec[0].to_string(),
                group: rec[1].to_string(),
                metric: rec[2].to_string(),
                direction,
                ts_value: num(&rec[4])?,
                other_value: num(&rec[5])?,
                delta_percent: if rec[6].is_empty() { None } else { Some(num(&rec[6])?) },
                delta_absolute: num(&rec[7])?,
            });
        }
        Ok(out)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} vs {} (group mode: {})\n", self.paradigm.to_uppercase(), self.baseline.to_uppercase(), self.mode.as_str());
        s.push_str("| Task | Group | Metric | TS | Other | Δ% | Δabs |\n|---|---|---|---|---|---|---|\n");
        for e in &self.per_task {
            let pct = e.delta_percent.map(|v| format!("{v:+}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {:+} |",
                e.task_id,
                e.group,
                e.metric,
                round6(e.ts_value),
                round6(e.other_value),
                pct,
                e.delta_absolute
            );
        }
        s.push_str("\n| Group | Tasks | Mean Δ |\n|---|---|---|\n");
        for g in &self.per_group {
            let mark = if g.cross_metric { " (mixed metrics)" } else { "" };
            let _ = writeln!(s, "| {} | {} | {:+}{mark} |", g.group, g.n_tasks, g.mean);
        }
        s
    }

    pub fn group(&self, name: &str) -> Option<&GroupDelta> {
        self.per_group.iter().find(|g| g.group == name)
    }

    /// Writes `delta.{json,csv,md}` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("delta.json", self.to_json()?),
            ("delta.csv", self.to_csv()?),
            ("delta.md", self.to_markdown()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn render(&self, format: RenderFormat, path: &Path) -> Result<()> {
        let body = match format {
            RenderFormat::Json => self.to_json()?,
            RenderFormat::Csv => self.to_csv()?,
            RenderFormat::Markdown => self.to_markdown(),
            RenderFormat::Png => {
                let tasks: Vec<String> = self.per_task.iter().map(|e| e.task_id.clone()).collect();
                render_heatmap(path, &tasks, &[self])?;
                return Ok(());
            }
        };
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Group-level layout: Group, #Images, Δ(CG), Δ(AU).
pub fn group_table_markdown(cg: &DeltaReport, au: &DeltaReport, images: &BTreeMap<String, usize>) -> Result<String> {
    if cg.mode != au.mode {
        return Err(Error::Config("group table needs both reports in the same mode".into()));
    }
    let mut groups: BTreeSet<&str> = cg.per_group.iter().map(|g| g.group.as_str()).collect();
    groups.extend(au.per_group.iter().map(|g| g.group.as_str()));
    let mut s = format!("Mode: {}\n\n| Group | #Images | Δ(CG) | Δ(AU) |\n|---|---|---|---|\n", cg.mode.as_str());
    let cell = |r: &DeltaReport, g: &str| {
        r.group(g)
            .map(|d| format!("{:+}{}", d.mean, if d.cross_metric { "*" } else { "" }))
            .unwrap_or_else(|| "n/a".into())
    };
    for g in groups {
        let n = images.get(g).map(|n| n.to_string()).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, "| {g} | {n} | {} | {} |", cell(cg, g), cell(au, g));
    }
    s.push_str("\n\\* group mixes metrics; averaged after sign adjustment.\n");
    Ok(s)
}

const CELL: u32 = 24;

fn diverging(v: f64, scale: f64) -> Rgb<u8> {
    let t = (v / scale).clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        Rgb([fade(t), fade(t), 255])
    } else {
        Rgb([255, fade(t), fade(t)])
    }
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img.put_pixel(x, y, c);
        }
    }
}

/// Tasks x paradigms heatmap of percent deltas (blue improvement, red
/// degradation, grey missing). Returns `(rows, cols)`.
pub fn render_heatmap(path: &Path, tasks: &[String], columns: &[&DeltaReport]) -> Result<(usize, usize)> {
    if tasks.is_empty() || columns.is_empty() {
        return Err(Error::Config("heatmap needs at least one task and one column".into()));
    }
    let value = |r: &DeltaReport, t: &str| r.per_task.iter().find(|e| e.task_id == t).and_then(|e| e.delta_percent);
    let scale = columns
        .iter()
        .flat_map(|r| tasks.iter().filter_map(move |t| value(r, t)))
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let (rows, cols) = (tasks.len(), columns.len());
    let mut img = RgbImage::from_pixel(cols as u32 * CELL + 1, rows as u32 * CELL + 1, Rgb([0, 0, 0]));
    for (i, t) in tasks.iter().enumerate() {
        for (j, r) in columns.iter().enumerate() {
            let c = value(r, t).map(|v| diverging(v, scale)).unwrap_or(Rgb([160, 160, 160]));
            fill(&mut img, j as u32 * CELL + 1, i as u32 * CELL + 1, CELL - 1, CELL - 1, c);
        }
    }
    img.save(path)?;
    Ok((rows, cols))
}

/// Grouped bar chart of absolute values: one cluster per `(task, metric)`,
/// one bar per report, heights normalized by each cluster's maximum.
pub fn render_bar_chart(path: &Path, series: &[(String, String)], reports: &[&MetricReport]) -> Result<()> {
    if series.is_empty() || reports.is_empty() {
        return Err(Error::Config("bar chart needs at least one series and one report".into()));
    }
    const PALETTE: [Rgb<u8>; 4] = [Rgb([90, 90, 90]), Rgb([66, 133, 244]), Rgb([219, 68, 55]), Rgb([15, 157, 88])];
    let (bar, gap, height) = (10u32, 12u32, 120u32);
    let cluster = bar * reports.len() as u32 + gap;
    let mut img = RgbImage::from_pixel(cluster * series.len() as u32 + gap, height + 2, Rgb([255, 255, 255]));
    for (i, (task, metric)) in series.iter().enumerate() {
        let values: Vec<Option<f64>> = reports.iter().map(|r| r.get(task, metric).map(|e| e.value)).collect();
        let max = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (j, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let h = ((v.abs() / max) * height as f64).round() as u32;
            let x0 = gap + i as u32 * cluster + j as u32 * bar;
            fill(&mut img, x0, height + 1 - h, bar - 1, h, PALETTE[j % PALETTE.len()]);
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breast_segmentation_drop() {
        let (p, a) = relative_delta(0.713, 0.145, Direction::HigherBetter).unwrap();
        assert!((p + 79.7).abs() < 0.05, "{p}");
        assert!((a + 0.568).abs() < 1e-12);
    }

    #[test]
    fn cervical_regression_gain() {
        let (p, a) = relative_delta(30.4, 15.6, Direction::LowerBetter).unwrap();
        assert!((p - 48.68).abs() < 0.01, "{p}");
        assert!((a - 14.8).abs() < 1e-12);
    }

    #[test]
    fn identity_and_zero_baseline() {
        assert_eq!(relative_delta(0.4, 0.4, Direction::HigherBetter).unwrap(), (0.0, 0.0));
        assert!(matches!(relative_delta(0.0, 0.4, Direction::HigherBetter), Err(Error::UndefinedMetric(_))));
    }

    fn entry(id: &str, group: &str, abs: f64, pct: f64) -> DeltaEntry {
        DeltaEntry {
            task_id: id.into(),
            group: group.into(),
            metric: "DSC".into(),
            ts_value: 1.0,
            other_value: 1.0 + abs,
            delta_percent: Some(pct),
            delta_absolute: abs,
            direction: Direction::HigherBetter,
        }
    }

    #[test]
    fn group_means() {
        let es = vec![entry("a", "G", -0.568, 10.0), entry("b", "G", 0.1, -10.0), entry("c", "G", 0.2, 0.0)];
        let abs = group_average(&es, DeltaMode::Absolute).unwrap();
        assert!((abs[0].mean + 0.0893333).abs() < 1e-6);
        let pct = group_average(&es, DeltaMode::Percent).unwrap();
        assert_eq!(pct[0].mean, 0.0);
        let single = group_average(&es[..1], DeltaMode::Percent).unwrap();
        assert_eq!(single[0].mean, 10.0);
        assert!(group_average(&[], DeltaMode::Percent).is_err());
    }

    #[test]
    fn rounding() {
        assert_eq!(round6(-79.66339410939691), -79.6634);
        assert_eq!(round6(0.0), 0.0);
        assert_eq!(round6(123456789.0), 123457000.0);
    }

    #[test]
    fn unknown_format() {
        assert!("pdf".parse::<RenderFormat>().is_err());
        assert!("ratio".parse::<DeltaMode>().is_err());
    }
}
