use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use m2dino::analysis::{self, DeltaMode, DeltaReport};
use m2dino::data::{load_manifest, load_tasks};
use m2dino::metrics::MetricReport;
use m2dino::synth::{synth_generate, SynthPlan};
use m2dino::trainer::{self, build_plan, Checkpoint, Paradigm, RunConfig, Split};
use m2dino::{Error, Result};

#[derive(Parser)]
#[command(name = "m2dino", version, about = "Multi-task ultrasound training and transfer analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest from a plan.
    Synth {
        plan: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train every unit of a paradigm; one checkpoint directory per unit.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        paradigm: Option<Paradigm>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint, or every checkpoint under a run directory.
    Evaluate {
        checkpoint: PathBuf,
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a report against the single-task baseline report.
    Analyze {
        ts_report: PathBuf,
        other_report: PathBuf,
        #[arg(long, default_value = "absolute")]
        mode: DeltaMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group table, heatmap and bar chart over reports of several paradigms.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "absolute")]
        mode: DeltaMode,
        #[arg(long)]
        out: PathBuf,
    },
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let non_empty = std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn synth(plan: &Path, seed: u64, out: &Path, force: bool) -> Result<()> {
    let plan = SynthPlan::load(plan)?;
    let ds = synth_generate(&plan, seed)?;
    prepare_out(out, force)?;
    let manifest = ds.write(out)?;
    println!("{} tasks -> {}", ds.manifest.tasks.len(), manifest.display());
    Ok(())
}

fn train(mut cfg: RunConfig, force: bool) -> Result<()> {
    if cfg.deterministic {
        trainer::enable_deterministic_compute();
    }
    let manifest = load_manifest(&cfg.manifest)?;
    let plan = build_plan(cfg.paradigm, &manifest.tasks)?;
    prepare_out(&cfg.out, force)?;
    cfg.manifest = std::fs::canonicalize(&cfg.manifest).map_err(|e| Error::io(&cfg.manifest, e))?;
    write(&cfg.out.join("plan.json"), &serde_json::to_string_pretty(&plan)?)?;
    let ids: Vec<String> = plan.units.iter().flat_map(|u| u.tasks.clone()).collect();
    let data = load_tasks(&manifest, &ids, &cfg.model.preprocess(), cfg.val_fraction, cfg.seed)?;
    for unit in &plan.units {
        log::info!("training {} over {} task(s)", unit.name, unit.tasks.len());
        let outcome = trainer::train_with_search(unit, &cfg, &data)?;
        let dir = cfg.out.join(&unit.name);
        Checkpoint::save(&dir, &outcome, &cfg)?;
        println!("{}: best epoch {} score {}", dir.display(), outcome.best_epoch, outcome.best_score);
    }
    Ok(())
}

fn checkpoint_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(trainer::checkpoint::META_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(trainer::checkpoint::META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no checkpoints under {}", path.display())));
    }
    Ok(dirs)
}

fn evaluate(path: &Path, split: Split) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let mut paradigms = Vec::new();
    for dir in checkpoint_dirs(path)? {
        let ckpt = Checkpoint::load(&dir)?;
        let data = ckpt.data()?;
        let r = trainer::evaluate(&ckpt.model, &data, split, ckpt.meta.config.optimizer.batch_size, true)?;
        for e in r.results {
            if report.get(&e.task_id, &e.metric).is_some() {
                return Err(Error::Config(format!("task `{}` appears in several checkpoints", e.task_id)));
            }
            report.results.push(e);
        }
        for t in &ckpt.meta.registry {
            if let Some(g) = &t.group {
                report.meta.groups.insert(t.task_id.clone(), g.clone());
            }
            report.meta.images.insert(t.task_id.clone(), t.train.len());
        }
        report.meta.seed = ckpt.meta.seed;
        paradigms.push(ckpt.meta.unit.paradigm);
    }
    paradigms.dedup();
    if paradigms.len() != 1 {
        return Err(Error::Config("checkpoints from different paradigms".into()));
    }
    report.meta.paradigm = paradigms[0].to_string();
    report.meta.checkpoint = path.display().to_string();
    report.validate()?;
    Ok(report)
}

fn analyze(ts: &Path, other: &Path, mode: DeltaMode, out: &Path) -> Result<()> {
    let delta = analysis::compare(&MetricReport::load(ts)?, &MetricReport::load(other)?, mode)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    delta.write_all(out)?;
    let tasks: Vec<String> = delta.per_task.iter().map(|e| e.task_id.clone()).collect();
    analysis::render_heatmap(&out.join("delta.png"), &tasks, &[&delta])?;
    print!("{}", delta.to_markdown());
    Ok(())
}

fn report(paths: &[PathBuf], mode: DeltaMode, out: &Path) -> Result<()> {
    let mut by_paradigm: BTreeMap<Paradigm, MetricReport> = BTreeMap::new();
    for p in paths {
        let r = MetricReport::load(p)?;
        let paradigm: Paradigm = r.meta.paradigm.parse()?;
        if by_paradigm.insert(paradigm, r).is_some() {
            return Err(Error::Config(format!("two reports for paradigm {paradigm}")));
        }
    }
    let ts = by_paradigm
        .get(&Paradigm::Ts)
        .ok_or_else(|| Error::Config("report needs a ts baseline".into()))?;
    let (Some(cg), Some(au)) = (by_paradigm.get(&Paradigm::Cg), by_paradigm.get(&Paradigm::Au)) else {
        return Err(Error::Config("report needs cg and au reports".into()));
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // Compared over the tasks that have a single-task baseline.
    let restrict = |r: &MetricReport| {
        let mut r = r.clone();
        let ids = ts.task_ids();
        r.results.retain(|e| ids.contains(&e.task_id));
        r
    };
    let (cg, au) = (restrict(cg), restrict(au));
    let deltas: Vec<(Paradigm, DeltaReport)> = [(Paradigm::Cg, &cg), (Paradigm::Au, &au)]
        .into_iter()
        .map(|(p, r)| Ok((p, analysis::compare(ts, r, mode)?)))
        .collect::<Result<_>>()?;
    let mut images: BTreeMap<String, usize> = BTreeMap::new();
    for (task, n) in &au.meta.images {
        if let Some(g) = au.meta.groups.get(task) {
            *images.entry(g.clone()).or_default() += n;
        }
    }
    write(&out.join("groups.md"), &analysis::group_table_markdown(&deltas[0].1, &deltas[1].1, &images)?)?;
    for (p, d) in &deltas {
        d.render(analysis::RenderFormat::Csv, &out.join(format!("delta_{p}.csv")))?;
        d.render(analysis::RenderFormat::Json, &out.join(format!("delta_{p}.json")))?;
    }
    let tasks = ts.task_ids();
    let columns: Vec<&DeltaReport> = deltas.iter().map(|(_, d)| d).collect();
    analysis::render_heatmap(&out.join("heatmap.png"), &tasks, &columns)?;
    let series: Vec<(String, String)> = tasks
        .iter()
        .filter_map(|t| {
            analysis::PRIMARY_METRICS
                .iter()
                .find(|m| ts.get(t, m).is_some())
                .map(|m| (t.clone(), m.to_string()))
        })
        .collect();
    analysis::render_bar_chart(&out.join("bars.png"), &series, &[ts, &cg, &au])?;
    print!("{}", std::fs::read_to_string(out.join("groups.md")).unwrap_or_default());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { plan, seed, out, force } => synth(&plan, seed, &out, force),
        Command::Train {
            config,
            paradigm,
            seed,
            out,
            force,
            deterministic,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(p) = paradigm {
                cfg.paradigm = p;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            cfg.deterministic |= deterministic;
            train(cfg, force)
        }
        Command::Evaluate { checkpoint, split, out } => {
            let r = evaluate(&checkpoint, split)?;
            match out {
                Some(p) => r.save(&p),
                None => {
                    println!("{}", r.to_json()?);
                    Ok(())
                }
            }
        }
        Command::Analyze {
            ts_report,
            other_report,
            mode,
            out,
        } => analyze(&ts_report, &other_report, mode, &out),
        Command::Report { reports, mode, out } => report(&reports, mode, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
