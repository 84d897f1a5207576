//! The experiment commands. Every command writes its outputs into a
//! directory and returns the parsed results, so the same functions back the
//! CLI and the acceptance tests.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparling::annealing::{read_event_log, schedule_replay, write_event_log};
use sparling::datagen::{Dataset, DomainSpec};
use sparling::engine::Checkpoint;
use sparling::metrics::MetricsReport;
use sparling::models::{BottleneckKind, Model};
use sparling::training::{self, EvalSet};

use crate::config::RunConfig;
use crate::eval::evaluate;
use crate::stats::{bootstrap_ci, mean, spearman};

/// Metadata stored with every checkpoint written by the harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub domain: DomainSpec,
    pub seed: i64,
    pub examples: u64,
    pub validation_accuracy: f64,
    pub delta: Option<f64>,
}

/// Summary of one finished training run, evaluated on the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: i64,
    pub bottleneck: BottleneckKind,
    pub budget: u64,
    pub examples: u64,
    pub final_delta: Option<f64>,
    pub min_density: f64,
    pub reductions: u32,
    pub validation_accuracy: f64,
    pub test_seed: i64,
    pub test: MetricsReport,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `gen`: writes `count` samples of the stream for `seed`.
pub fn generate_dataset(spec: &DomainSpec, seed: i64, count: usize, out: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(spec.clone(), seed, count)?;
    ds.save(out)?;
    Ok(ds)
}

pub fn plateau_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("plateau_{index:02}.ckpt"))
}

fn save_checkpoint(model: &Model, adam: Option<&sparling::engine::Adam>, info: &CheckpointInfo, path: &Path) -> Result<()> {
    model
        .to_checkpoint(adam, serde_json::to_value(info)?)?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointInfo)> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let (model, _, extra) = Model::from_checkpoint(&ck)?;
    let info: CheckpointInfo = serde_json::from_value(extra)
        .map_err(sparling::Error::from)
        .context("checkpoint metadata")?;
    Ok((model, info))
}

/// `train`: runs the configured model, writing
/// `config.json`, `events.jsonl`, `curve.csv`, one `plateau_KK.ckpt` per
/// density plateau (sparsity models), `final.ckpt`, `report.json` and
/// `confusion.csv`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    let tc = cfg.train_config();
    let mut curve = fs::File::create(out.join("curve.csv"))?;
    writeln!(curve, "examples,mean_loss,accuracy,target,delta,density")?;
    let mut plateau = 0usize;
    let mut last_accuracy = 0.0;
    let result = training::train(&tc, |v| {
        let e = v.event;
        writeln!(
            curve,
            "{},{},{},{},{},{}",
            e.examples, v.mean_loss, e.accuracy, e.target, opt(v.delta_before), v.density
        )?;
        last_accuracy = e.accuracy;
        let info = CheckpointInfo {
            domain: cfg.domain.clone(),
            seed: cfg.seed,
            examples: e.examples,
            validation_accuracy: e.accuracy,
            delta: v.model.density_target(),
        };
        let io = |r: Result<()>| r.map_err(|e| sparling::Error::Validation(format!("{e:#}")));
        io(save_checkpoint(v.model, Some(v.adam), &info, &out.join("last.ckpt")))?;
        if v.model.sparsity.is_some() && (v.reduces || v.final_pass) {
            io(save_checkpoint(v.model, None, &info, &plateau_path(out, plateau)))?;
            plateau += 1;
        }
        Ok(())
    });
    let trained = match result {
        Ok(t) => t,
        Err(e) => {
            if matches!(e, sparling::Error::NonFinite(_)) {
                write_json(
                    &out.join("diagnostic.json"),
                    &serde_json::json!({
                        "error": e.to_string(),
                        "last_checkpoint": "last.ckpt",
                        "curve": "curve.csv",
                    }),
                )?;
            }
            return Err(e.into());
        }
    };
    let mut log = Vec::new();
    write_event_log(&mut log, trained.anneal.log())?;
    fs::write(out.join("events.jsonl"), log)?;
    let mut model = trained.model;
    let info = CheckpointInfo {
        domain: cfg.domain.clone(),
        seed: cfg.seed,
        examples: trained.anneal.examples(),
        validation_accuracy: last_accuracy,
        delta: model.density_target(),
    };
    save_checkpoint(&model, Some(&trained.adam), &info, &out.join("final.ckpt"))?;
    let _ = fs::remove_file(out.join("last.ckpt"));

    let test = EvalSet::generate(&cfg.domain, cfg.test_seed, cfg.test_size)?;
    let report = RunReport {
        seed: cfg.seed,
        bottleneck: cfg.model.bottleneck,
        budget: cfg.budget,
        examples: trained.anneal.examples(),
        final_delta: model.density_target(),
        min_density: cfg.domain.min_density(),
        reductions: trained.anneal.reductions(),
        validation_accuracy: last_accuracy,
        test_seed: cfg.test_seed,
        test: evaluate(&mut model, &test, &cfg.domain, cfg.eta)?,
    };
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("confusion.csv"), report.test.confusion_csv())?;
    Ok(report)
}

/// Where `eval` gets its examples from.
pub enum EvalSource<'a> {
    Seed { seed: i64, count: usize },
    File(&'a Path),
}

/// `eval`: metrics of a checkpoint on a generated or stored dataset.
pub fn eval_checkpoint(checkpoint: &Path, source: EvalSource<'_>, eta: f64) -> Result<MetricsReport> {
    let (mut model, info) = load_checkpoint(checkpoint)?;
    let set = match source {
        EvalSource::Seed { seed, count } => EvalSet::generate(&info.domain, seed, count)?,
        EvalSource::File(path) => {
            let ds = Dataset::load(path).with_context(|| format!("reading {}", path.display()))?;
            if ds.spec != info.domain {
                bail!(sparling::Error::InvalidSpec(
                    "dataset domain differs from the checkpoint's domain".into()
                ));
            }
            EvalSet::from_samples(ds.samples)?
        }
    };
    evaluate(&mut model, &set, &info.domain, eta)
}

/// One row of a density sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub plateau: usize,
    pub delta: f64,
    pub examples: u64,
    pub report: MetricsReport,
}

/// `sweep`: evaluates every plateau checkpoint of a run on its test set and
/// writes `sweep.csv`. Missing checkpoints are skipped with a warning.
/// A plateau opened by the final validation pass has no checkpoint and is
/// skipped silently.
pub fn sweep(run_dir: &Path) -> Result<(Vec<SweepRow>, Vec<String>)> {
    let cfg: RunConfig = read_json(&run_dir.join("config.json"))?;
    let events = read_event_log(BufReader::new(fs::File::open(run_dir.join("events.jsonl"))?))?;
    let delta0 = match cfg.model.bottleneck {
        BottleneckKind::Sparling { delta, .. } => delta,
        _ => bail!(sparling::Error::InvalidArgument("sweep needs a sparsity run".into())),
    };
    let plateaus = schedule_replay(&events, delta0)?;
    let test = EvalSet::generate(&cfg.domain, cfg.test_seed, cfg.test_size)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (k, &(start, delta)) in plateaus.iter().enumerate() {
        // A reduction on the last validation pass opens a plateau that was
        // never trained.
        if start >= cfg.budget {
            continue;
        }
        let path = plateau_path(run_dir, k);
        if !path.exists() {
            warnings.push(format!("missing {}", path.display()));
            continue;
        }
        let (mut model, info) = load_checkpoint(&path)?;
        if info.delta != Some(delta) {
            warnings.push(format!(
                "{} holds density {:?}, the event log says {delta}",
                path.display(),
                info.delta
            ));
        }
        rows.push(SweepRow {
            plateau: k,
            delta,
            examples: info.examples,
            report: evaluate(&mut model, &test, &cfg.domain, cfg.eta)?,
        });
    }
    let mut csv = String::from("plateau,delta,examples,fpe,fne,ce,e2ee,density,accuracy\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.plateau,
            r.delta,
            r.examples,
            opt(r.report.fpe),
            opt(r.report.fne),
            opt(r.report.ce),
            r.report.e2ee,
            r.report.density,
            r.report.accuracy
        );
    }
    fs::write(run_dir.join("sweep.csv"), csv)?;
    Ok((rows, warnings))
}

/// `retrain`: removes the thresholds of a finished sparsity run, freezes
/// its encoder and fine-tunes the decoder. Writes `retrained.ckpt` and
/// `retrain_report.json`.
pub fn retrain(run_dir: &Path, budget: Option<u64>) -> Result<RunReport> {
    let cfg: RunConfig = read_json(&run_dir.join("config.json"))?;
    let budget = budget.unwrap_or(cfg.retrain_budget);
    let (mut model, info) = load_checkpoint(&run_dir.join("final.ckpt"))?;
    let tc = cfg.train_config();
    let mut last_accuracy = 0.0;
    let anneal = training::retrain_head(&tc, &mut model, info.examples, budget, |v| {
        last_accuracy = v.event.accuracy;
        Ok(())
    })?;
    let out_info = CheckpointInfo {
        examples: anneal.examples(),
        validation_accuracy: last_accuracy,
        delta: None,
        ..info
    };
    save_checkpoint(&model, None, &out_info, &run_dir.join("retrained.ckpt"))?;
    let test = EvalSet::generate(&cfg.domain, cfg.test_seed, cfg.test_size)?;
    let report = RunReport {
        seed: cfg.seed,
        bottleneck: cfg.model.bottleneck,
        budget,
        examples: anneal.examples(),
        final_delta: None,
        min_density: cfg.domain.min_density(),
        reductions: 0,
        validation_accuracy: last_accuracy,
        test_seed: cfg.test_seed,
        test: evaluate(&mut model, &test, &cfg.domain, cfg.eta)?,
    };
    write_json(&run_dir.join("retrain_report.json"), &report)?;
    Ok(report)
}

/// Runs `cfg` into `dir` unless a finished report is already there.
pub fn train_or_reuse(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let report = dir.join("report.json");
    if report.exists() {
        let existing: RunConfig = read_json(&dir.join("config.json"))?;
        if &existing == cfg {
            return read_json(&report);
        }
    }
    train_run(cfg, dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub kind: String,
    pub lambda: Option<f64>,
    pub report: RunReport,
}

/// `baselines`: L1 runs over `lambdas`, one KL run and one sparsity run
/// under the same budget, tabulated into `baselines.csv`.
pub fn baselines(cfg: &RunConfig, lambdas: &[f64], kl: (f64, f64), out: &Path) -> Result<Vec<BaselineRow>> {
    if lambdas.is_empty() {
        bail!(sparling::Error::InvalidArgument("empty lambda grid".into()));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut c = cfg.clone();
        c.model.bottleneck = BottleneckKind::L1 { lambda };
        let report = train_or_reuse(&c, &out.join(format!("l1_{lambda}")))?;
        rows.push(BaselineRow {
            kind: "l1".into(),
            lambda: Some(lambda),
            report,
        });
    }
    let mut c = cfg.clone();
    c.model.bottleneck = BottleneckKind::Kl {
        lambda: kl.0,
        rho: kl.1,
    };
    rows.push(BaselineRow {
        kind: "kl".into(),
        lambda: Some(kl.0),
        report: train_or_reuse(&c, &out.join("kl"))?,
    });
    rows.push(BaselineRow {
        kind: "sparling".into(),
        lambda: None,
        report: train_or_reuse(cfg, &out.join("sparling"))?,
    });
    fs::write(out.join("baselines.csv"), baselines_csv(&rows))?;
    Ok(rows)
}

pub fn baselines_csv(rows: &[BaselineRow]) -> String {
    let mut csv = String::from("kind,lambda,fpe,fne,ce,e2ee,density\n");
    for r in rows {
        let t = &r.report.test;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.kind,
            opt(r.lambda),
            opt(t.fpe),
            opt(t.fne),
            opt(t.ce),
            t.e2ee,
            t.density
        );
    }
    csv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<i64>,
    pub e2ee: MetricSummary,
    pub fpe: MetricSummary,
    pub fne: MetricSummary,
    pub ce: MetricSummary,
    pub density: MetricSummary,
    /// Rank correlation of end-to-end and confusion error across seeds.
    pub spearman_e2ee_ce: Option<f64>,
    pub spearman_e2ee_fpe: Option<f64>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

fn summarize(values: Vec<f64>) -> MetricSummary {
    let (ci_low, ci_high) = bootstrap_ci(&values, BOOTSTRAP_RESAMPLES, 0.95, 0);
    MetricSummary {
        mean: mean(&values),
        ci_low,
        ci_high,
        values,
    }
}

/// `aggregate`: seed-level summary of finished runs, written to
/// `aggregate.json` and `scatter.csv` in `out`.
pub fn aggregate(run_dirs: &[PathBuf], out: &Path) -> Result<Aggregate> {
    if run_dirs.len() < 2 {
        bail!(sparling::Error::InvalidArgument("aggregate needs at least two runs".into()));
    }
    let mut reference: Option<RunConfig> = None;
    let mut reports = Vec::new();
    for dir in run_dirs {
        let cfg: RunConfig = read_json(&dir.join("config.json"))?;
        match &reference {
            None => reference = Some(cfg.without_seed()),
            Some(r) if *r != cfg.without_seed() => bail!(sparling::Error::InvalidArgument(format!(
                "{} was run with a different configuration",
                dir.display()
            ))),
            _ => {}
        }
        reports.push(read_json::<RunReport>(&dir.join("report.json"))?);
    }
    let undefined_as_one = |v: Option<f64>| v.unwrap_or(1.0);
    let pick = |f: &dyn Fn(&RunReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
    let e2ee = pick(&|r| r.test.e2ee);
    let ce = pick(&|r| undefined_as_one(r.test.ce));
    let fpe = pick(&|r| undefined_as_one(r.test.fpe));
    let agg = Aggregate {
        runs: reports.len(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        spearman_e2ee_ce: spearman(&e2ee, &ce),
        spearman_e2ee_fpe: spearman(&e2ee, &fpe),
        e2ee: summarize(e2ee),
        fpe: summarize(fpe),
        fne: summarize(pick(&|r| undefined_as_one(r.test.fne))),
        ce: summarize(ce),
        density: summarize(pick(&|r| r.test.density)),
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("aggregate.json"), &agg)?;
    let mut csv = String::from("seed,e2ee,ce,fpe,fne,density\n");
    for r in &reports {
        let t = &r.test;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.seed,
            t.e2ee,
            opt(t.ce),
            opt(t.fpe),
            opt(t.fne),
            t.density
        );
    }
    fs::write(out.join("scatter.csv"), csv)?;
    Ok(agg)
}
