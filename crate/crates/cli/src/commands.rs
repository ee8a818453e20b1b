//! The five commands. Each has a `run_*` function that computes in memory
//! and an `execute` path that also writes the run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use selflearn::adaptation::{
    adapt_each, adapt_online, error_grid, evaluate, evaluate_source_retention, static_errors, sweep, OnlineRecord, Outcome,
    SweepResult, Trajectory,
};
use selflearn::data::{benchmark_suite, BenchmarkSuite, Dataset, DomainTag};
use selflearn::metrics::{ece, normalized_mean_error, top1_error, ErrorGrid, NormalizerTable};
use selflearn::network::{BnMode, Network};
use selflearn::seed;
use selflearn::training::{train_source, TrainReport};
use selflearn::twopoint::{log_space, phase_diagram, CollapseVerdict, PhaseDiagram, Variant};

use crate::config::{ExperimentConfig, Verb};
use crate::record::{pretty, RunDir, RunOutcome, RunRecord};
use crate::CliError;

/// Severity whose datasets feed the calibration and source-retention
/// metrics.
pub const REPORT_SEVERITY: u8 = 5;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn suite(cfg: &ExperimentConfig) -> Result<BenchmarkSuite, CliError> {
    Ok(benchmark_suite(&cfg.suite_config())?)
}

pub struct TrainOutput {
    pub network: Network,
    pub report: TrainReport,
    pub train_error: f64,
    pub val_error: f64,
}

/// Trains the reference architecture on the suite's clean source data.
pub fn run_train_source(cfg: &ExperimentConfig, suite: &BenchmarkSuite) -> Result<TrainOutput, CliError> {
    let s = cfg.suite_config();
    let mut network = Network::reference(s.dim, s.classes, &mut seed::rng(cfg.seed, "init"))?;
    let report = train_source(&mut network, &suite.source_train, &cfg.train_config())?;
    let err = |ds: &Dataset| -> Result<f64, CliError> { Ok(top1_error(&evaluate(&network, ds, BnMode::Source, ds.len())?)) };
    Ok(TrainOutput {
        train_error: err(&suite.source_train)?,
        val_error: err(&suite.source_val)?,
        network,
        report,
    })
}

/// The configured source network, or a freshly trained one.
fn source_network(cfg: &ExperimentConfig, suite: &BenchmarkSuite) -> Result<Network, CliError> {
    match &cfg.adapt.network {
        Some(path) => {
            let net = Network::load(path)?;
            if net.input_dim() != cfg.suite.dim || net.classes() != cfg.suite.classes {
                return Err(CliError::Config(format!(
                    "network {} has shape {}->{}, suite needs {}->{}",
                    path.display(),
                    net.input_dim(),
                    net.classes(),
                    cfg.suite.dim,
                    cfg.suite.classes
                )));
            }
            Ok(net)
        }
        None => Ok(run_train_source(cfg, suite)?.network),
    }
}

pub enum AdaptRuns {
    Offline(Vec<(Network, Trajectory)>),
    Online(Vec<(Network, Vec<OnlineRecord>, Outcome)>),
}

pub struct AdaptOutput {
    pub source: Network,
    pub tags: Vec<DomainTag>,
    pub unadapted: Vec<f64>,
    pub bn_adapted: Vec<f64>,
    /// Final error per dataset: after the last completed epoch, or the
    /// stream-average error in online mode.
    pub adapted: Vec<f64>,
    pub runs: AdaptRuns,
    pub ece_adapted: Vec<f64>,
    pub ece_unadapted: Vec<f64>,
    pub source_error_baseline: f64,
    pub source_error_adapted: Vec<f64>,
    pub divergences: Vec<String>,
}

impl AdaptOutput {
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("unadapted_mean_error".into(), mean(&self.unadapted));
        m.insert("bn_adapt_mean_error".into(), mean(&self.bn_adapted));
        m.insert("adapted_mean_error".into(), mean(&self.adapted));
        m.insert("ece_adapted_severity5".into(), mean(&self.ece_adapted));
        m.insert("ece_unadapted_severity5".into(), mean(&self.ece_unadapted));
        m.insert("source_error_baseline".into(), self.source_error_baseline);
        m.insert("source_error_adapted_severity5".into(), mean(&self.source_error_adapted));
        m.insert("diverged_runs".into(), self.divergences.len() as f64);
        m
    }

    pub fn networks(&self) -> Vec<&Network> {
        match &self.runs {
            AdaptRuns::Offline(r) => r.iter().map(|(n, _)| n).collect(),
            AdaptRuns::Online(r) => r.iter().map(|(n, ..)| n).collect(),
        }
    }
}

/// Adapts a copy of the source network to every dataset of the configured
/// split and scores it against the unadapted and BN-adapted baselines.
pub fn run_adapt(cfg: &ExperimentConfig, suite: &BenchmarkSuite) -> Result<AdaptOutput, CliError> {
    let source = source_network(cfg, suite)?;
    let sets = suite.split(cfg.adapt.split);
    let acfg = cfg.adapt_config();
    let bs = acfg.batch_size;
    let unadapted = static_errors(&source, sets, BnMode::Source, bs)?;
    let bn_adapted = static_errors(&source, sets, BnMode::TargetBatch, bs)?;
    let mut divergences = Vec::new();
    let (runs, adapted) = if cfg.adapt.online {
        let runs = sets
            .iter()
            .map(|ds| adapt_online(&source, ds, &acfg))
            .collect::<selflearn::Result<Vec<_>>>()?;
        let mut errs = Vec::new();
        for (ds, (_, records, outcome)) in sets.iter().zip(&runs) {
            if let Outcome::Diverged { reason, .. } = outcome {
                divergences.push(format!("{}: {reason}", ds.tag));
            }
            let e: Vec<f64> = records.iter().map(|r| r.error).collect();
            errs.push(if e.is_empty() { f64::NAN } else { mean(&e) });
        }
        (AdaptRuns::Online(runs), errs)
    } else {
        let runs = adapt_each(&source, sets, &acfg)?;
        let mut errs = Vec::new();
        for (ds, (_, traj)) in sets.iter().zip(&runs) {
            if let Outcome::Diverged { reason, .. } = &traj.outcome {
                divergences.push(format!("{}: {reason}", ds.tag));
            }
            errs.push(traj.all_records().last().expect("initial record").target_error);
        }
        (AdaptRuns::Offline(runs), errs)
    };
    let nets: Vec<&Network> = match &runs {
        AdaptRuns::Offline(r) => r.iter().map(|(n, _)| n).collect(),
        AdaptRuns::Online(r) => r.iter().map(|(n, ..)| n).collect(),
    };
    let mut ece_adapted = Vec::new();
    let mut ece_unadapted = Vec::new();
    let mut source_error_adapted = Vec::new();
    for (ds, net) in sets.iter().zip(&nets) {
        if ds.tag.severity != REPORT_SEVERITY {
            continue;
        }
        ece_adapted.push(ece(&evaluate(net, ds, acfg.bn, bs)?, cfg.adapt.ece_bins)?);
        ece_unadapted.push(ece(&evaluate(&source, ds, BnMode::Source, bs)?, cfg.adapt.ece_bins)?);
        source_error_adapted.push(evaluate_source_retention(net, &suite.source_val)?);
    }
    let source_error_baseline = evaluate_source_retention(&source, &suite.source_val)?;
    Ok(AdaptOutput {
        tags: sets.iter().map(|d| d.tag.clone()).collect(),
        source,
        unadapted,
        bn_adapted,
        adapted,
        runs,
        ece_adapted,
        ece_unadapted,
        source_error_baseline,
        source_error_adapted,
        divergences,
    })
}

pub struct SweepOutput {
    pub result: SweepResult,
    /// Per loss name: index of its best cell.
    pub best_per_loss: BTreeMap<String, usize>,
    /// Dev error of each dataset under the selected configuration.
    pub best_dev_errors: Vec<f64>,
    pub dev_tags: Vec<DomainTag>,
}

pub fn run_sweep(cfg: &ExperimentConfig, suite: &BenchmarkSuite) -> Result<SweepOutput, CliError> {
    let source = source_network(cfg, suite)?;
    let result = sweep(&source, &suite.dev, &cfg.sweep_grid(), &cfg.adapt_config())?;
    let mut best_per_loss: BTreeMap<String, usize> = BTreeMap::new();
    for (i, c) in result.cells.iter().enumerate() {
        let Some(e) = c.best_error else { continue };
        let slot = best_per_loss.entry(c.loss.name().to_string()).or_insert(i);
        if e < result.cells[*slot].best_error.expect("scored cell") {
            *slot = i;
        }
    }
    let runs = adapt_each(&source, &suite.dev, &result.best)?;
    let best_dev_errors = runs
        .iter()
        .map(|(_, t)| t.all_records().last().expect("initial record").target_error)
        .collect();
    Ok(SweepOutput {
        result,
        best_per_loss,
        best_dev_errors,
        dev_tags: suite.dev.iter().map(|d| d.tag.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScore {
    pub table: String,
    /// Normalized mean error in percent.
    pub normalized_mean_error: f64,
    /// Per-shift ratio of summed errors, in percent.
    pub per_shift: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub normalizer: String,
    pub models: Vec<ModelScore>,
}

pub fn run_score(cfg: &ExperimentConfig) -> Result<ScoreReport, CliError> {
    if cfg.score.models.is_empty() {
        return Err(CliError::Config("score needs at least one model table".into()));
    }
    let (normalizer, base) = match &cfg.score.normalizer {
        Some(p) => (p.display().to_string(), NormalizerTable::read_csv(p)?),
        None => ("builtin:alexnet_imagenet_c_v1".to_string(), NormalizerTable::alexnet_imagenet_c()),
    };
    let mut models = Vec::new();
    for path in &cfg.score.models {
        let table = ErrorGrid::read_csv(path)?;
        let nme = normalized_mean_error(&table, &base)?;
        let mut per_shift = BTreeMap::new();
        for shift in table.shifts() {
            let one = |g: &ErrorGrid| -> selflearn::Result<ErrorGrid> {
                ErrorGrid::from_entries(g.entries().filter(|(s, ..)| s == shift).map(|(s, v, e)| (s.to_string(), v, e)))
            };
            let ratio = normalized_mean_error(&one(&table)?, &NormalizerTable::new(one(base.grid())?)?)?;
            per_shift.insert(shift.clone(), 100.0 * ratio);
        }
        models.push(ModelScore {
            table: path.display().to_string(),
            normalized_mean_error: 100.0 * nme,
            per_shift,
        });
    }
    Ok(ScoreReport { normalizer, models })
}

pub fn run_phase_diagram(cfg: &ExperimentConfig) -> Result<Vec<PhaseDiagram>, CliError> {
    let ph = &cfg.phase;
    let taus = log_space(ph.tau_min, ph.tau_max, ph.points);
    ph.variants
        .iter()
        .map(|&v| Ok(phase_diagram(&taus, &taus, &ph.template, v, ph.collapse_tol)?))
        .collect()
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::StopGradient => "stop_gradient",
        Variant::NoStopGradient => "no_stop_gradient",
    }
}

fn write_grid(dir: &mut RunDir, name: &str, grid: &ErrorGrid) -> Result<(), CliError> {
    let mut out = String::from("shift,severity,error\n");
    for (shift, severity, error) in grid.entries() {
        writeln!(out, "{shift},{severity},{error:?}").expect("string write");
    }
    dir.write(name, &out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn trajectory_csv(tags: &[DomainTag], runs: &AdaptRuns) -> String {
    let mut out = String::new();
    match runs {
        AdaptRuns::Offline(runs) => {
            out.push_str("shift,severity,epoch,loss,target_error,mean_entropy,skipped_fraction\n");
            for (tag, (_, traj)) in tags.iter().zip(runs) {
                for r in traj.all_records() {
                    writeln!(
                        out,
                        "{},{},{},{},{:?},{:?},{:?}",
                        tag.shift,
                        tag.severity,
                        r.epoch,
                        opt(r.loss),
                        r.target_error,
                        r.mean_entropy,
                        r.skipped_fraction
                    )
                    .expect("string write");
                }
            }
        }
        AdaptRuns::Online(runs) => {
            out.push_str("shift,severity,batch,error,loss\n");
            for (tag, (_, records, _)) in tags.iter().zip(runs) {
                for r in records {
                    writeln!(out, "{},{},{},{:?},{}", tag.shift, tag.severity, r.batch, r.error, opt(r.loss))
                        .expect("string write");
                }
            }
        }
    }
    out
}

/// Runs `verb` with `cfg` (whose `command` is set to `verb`) and writes
/// `<out>/<hash>/`. A diverged run still produces its directory and record.
pub fn execute(verb: Verb, cfg: &ExperimentConfig, out: &Path) -> Result<(RunRecord, std::path::PathBuf), CliError> {
    let mut cfg = cfg.clone();
    cfg.command = Some(verb);
    cfg.validate()?;
    let start = Instant::now();
    let mut dir = RunDir::create(out, &cfg)?;
    let mut metrics = BTreeMap::new();
    let mut outcome = RunOutcome::Ok;
    match verb {
        Verb::TrainSource => {
            let suite = suite(&cfg)?;
            match run_train_source(&cfg, &suite) {
                Ok(t) => {
                    dir.save_network("network.json", &t.network)?;
                    let mut traj = String::from("epoch,loss\n");
                    for (i, l) in t.report.epoch_losses.iter().enumerate() {
                        writeln!(traj, "{},{l:?}", i + 1).expect("string write");
                    }
                    dir.write("trajectory.csv", &traj)?;
                    let grid = ErrorGrid::from_entries([("clean".to_string(), 0, t.val_error)])?;
                    write_grid(&mut dir, "errors.csv", &grid)?;
                    metrics.insert("source_train_error".into(), t.train_error);
                    metrics.insert("source_val_error".into(), t.val_error);
                    if let Some(&l) = t.report.epoch_losses.last() {
                        metrics.insert("final_loss".into(), l);
                    }
                }
                Err(CliError::Core(selflearn::Error::NonFinite(what))) => {
                    outcome = RunOutcome::Diverged {
                        detail: format!("non-finite {what}"),
                    };
                }
                Err(e) => return Err(e),
            }
        }
        Verb::Adapt => {
            let suite = suite(&cfg)?;
            let res = run_adapt(&cfg, &suite)?;
            let sets = suite.split(cfg.adapt.split);
            write_grid(&mut dir, "errors.csv", &error_grid(sets, &res.adapted)?)?;
            write_grid(&mut dir, "errors_unadapted.csv", &error_grid(sets, &res.unadapted)?)?;
            write_grid(&mut dir, "errors_bn_adapt.csv", &error_grid(sets, &res.bn_adapted)?)?;
            dir.write("trajectory.csv", &trajectory_csv(&res.tags, &res.runs))?;
            dir.save_network("source_network.json", &res.source)?;
            for (tag, net) in res.tags.iter().zip(res.networks()) {
                dir.save_network(&format!("networks/{}_{}.json", tag.shift, tag.severity), net)?;
            }
            metrics = res.metrics();
            if !res.divergences.is_empty() {
                outcome = RunOutcome::Diverged {
                    detail: res.divergences.join("; "),
                };
            }
        }
        Verb::Sweep => {
            let suite = suite(&cfg)?;
            let res = run_sweep(&cfg, &suite)?;
            let r = &res.result;
            let mut grid = String::from("loss,lr,best_epoch,best_error,diverged\n");
            let mut traj = String::from("loss,lr,epoch,dev_error\n");
            for c in &r.cells {
                writeln!(
                    grid,
                    "{},{:?},{},{},{}",
                    c.loss.name(),
                    c.lr,
                    c.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                    opt(c.best_error),
                    c.diverged
                )
                .expect("string write");
                writeln!(traj, "{},{:?},0,{:?}", c.loss.name(), c.lr, r.baseline_error).expect("string write");
                for (i, e) in c.epoch_errors.iter().enumerate() {
                    writeln!(traj, "{},{:?},{},{e:?}", c.loss.name(), c.lr, i + 1).expect("string write");
                }
            }
            dir.write("grid.csv", &grid)?;
            dir.write("trajectory.csv", &traj)?;
            write_grid(&mut dir, "errors.csv", &error_grid(&suite.dev, &res.best_dev_errors)?)?;
            let mut best = cfg.clone();
            best.command = None;
            best.adapt.loss = r.best.loss;
            best.adapt.lr = r.best.lr;
            best.adapt.epochs = r.best.epochs;
            best.adapt.split = selflearn::data::Split::Dev;
            dir.write("best_config.json", &pretty(&serde_json::to_value(&best).expect("config serializes")))?;
            metrics.insert("baseline_dev_error".into(), r.baseline_error);
            metrics.insert("best_dev_error".into(), r.cells[r.best_index].best_error.expect("selected cell"));
            metrics.insert("best_lr".into(), r.best.lr);
            metrics.insert("best_epoch".into(), r.best.epochs as f64);
            metrics.insert("grid_cells".into(), r.cells.len() as f64);
            for (name, &i) in &res.best_per_loss {
                let c = &r.cells[i];
                metrics.insert(format!("best_dev_error/{name}"), c.best_error.expect("scored cell"));
                metrics.insert(format!("best_lr/{name}"), c.lr);
                metrics.insert(format!("best_epoch/{name}"), c.best_epoch.expect("scored cell") as f64);
            }
        }
        Verb::Score => {
            let report = run_score(&cfg)?;
            dir.write("report.json", &pretty(&serde_json::to_value(&report).expect("report serializes")))?;
            for m in &report.models {
                let stem = Path::new(&m.table)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| m.table.clone());
                metrics.insert(format!("normalized_mean_error/{stem}"), m.normalized_mean_error);
            }
        }
        Verb::PhaseDiagram => {
            for pd in run_phase_diagram(&cfg)? {
                let name = variant_name(pd.variant);
                dir.write(&format!("phase_{name}.csv"), &pd.to_csv())?;
                if cfg.phase.pgm {
                    dir.write(&format!("phase_{name}.pgm"), &pd.to_pgm())?;
                }
                let collapsed = pd.cells.iter().filter(|c| c.simulated == CollapseVerdict::Collapsed).count();
                metrics.insert(format!("collapsed_cells/{name}"), collapsed as f64);
                metrics.insert(format!("containment_violations/{name}"), pd.containment_violations().len() as f64);
            }
        }
    }
    let record = dir.finish(verb.as_str(), &cfg, metrics, start.elapsed().as_secs_f64(), outcome)?;
    let path = out.join(&record.config_hash);
    Ok((record, path))
}
