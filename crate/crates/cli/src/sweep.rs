//! Seed and grid sweeps: run every (grid point, seed) pair, select the run
//! with the lowest training error, and persist reports and artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use moe_core::data::{balanced_subsample, load_split, merge_fmnist_mnist, Dataset, Split, FMNIST_CLASSES};
use moe_core::model::{load_checkpoint, save_checkpoint, ExpertNet, GateKind, MoeModel, Network, Topology};
use moe_core::tensor::{streams, Rng};
use moe_core::train::{distill_init, train, RunReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig, GridPoint, Regime};
use crate::error::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
const PGM_CELL: usize = 16;

/// Train and test sets shared by every run of a sweep.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

fn require(dir: &Path) -> Vec<PathBuf> {
    [Split::Train, Split::Test]
        .into_iter()
        .flat_map(|s| {
            let (a, b) = s.files(dir);
            [a, b]
        })
        .filter(|p| !p.is_file())
        .collect()
}

fn subsample(ds: Dataset, n: Option<usize>, seed: u64) -> Result<Dataset, CliError> {
    match n {
        Some(n) if n < ds.len() => Ok(balanced_subsample(&ds, n, seed)?),
        _ => Ok(ds),
    }
}

/// Load the configured dataset and draw its class-balanced subsamples.
/// Missing IDX files are reported together before anything is read.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data, CliError> {
    let root = cfg.data_root();
    let (mnist, fmnist) = (root.join("mnist"), root.join("fmnist"));
    let mut missing = Vec::new();
    if cfg.dataset != DatasetKind::Fmnist {
        missing.extend(require(&mnist));
    }
    if cfg.dataset != DatasetKind::Mnist {
        missing.extend(require(&fmnist));
    }
    if !missing.is_empty() {
        return Err(CliError::MissingData(missing));
    }
    let load_fm =
        |split| -> Result<Dataset, CliError> { Ok(load_split(&fmnist, split)?.with_class_names(&FMNIST_CLASSES)?) };
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => (load_split(&mnist, Split::Train)?, load_split(&mnist, Split::Test)?),
        DatasetKind::Fmnist => (load_fm(Split::Train)?, load_fm(Split::Test)?),
        DatasetKind::Combined => (
            merge_fmnist_mnist(&load_fm(Split::Train)?, &load_split(&mnist, Split::Train)?)?,
            merge_fmnist_mnist(&load_fm(Split::Test)?, &load_split(&mnist, Split::Test)?)?,
        ),
    };
    Ok(Data {
        train: subsample(train, cfg.train_size, cfg.data_seed)?,
        test: subsample(test, cfg.test_size, cfg.data_seed)?,
    })
}

/// Model topology for the configured dataset and gate.
pub fn topology(cfg: &ExperimentConfig, gate: GateKind) -> Topology {
    let t = match cfg.dataset {
        DatasetKind::Combined => Topology::combined(cfg.experts, gate),
        _ => Topology::mnist(cfg.experts, 10, gate),
    };
    t.with_output_relu(cfg.output_relu)
}

/// Load and check the attentive source model of a distillation sweep.
pub fn load_source(cfg: &ExperimentConfig, classes: usize) -> Result<MoeModel, CliError> {
    let path = cfg
        .source_checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("source_checkpoint: missing".into()))?;
    let bad = |msg: String| CliError::Config(format!("source_checkpoint: {}: {msg}", path.display()));
    let net = load_checkpoint(path).map_err(|e| bad(e.to_string()))?;
    let model = net.into_moe().ok_or_else(|| bad("not a mixture model".into()))?;
    if model.topology().gate != GateKind::Attentive {
        return Err(bad("distillation needs an attentive-gated source".into()));
    }
    if model.topology().classes() != classes {
        return Err(bad(format!(
            "source predicts {} classes but the dataset has {classes}",
            model.topology().classes()
        )));
    }
    Ok(model)
}

/// Untrained network of one run.
pub fn initial_network(cfg: &ExperimentConfig, source: Option<&MoeModel>, seed: u64) -> Result<Network, CliError> {
    if let Some(src) = source {
        return Ok(Network::Moe(distill_init(src, seed)?));
    }
    Ok(match cfg.kind.gate() {
        None => {
            let arch = topology(cfg, GateKind::Softmax).expert;
            Network::Single(ExpertNet::new(arch, &mut Rng::stream(seed, streams::INIT)))
        }
        Some(gate) => Network::Moe(MoeModel::new(topology(cfg, gate), seed)?),
    })
}

/// A finished run, kept in memory until the sweep is written out.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub point: GridPoint,
    pub seed: u64,
    pub report: RunReport,
    pub net: Network,
}

/// Run every (grid point, seed) pair, `threads` at a time (`None`: one per
/// core). Outcomes come back in grid-major, seed-minor order whatever the
/// scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, data: &Data, threads: Option<usize>) -> Result<Vec<RunOutcome>, CliError> {
    let source = match cfg.kind.is_distill() {
        true => Some(load_source(cfg, data.train.num_classes())?),
        false => None,
    };
    let jobs: Vec<(GridPoint, u64)> = cfg
        .grid_points()
        .into_iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    let run_one = |(point, seed): &(GridPoint, u64)| -> Result<RunOutcome, CliError> {
        let tcfg = cfg.train_config(point, *seed);
        let mut net = initial_network(cfg, source.as_ref(), *seed)?;
        let report = train(&mut net, &data.train, &data.test, &tcfg)?;
        eprintln!(
            "[{} {} seed {seed}] train error {:.4}, test error {:.4}, {:.1}s",
            cfg.name,
            point.label,
            report.train_error(),
            report.test_error(),
            report.wall_time_secs
        );
        Ok(RunOutcome {
            point: point.clone(),
            seed: *seed,
            report,
            net,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    pool.install(|| jobs.par_iter().map(run_one).collect())
}

/// Index of the first run with the lowest training error.
pub fn select_min_train_error(train_errors: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in train_errors.iter().enumerate() {
        if best.is_none_or(|b| e < train_errors[b]) {
            best = Some(i);
        }
    }
    best
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub point: String,
    pub seed: u64,
    pub train_error: f64,
    pub test_error: f64,
    /// Report path relative to the sweep directory.
    pub report: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub point: GridPoint,
    pub test_error_mean: f64,
    pub test_error_std: f64,
}

/// Everything `summary.json` records about a finished sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub kind: Regime,
    pub dataset: DatasetKind,
    pub runs: Vec<RunEntry>,
    pub points: Vec<PointStats>,
    /// Index into `runs` of the min-train-error run.
    pub selected: usize,
    /// Test error over the seeds of the selected grid point.
    pub test_error_mean: f64,
    pub test_error_std: f64,
}

fn point_dir(label: &str, seed: u64) -> PathBuf {
    Path::new("runs").join(label).join(format!("seed-{seed}"))
}

impl SweepSummary {
    pub fn new(cfg: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<Self, CliError> {
        let runs: Vec<RunEntry> = outcomes
            .iter()
            .map(|o| RunEntry {
                point: o.point.label.clone(),
                seed: o.seed,
                train_error: o.report.train_error(),
                test_error: o.report.test_error(),
                report: point_dir(&o.point.label, o.seed).join(REPORT_FILE),
            })
            .collect();
        let points: Vec<PointStats> = cfg
            .grid_points()
            .into_iter()
            .map(|p| {
                let errs: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.point == p.label)
                    .map(|r| r.test_error)
                    .collect();
                let (m, s) = mean_std(&errs);
                PointStats {
                    point: p,
                    test_error_mean: m,
                    test_error_std: s,
                }
            })
            .collect();
        let train_errors: Vec<f64> = runs.iter().map(|r| r.train_error).collect();
        let selected =
            select_min_train_error(&train_errors).ok_or_else(|| CliError::Usage("sweep produced no runs".into()))?;
        let stats = points
            .iter()
            .find(|p| p.point.label == runs[selected].point)
            .expect("selected run belongs to a grid point");
        Ok(SweepSummary {
            name: cfg.name.clone(),
            kind: cfg.kind,
            dataset: cfg.dataset,
            test_error_mean: stats.test_error_mean,
            test_error_std: stats.test_error_std,
            runs,
            points,
            selected,
        })
    }

    pub fn selected_run(&self) -> &RunEntry {
        &self.runs[self.selected]
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// Write a report and read it back, checking it parses, validates and
/// echoes the configuration it was trained with.
fn write_report(path: &Path, report: &RunReport, expected: &moe_core::train::TrainConfig) -> Result<(), CliError> {
    write(path, report.to_json())?;
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let bad = |msg: String| CliError::Report {
        path: path.to_path_buf(),
        msg,
    };
    let back = RunReport::from_json(&text).map_err(|e| bad(e.to_string()))?;
    if back.config != *expected {
        return Err(bad("config echo differs from the run configuration".into()));
    }
    if back != *report {
        return Err(bad("report changed on a write/read round trip".into()));
    }
    Ok(())
}

/// Make `out` an empty directory, refusing to touch an existing non-empty
/// one unless `overwrite` is set.
pub fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<(), CliError> {
    let occupied = out.exists() && fs::read_dir(out).map_err(CliError::io(out))?.next().is_some();
    if occupied {
        if !overwrite {
            return Err(CliError::OutputExists(out.to_path_buf()));
        }
        fs::remove_dir_all(out).map_err(CliError::io(out))?;
    }
    fs::create_dir_all(out).map_err(CliError::io(out))
}

/// Persist a finished sweep under `out`.
pub fn write_sweep(out: &Path, cfg: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<SweepSummary, CliError> {
    write(&out.join("config.json"), cfg.to_json())?;
    for o in outcomes {
        let dir = out.join(point_dir(&o.point.label, o.seed));
        write_report(&dir.join(REPORT_FILE), &o.report, &cfg.train_config(&o.point, o.seed))?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &o.net)?;
    }
    let summary = SweepSummary::new(cfg, outcomes)?;
    let best = &outcomes[summary.selected];
    let sel = out.join("selected");
    write_report(
        &sel.join(REPORT_FILE),
        &best.report,
        &cfg.train_config(&best.point, best.seed),
    )?;
    save_checkpoint(&sel.join(CHECKPOINT_FILE), &best.net)?;
    for (split, m) in [("train", &best.report.train), ("test", &best.report.test)] {
        write(&sel.join(format!("selection_{split}.csv")), m.table.to_csv())?;
        write(&sel.join(format!("selection_{split}.pgm")), m.table.to_pgm(PGM_CELL))?;
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out.join(SUMMARY_FILE), json)?;
    Ok(summary)
}

/// Output directory: explicit `--out`, else the config's `out`, else
/// `runs/<name>`.
pub fn resolve_out(cfg: &ExperimentConfig, cli_out: Option<&Path>) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

/// The whole `run` verb: check inputs, train, write.
pub fn run(
    cfg: &ExperimentConfig,
    out: &Path,
    overwrite: bool,
    threads: Option<usize>,
) -> Result<SweepSummary, CliError> {
    let data = load_data(cfg)?;
    if cfg.kind.is_distill() {
        load_source(cfg, data.train.num_classes())?;
    }
    prepare_out_dir(out, overwrite)?;
    let outcomes = run_sweep(cfg, &data, threads)?;
    write_sweep(out, cfg, &outcomes)
}
