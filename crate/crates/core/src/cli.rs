//! The `smoothcert` command line and the pipeline steps behind it.
//!
//! Each step reads an [`ExperimentConfig`] and writes its artifacts into an
//! output directory:
//!
//! | step      | writes |
//! |-----------|--------|
//! | pretrain  | `pretrain.smck`, `pretrain_report.csv` (+ `pretrain_lr_<lr>_report.csv`, `pretrain_sweep.csv` with a sweep) |
//! | finetune  | `finetune.smck`, `finetune_report.csv` (same sweep files) |
//! | certify   | `predictions.csv`, `certify_sigma_<σ>.csv`, `curves.csv`, `summary.txt` |
//! | report    | comparison table on stdout, `comparison.txt` / `comparison.csv` with `--out` |

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::certify::certify_all;
use crate::checkpoint;
use crate::config::{ExperimentConfig, SeedRole};
use crate::data::Dataset;
use crate::error::Error;
use crate::nn::Model;
use crate::report::{self, CertRecord, CurveTable, PredictionRecord, RunSummary};
use crate::selftest;
use crate::trainer::{self, TrainFailure, TrainOutcome, TrainPlan, TrainReport};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INVALID_CONFIG: u8 = 2;
pub const EXIT_TRAINING_FAILED: u8 = 3;
pub const EXIT_MISSING_CHECKPOINT: u8 = 4;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.smck";
pub const FINETUNE_CHECKPOINT: &str = "finetune.smck";
pub const PREDICTIONS: &str = "predictions.csv";
pub const CURVES: &str = "curves.csv";

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CommandError {
    pub code: u8,
    pub error: Error,
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CommandError {}

impl From<Error> for CommandError {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Invalid { .. } => EXIT_INVALID_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

type CmdResult<T> = std::result::Result<T, CommandError>;

#[derive(Debug, Parser)]
#[command(name = "smoothcert", version, about = "Mixed-noise pretraining, clean fine-tuning and certified-robustness evaluation")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the upstream task with the configured noise mix.
    Pretrain(RunArgs),
    /// Replace the head and fine-tune on the downstream task.
    Finetune(RunArgs),
    /// Certify the smoothed classifier at every configured sigma.
    Certify(RunArgs),
    /// Compare certified-accuracy curves of finished runs.
    Report {
        /// Run directories containing certification CSVs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write comparison.txt and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical oracle suites.
    Selftest {
        /// Exhaustive sweep (every k, n <= 1000; 10^6 quantile timings).
        #[arg(long)]
        full: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn ensure_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn load_checkpoint(path: &Path) -> CmdResult<Model<f32>> {
    checkpoint::load(path).map_err(|error| {
        let code = match &error {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        CommandError { code, error }
    })
}

/// Artifacts of a training step.
pub struct StageArtifacts {
    pub checkpoint: PathBuf,
    pub report: TrainReport,
    pub model: Model<f32>,
}

fn lr_tag(lr: f64) -> String {
    format!("{lr}")
}

/// Train (optionally across a learning-rate sweep), write reports, and save
/// the chosen model as `<stage>.smck`. Divergence saves the last finite
/// model as `<stage>_failed.smck` and exits with the training-failure code.
fn train_stage(
    stage: &str,
    model: Model<f32>,
    train: &Dataset,
    test: &Dataset,
    plan: &TrainPlan,
    sweep: Option<&[f64]>,
    out: &Path,
) -> CmdResult<StageArtifacts> {
    ensure_dir(out)?;
    let run_one = |p: &TrainPlan, m: Model<f32>| -> std::result::Result<TrainOutcome, TrainFailure> {
        match p.stage {
            trainer::Stage::Pretrain => trainer::pretrain(m, train, Some(test), p),
            trainer::Stage::Finetune => trainer::finetune(m, train, Some(test), p),
        }
    };
    let outcome = match sweep {
        None => run_one(plan, model),
        Some(lrs) => {
            let (runs, best) = trainer::lr_sweep(&model, train, test, plan, lrs)?;
            let mut table = String::from("lr,final_clean_acc,status\n");
            let mut chosen = None;
            for (i, (lr, r)) in runs.into_iter().enumerate() {
                let (acc, status) = match &r {
                    Ok(o) => (o.report.final_clean_acc().map(|a| a.to_string()).unwrap_or_default(), "ok".to_string()),
                    Err(f) => (f.report.final_clean_acc().map(|a| a.to_string()).unwrap_or_default(), format!("failed: {}", f.error)),
                };
                let _ = writeln!(table, "{lr},{acc},{}", status.replace(',', ";"));
                let report = match &r {
                    Ok(o) => &o.report,
                    Err(f) => &f.report,
                };
                write_file(&out.join(format!("{stage}_lr_{}_report.csv", lr_tag(lr))), report.to_csv())?;
                if Some(i) == best {
                    chosen = Some(r);
                }
            }
            write_file(&out.join(format!("{stage}_sweep.csv")), table)?;
            chosen.unwrap_or_else(|| {
                Err(TrainFailure::from(Error::Domain("every learning rate in the sweep failed".into())))
            })
        }
    };
    let report_path = out.join(format!("{stage}_report.csv"));
    match outcome {
        Ok(o) => {
            write_file(&report_path, o.report.to_csv())?;
            let path = out.join(format!("{stage}.smck"));
            checkpoint::save(&o.model, &path)?;
            Ok(StageArtifacts {
                checkpoint: path,
                report: o.report,
                model: o.model,
            })
        }
        Err(f) => {
            write_file(&report_path, f.report.to_csv())?;
            if let Some(m) = &f.last_good {
                checkpoint::save(m, out.join(format!("{stage}_failed.smck")))?;
            }
            Err(CommandError {
                code: EXIT_TRAINING_FAILED,
                error: f.error,
            })
        }
    }
}

pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> CmdResult<StageArtifacts> {
    let plan = cfg.pretrain_plan()?;
    let splits = cfg.splits()?;
    let train = &splits.upstream_train;
    let spec = cfg.model_spec(train.sample_shape(), train.num_classes)?;
    let model = Model::new(spec, cfg.derived_seed(SeedRole::Init))?;
    let sweep = cfg.pretrain.as_ref().and_then(|p| p.lr_sweep.as_deref());
    train_stage("pretrain", model, train, &splits.upstream_test, &plan, sweep, out)
}

pub fn run_finetune(cfg: &ExperimentConfig, out: &Path) -> CmdResult<StageArtifacts> {
    let plan = cfg.finetune_plan()?;
    let f = cfg.finetune.as_ref().expect("finetune plan implies a section");
    let splits = cfg.splits()?;
    let train = &splits.downstream_train;
    if f.from_scratch {
        let spec = cfg.model_spec(train.sample_shape(), train.num_classes)?;
        let model = Model::new(spec, cfg.derived_seed(SeedRole::Init))?;
        return train_stage("finetune", model, train, &splits.downstream_test, &plan, f.lr_sweep.as_deref(), out);
    }
    let start = f.checkpoint.clone().unwrap_or_else(|| out.join(PRETRAIN_CHECKPOINT));
    let pretrained = load_checkpoint(&start)?;
    if pretrained.spec().input_shape() != train.sample_shape() {
        return Err(Error::Shape(format!(
            "checkpoint expects {:?} inputs, downstream data is {:?}",
            pretrained.spec().input_shape(),
            train.sample_shape()
        ))
        .into());
    }
    let model = if f.replace_head || pretrained.num_classes() != train.num_classes {
        trainer::swap_head(&pretrained, train.num_classes, cfg.derived_seed(SeedRole::Head))?
    } else {
        pretrained
    };
    train_stage("finetune", model, train, &splits.downstream_test, &plan, f.lr_sweep.as_deref(), out)
}

/// Everything `certify` produced.
pub struct CertifyArtifacts {
    pub predictions: Vec<PredictionRecord>,
    pub records: Vec<Vec<CertRecord>>,
    pub table: CurveTable,
}

/// Indices of at most `limit` inputs, evenly spaced over `len`.
pub fn spaced_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

pub fn sigma_file(sigma: f64) -> String {
    format!("certify_sigma_{sigma}.csv")
}

pub fn run_certify(cfg: &ExperimentConfig, out: &Path) -> CmdResult<CertifyArtifacts> {
    let cc = cfg.certify_config();
    let default_ckpt = if cfg.finetune.is_some() { FINETUNE_CHECKPOINT } else { PRETRAIN_CHECKPOINT };
    let path = cc.checkpoint.clone().unwrap_or_else(|| out.join(default_ckpt));
    let model = load_checkpoint(&path)?;
    let splits = cfg.splits()?;
    let test = if cfg.finetune.is_some() { &splits.downstream_test } else { &splits.upstream_test };
    if model.num_classes() != test.num_classes || model.spec().input_shape() != test.sample_shape() {
        return Err(Error::Shape(format!(
            "checkpoint {} ({} classes, {:?} inputs) does not fit the test split ({} classes, {:?})",
            path.display(),
            model.num_classes(),
            model.spec().input_shape(),
            test.num_classes,
            test.sample_shape()
        ))
        .into());
    }
    ensure_dir(out)?;
    let rows = spaced_indices(test.len(), cc.max_inputs);
    let subset = test.images.gather_outer(&rows)?;
    let labels: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
    let ids: Vec<u64> = rows.iter().map(|&i| i as u64).collect();

    let clean = trainer::predict_clean(
        &model,
        &Dataset::new(test.name.clone(), test.split, subset.clone(), labels.clone(), test.num_classes)?,
    )?;
    let predictions: Vec<PredictionRecord> = ids
        .iter()
        .zip(&labels)
        .zip(&clean)
        .map(|((&id, &label), &predicted)| PredictionRecord { id, label, predicted })
        .collect();
    write_file(&out.join(PREDICTIONS), report::to_csv(&predictions)?)?;

    let seed = cfg.derived_seed(SeedRole::Certify);
    let mut records = Vec::new();
    for &sigma in &cc.sigmas {
        let params = cfg.smoothing(sigma, seed);
        let results = certify_all(&model, subset.data(), &ids, &params)?;
        let rows: Vec<CertRecord> = results.iter().zip(&labels).map(|(r, &l)| CertRecord::new(r, l)).collect();
        write_file(&out.join(sigma_file(sigma)), report::to_csv(&rows)?)?;
        records.push(rows);
    }
    let table = CurveTable::from_records(&records, report::clean_accuracy(&predictions))?;
    write_file(&out.join(CURVES), table.to_csv())?;
    let (text, _) = report::comparison(&[RunSummary {
        name: out.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string(),
        table: table.clone(),
    }])?;
    write_file(&out.join("summary.txt"), text)?;
    Ok(CertifyArtifacts {
        predictions,
        records,
        table,
    })
}

/// Rebuild a run's curve table from its per-input CSVs, and check it
/// against the stored `curves.csv` when present.
pub fn load_run(dir: &Path) -> crate::Result<CurveTable> {
    let predictions: Vec<PredictionRecord> = report::read_csv(dir.join(PREDICTIONS))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("certify_sigma_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no certify_sigma_*.csv files", dir.display())));
    }
    let per_sigma = files.iter().map(report::read_csv).collect::<crate::Result<Vec<Vec<CertRecord>>>>()?;
    let table = CurveTable::from_records(&per_sigma, report::clean_accuracy(&predictions))?;
    let stored = dir.join(CURVES);
    if stored.exists() {
        let text = std::fs::read_to_string(&stored).map_err(|e| Error::io(&stored, e))?;
        let saved = CurveTable::from_csv(&text, table.clean_accuracy)?;
        if saved.grid != table.grid {
            return Err(Error::Format(format!("{}: eps grid differs from the standard grid", stored.display())));
        }
        if saved != table {
            return Err(Error::Format(format!(
                "{}: values disagree with the per-input certification CSVs",
                stored.display()
            )));
        }
    }
    Ok(table)
}

pub fn run_report(runs: &[PathBuf], out: Option<&Path>) -> CmdResult<(String, String)> {
    let summaries = runs
        .iter()
        .map(|dir| {
            Ok(RunSummary {
                name: dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string(),
                table: load_run(dir)?,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let (text, csv) = report::comparison(&summaries)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join("comparison.txt"), &text)?;
        write_file(&dir.join("comparison.csv"), &csv)?;
    }
    Ok((text, csv))
}

fn load_config(args: &RunArgs) -> CmdResult<(ExperimentConfig, PathBuf)> {
    let seed = ExperimentConfig::seed_from_env()?;
    let cfg = ExperimentConfig::from_path(&args.config, seed).map_err(|e| match e {
        e @ Error::Io { .. } => CommandError {
            code: EXIT_INVALID_CONFIG,
            error: e,
        },
        other => other.into(),
    })?;
    let out = cfg.output_dir(args.out.as_deref());
    Ok((cfg, out))
}

fn train_summary(stage: &str, a: &StageArtifacts) -> String {
    let acc = a.report.final_clean_acc().map_or("n/a".into(), |v| format!("{:.2}%", 100.0 * v));
    format!(
        "{stage}: {} epochs at base lr {}, clean test accuracy {acc}, {:.1} s -> {}\n",
        a.report.epochs.len(),
        a.report.base_lr,
        a.report.wall_clock.as_secs_f64(),
        a.checkpoint.display()
    )
}

/// Execute a parsed command line; returns the text to print.
pub fn execute(cli: Cli) -> CmdResult<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads", "must be positive").into());
        }
        // a second build in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Pretrain(args) => {
            let (cfg, out) = load_config(&args)?;
            Ok(train_summary("pretrain", &run_pretrain(&cfg, &out)?))
        }
        Command::Finetune(args) => {
            let (cfg, out) = load_config(&args)?;
            Ok(train_summary("finetune", &run_finetune(&cfg, &out)?))
        }
        Command::Certify(args) => {
            let (cfg, out) = load_config(&args)?;
            let a = run_certify(&cfg, &out)?;
            let (text, _) = report::comparison(&[RunSummary {
                name: out.display().to_string(),
                table: a.table,
            }])?;
            Ok(text)
        }
        Command::Report { runs, out } => Ok(run_report(&runs, out.as_deref())?.0),
        Command::Selftest { full } => {
            let checks = selftest::run(full)?;
            let mut text = String::new();
            for c in &checks {
                let _ = writeln!(text, "{c}");
            }
            if checks.iter().all(|c| c.passed) {
                Ok(text)
            } else {
                Err(CommandError {
                    code: EXIT_FAILURE,
                    error: Error::Format(format!("{text}selftest failed")),
                })
            }
        }
    }
}

/// Parse `args` (including the program name), run, print, and map the outcome to an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID_CONFIG } else { 0 });
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
