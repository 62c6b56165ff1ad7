//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advcensor::experiment::{
    self, analyze, export, ingest, load_sources, run_data, run_one, run_stem, write_json, write_prepared, DataSource,
    ExperimentConfig, Mode, Precision,
};
use advcensor::model::Real;
use advcensor::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "advcensor",
    version,
    about = "Multi-source EEG harmonization and adversarial censoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus as trial records plus ingest manifests.
    Synth {
        #[command(flatten)]
        opts: ConfigArgs,
        /// Directory for the trial records and manifests.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and validate ingest manifests, then report per-source counts.
    Ingest {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Harmonize labels, preprocess and write windows (and PSD features).
    Preprocess {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single (λ, repetition) run and save its history and checkpoint.
    Train {
        #[command(flatten)]
        opts: ConfigArgs,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
    },
    /// Run every (λ, repetition) pair and write the result bundle.
    Sweep {
        #[command(flatten)]
        opts: ConfigArgs,
    },
    /// Rebuild summary.json and the plots from a bundle's CSV files.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TimeseriesDnn,
    PsdMlp,
    TimeseriesBinary,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

/// Flags override the matching fields of the JSON config.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Ingest manifests to use instead of synthetic data.
    #[arg(long, num_args = 1..)]
    manifests: Option<Vec<PathBuf>>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
                e => e,
            })?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::TimeseriesDnn => Mode::TimeseriesDnn,
                ModeArg::PsdMlp => Mode::PsdMlp,
                ModeArg::TimeseriesBinary => Mode::TimeseriesBinary,
            };
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.lambda_grid {
            cfg.lambda_grid = v.clone();
        }
        if let Some(v) = self.repetitions {
            cfg.repetitions = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.trainer.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.trainer.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.trainer.max_epochs = v;
        }
        if let Some(v) = self.early_stop_patience {
            cfg.trainer.early_stop_patience = v;
        }
        if let Some(v) = &self.manifests {
            cfg.data = DataSource::Manifests(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn train_single<F: Real>(cfg: &ExperimentConfig, lambda: f64, repetition: usize) -> Result<()> {
    let prepared = experiment::prepare(cfg)?;
    let rd = run_data::<F>(&prepared.windows, cfg, repetition)?;
    let (record, history, net) = run_one(cfg, &rd, lambda, repetition)?;
    let dir = &cfg.output_dir;
    let stem = run_stem(lambda, repetition);
    history.write_csv(&dir.join(&record.history))?;
    history.write_json(&dir.join(format!("runs/{stem}.json")))?;
    net.save(&dir.join(format!("checkpoints/{stem}.json")))?;
    rd.membership
        .write_json(&dir.join(format!("splits/rep{repetition}.json")))?;
    print_json(&record);
    Ok(())
}

fn report_ingest(paths: &[PathBuf]) -> Result<()> {
    let sources = ingest(paths)?;
    let rows: Vec<serde_json::Value> = sources
        .iter()
        .map(|s| {
            let mut subjects: Vec<u32> = s.trials.iter().map(|t| t.subject_id).collect();
            subjects.sort_unstable();
            subjects.dedup();
            serde_json::json!({
                "source_id": s.manifest.source_id,
                "name": s.manifest.name,
                "trials": s.trials.len(),
                "subjects": subjects.len(),
                "sampling_rate_hz": s.manifest.sampling_rate_hz,
            })
        })
        .collect();
    print_json(&rows);
    Ok(())
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if !matches!(cfg.data, DataSource::Synthetic(_)) {
        return Err(Error::Config("synth needs a synthetic data source".into()));
    }
    let sources = load_sources(&cfg.data)?;
    let docs = export(out, &sources)?;
    print_json(&docs);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { opts, out } => synth(&opts.resolve()?, &out),
        Command::Ingest { manifests } => report_ingest(&manifests),
        Command::Preprocess { opts, out } => {
            let cfg = opts.resolve()?;
            let prepared = write_prepared(&cfg, &out)?;
            write_json(&out.join("config.json"), &cfg)?;
            println!("{} windows written to {}", prepared.windows.len(), out.display());
            Ok(())
        }
        Command::Train {
            opts,
            lambda,
            repetition,
        } => {
            let cfg = opts.resolve()?;
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
            }
            match cfg.precision {
                Precision::F32 => train_single::<f32>(&cfg, lambda, repetition),
                Precision::F64 => train_single::<f64>(&cfg, lambda, repetition),
            }
        }
        Command::Sweep { opts } => {
            let summary = experiment::run_experiment(&opts.resolve()?)?;
            print_json(&summary);
            Ok(())
        }
        Command::Plot { dir } => {
            print_json(&analyze(&dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
