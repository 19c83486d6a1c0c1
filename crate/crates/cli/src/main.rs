//! `fluvinv`: runs the stages of a desk-scale inversion experiment.
//!
//! Exit codes: 0 on success, 1 for configuration, validation and I/O
//! errors, 2 for numerical failures (the failing stage is named).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fluvinv::config::{ExperimentConfig, Method};
use fluvinv::workflow::{run_pipeline, run_stage, Stage, StageError};
use fluvinv::Error;

#[derive(Parser, Debug)]
#[command(name = "fluvinv", version, about = "Latent-space inversion workbench for 3D fluvial grids")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (JSON); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the hidden ground-truth grids.
    GenTruth,
    /// Place wells and extract their logs.
    PlaceWells,
    /// Simulate the observed seismic cube of every test case.
    ForwardSeismic,
    /// Draw latent vectors from the prior and summarize their grids.
    SamplePrior,
    /// Invert every run for latent vectors.
    Invert {
        /// Inversion method, overriding the configuration.
        #[arg(long)]
        method: Option<String>,
    },
    /// Pivotal tuning around the inverted latent vectors.
    Tune,
    /// Error report, summaries and MDS embeddings.
    Metrics,
    /// Error landscapes around the mean inverted latent vector.
    Landscape,
    /// Convert grid files to legacy VTK (all truth and seismic grids by default).
    ExportVtk {
        inputs: Vec<PathBuf>,
    },
    /// gen-truth, place-wells, forward-seismic, sample-prior, invert, tune, metrics.
    Pipeline,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            code: if e.error.is_numerical() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn load_config(g: &Global, command: &Command) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Command::Invert { method: Some(m) } = command {
        cfg.inversion.method = Method::parse(m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli.global, &cli.command)?;
    let stage = match &cli.command {
        Command::GenTruth => Stage::GenTruth,
        Command::PlaceWells => Stage::PlaceWells,
        Command::ForwardSeismic => Stage::ForwardSeismic,
        Command::SamplePrior => Stage::SamplePrior,
        Command::Invert { .. } => Stage::Invert,
        Command::Tune => Stage::Tune,
        Command::Metrics => Stage::Metrics,
        Command::Landscape => Stage::Landscape,
        Command::ExportVtk { .. } => Stage::ExportVtk,
        Command::Pipeline => {
            for m in run_pipeline(&cfg)? {
                println!("{}: {} files", m.stage.name(), m.files.len());
            }
            return Ok(());
        }
        Command::ShowConfig => {
            println!("{}", cfg.to_json()?);
            return Ok(());
        }
    };
    let inputs = match &cli.command {
        Command::ExportVtk { inputs } => inputs.clone(),
        _ => Vec::new(),
    };
    let manifest = run_stage(&cfg, stage, &inputs)?;
    for f in &manifest.files {
        println!("{}", cfg.output_dir.join(&f.path).display());
    }
    Ok(())
}
