use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use xil_core::data::{generate_synthetic_biased, write_dataset, SyntheticBiasSpec};
use xil_core::orchestrator::{
    report, run_experiment, run_grid, DataSpec, ExperimentConfig, FeedbackSource, NoProgress, OracleFeedback, RunEnv,
    RunStatus, SteeringConfig,
};
use xil_core::Error;

#[derive(Parser)]
#[command(name = "xil", version, about = "Explanatory interactive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one steering experiment with simulated feedback.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Parent directory for the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the full 23-configuration grid from one baseline.
    Grid {
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; strategy, sampler, explainer and k are overridden.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Two iterations on 100 synthetic images.
        #[arg(long)]
        smoke: bool,
    },
    /// Collect run records into table.csv and render before/after overlays.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Write a synthetic biased dataset in the on-disk dataset layout.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the feedback API; with --config, start that run interactively.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// Process exit codes.
const CONFIG_ERROR: u8 = 2;
const DATA_ERROR: u8 = 3;
const TRAINING_ERROR: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => CONFIG_ERROR,
        Error::Ingestion { .. } | Error::Validation(_) | Error::Spec(_) | Error::Io { .. } | Error::Image { .. } | Error::Csv(_) => {
            DATA_ERROR
        }
        Error::Json(_) => CONFIG_ERROR,
        _ => TRAINING_ERROR,
    }
}

fn default_grid_data(smoke: bool) -> DataSpec {
    DataSpec::Synthetic(SyntheticBiasSpec::new(128, if smoke { 50 } else { 286 }, 1.0, 0))
}

fn apply_smoke(cfg: &mut ExperimentConfig) {
    cfg.steering.iterations = 2;
    if let DataSpec::Synthetic(spec) = &mut cfg.data {
        spec.n_per_class = 50;
    }
}

fn run(config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_path(config)?;
    if cfg.steering.feedback_source == FeedbackSource::Interactive {
        return Err(Error::Config("interactive runs need `xil serve --config`".into()));
    }
    let data = cfg.data.load()?;
    let dir = out.join(cfg.steering.run_id());
    let mut oracle = OracleFeedback;
    let mut env = RunEnv { run_dir: Some(dir.clone()), data_spec: Some(cfg.data.clone()), feedback: &mut oracle, progress: &NoProgress };
    let rec = run_experiment(&cfg.steering, &data, &mut env)?;
    let (b, f) = (&rec.baseline, &rec.final_report);
    println!("{} {:?}: {} iterations", rec.run_id, rec.status, rec.iterations.len());
    println!("  FFP {:.3} -> {:.3}  BFP {:.3} -> {:.3}", b.ffp, f.ffp, b.bfp, f.bfp);
    println!("  BSR {:.3} -> {:.3}  DICE {:.3} -> {:.3}", b.bsr, f.bsr, b.dice, f.dice);
    println!("  accuracy {:.1}% -> {:.1}%", b.accuracy, f.accuracy);
    println!("  written to {}", dir.display());
    Ok(())
}

fn grid(out: &Path, config: Option<&Path>, smoke: bool) -> Result<(), Error> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig { steering: SteeringConfig::default(), data: default_grid_data(smoke) },
    };
    if smoke {
        apply_smoke(&mut cfg);
    }
    cfg.steering.validate()?;
    let data = cfg.data.load()?;
    let records = run_grid(&cfg.steering, &data, Some(&cfg.data), out, &NoProgress)?;
    let early = records.iter().filter(|r| r.status == RunStatus::TerminatedEarly).count();
    println!("{} runs written to {} ({early} terminated early)", records.len(), out.display());
    println!("table: {}", out.join("table.csv").display());
    Ok(())
}

fn synth(spec: &Path, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let spec: SyntheticBiasSpec = if spec.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
    };
    let data = generate_synthetic_biased(&spec)?;
    write_dataset(&data, out)?;
    println!("{} images written to {}", data.samples().len(), out.display());
    Ok(())
}

fn serve(port: u16, config: Option<&Path>, out: &Path) -> Result<(), Error> {
    let state = xil_service::AppState::default();
    if let Some(path) = config {
        let mut cfg = ExperimentConfig::from_path(path)?;
        cfg.steering.feedback_source = FeedbackSource::Interactive;
        let data = cfg.data.load()?;
        let run_id = cfg.steering.run_id();
        let session = xil_service::RunSession::new(
            run_id.clone(),
            cfg.steering.eval_method(),
            data.class_names().clone(),
            Some(out.join(&run_id)),
            Duration::from_secs(cfg.steering.feedback_timeout_secs),
        );
        state.insert(session.clone());
        xil_service::spawn_run(session, cfg, data);
        println!("run {run_id} started; feedback at /runs/{run_id}/pending");
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    rt.block_on(xil_service::serve(state, addr)).map_err(|e| Error::io(addr.to_string(), e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Grid { out, config, smoke } => grid(out, config.as_deref(), *smoke),
        Command::Report { runs } => report(runs).map(|rows| {
            println!("{} rows written to {}", rows.len(), runs.join("table.csv").display());
        }),
        Command::Synth { spec, out } => synth(spec, out),
        Command::Serve { port, config, out } => serve(*port, config.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
