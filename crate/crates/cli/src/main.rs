//! `mcm`: synthetic-data experiments for dual-branch motion diffusion.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed files, shape mismatch), 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcm_core::diffusion::SampleOptions;
use mcm_core::motion::Skeleton;
use mcm_core::par::Parallelism;
use mcm_core::pipeline::{self, AblationEntry, ExperimentConfig, SampleRequest};
use mcm_core::Error;

#[derive(Parser)]
#[command(name = "mcm", version, about = "Multi-condition motion diffusion on synthetic data")]
struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic (motion, text, audio) dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text stage: train the main branch.
    TrainMain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Control stage: freeze the main branch, train control and bridges.
    TrainControl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-branch baseline: finetune the main branch with audio.
    FinetuneSingle {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one clip from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Audio feature file; routes a dual checkpoint through both branches.
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clamp x_start predictions to [-c, c].
        #[arg(long)]
        clamp: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write decoded joint positions as JSON.
        #[arg(long)]
        positions: Option<PathBuf>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
    /// Score a checkpoint, or the ground truth when none is given.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train each grid entry under one budget and tabulate the results.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated block orders and/or `mcm`, `finetune`.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a motion file to feature CSV and/or joint positions JSON.
    Export {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        skeleton: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Contract(_) => 1,
        Error::Io(_) | Error::Format(_) | Error::Shape { .. } => 2,
        Error::NonFinite(_) => 3,
    }
}

fn skeleton(path: Option<&Path>) -> Result<Skeleton, Error> {
    path.map(Skeleton::load).unwrap_or_else(|| Ok(Skeleton::smpl22()))
}

fn report_training(label: &str, out: &Path, losses: &[f64]) {
    let last = losses.last().copied().unwrap_or(f64::NAN);
    println!("{label}: {} steps, final loss {last:.6}", losses.len());
    println!("checkpoint {}", out.display());
    println!("loss log {}", pipeline::loss_log_path(out).display());
}

fn run(cli: Cli) -> Result<(), Error> {
    let par = if cli.sequential { Parallelism::Sequential } else { Parallelism::available() };
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = pipeline::gen_data(&cfg, &out)?;
            println!("wrote {} items to {} (config {})", ds.len(), out.display(), cfg.hash_hex());
        }
        Command::TrainMain { cfg, data, out } => {
            let r = pipeline::train_main(&cfg.load()?, &data, &out, par)?;
            report_training("train-main", &out, &r.losses);
        }
        Command::TrainControl { cfg, data, main, out } => {
            let r = pipeline::train_control(&cfg.load()?, &data, &main, &out, par)?;
            report_training("train-control", &out, &r.losses);
        }
        Command::FinetuneSingle { cfg, data, main, out } => {
            let r = pipeline::finetune_single(&cfg.load()?, &data, &main, &out, par)?;
            report_training("finetune-single", &out, &r.losses);
        }
        Command::Sample {
            checkpoint,
            text,
            audio,
            frames,
            seed,
            clamp,
            out,
            positions,
            skeleton: sk,
        } => {
            let req = SampleRequest {
                text,
                audio,
                frames,
                seed,
                options: SampleOptions {
                    clamp_x0: clamp,
                    ..SampleOptions::default()
                },
                out: out.clone(),
                positions,
            };
            let m = pipeline::sample_cmd(&checkpoint, &req, &skeleton(sk.as_deref())?)?;
            println!("wrote {} frames to {}", m.frames(), out.display());
        }
        Command::Evaluate {
            cfg,
            data,
            checkpoint,
            out,
            json,
        } => {
            let report = pipeline::evaluate_cmd(&cfg.load()?, checkpoint.as_deref(), &data, out.as_deref(), json.as_deref(), par)?;
            print!("{}", report.to_kv());
        }
        Command::Ablate { cfg, data, grid, out } => {
            let grid = grid.iter().map(|s| s.parse::<AblationEntry>()).collect::<Result<Vec<_>, _>>()?;
            let rows = pipeline::ablation_cmd(&cfg.load()?, &data, &grid, out.as_deref(), par)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
        Command::Export {
            motion,
            csv,
            json,
            skeleton: sk,
        } => {
            pipeline::export_cmd(&motion, &skeleton(sk.as_deref())?, csv.as_deref(), json.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
