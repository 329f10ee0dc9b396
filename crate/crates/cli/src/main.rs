use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retinareg::features::Modality;
use retinareg::matching::RegistrationStatus;
use retinareg_cli::evaluate::pair_log;
use retinareg_cli::{
    cmd_evaluate, cmd_extract, cmd_register, cmd_synth, cmd_train_toy, load_config, Backend,
    CliError, PipelineConfig, RegisterArgs, Result, SynthDatasetConfig, TrainToyConfig,
    THREADS_ENV,
};

#[derive(Parser)]
#[command(
    name = "retinareg",
    version,
    about = "Multi-modal retinal image registration"
)]
struct Cli {
    /// JSON config file for the chosen command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the keypoint budget per image.
    #[arg(long, global = true)]
    n_max: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dense feature map of an image.
    Extract {
        input: PathBuf,
        #[arg(long, default_value = "CF", value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register image (or feature map) B onto A.
    Register {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "CF", value_parser = parse_modality)]
        modality_a: Modality,
        #[arg(long, default_value = "CF", value_parser = parse_modality)]
        modality_b: Modality,
        /// Output prefix.
        #[arg(long)]
        out: PathBuf,
        /// Also write a checkerboard overlay PNG.
        #[arg(long)]
        overlay: bool,
    },
    /// Register and score every pair of a manifest.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy embedder on a dataset directory.
    TrainToy {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    s.parse().map_err(|e: retinareg::Error| e.to_string())
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.n_max {
        cfg.n_max = n;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    cfg.resolve()
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::config(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Extract {
            input,
            modality,
            out,
        } => cmd_extract(input, *modality, out, &pipeline_config(cli)?),
        Command::Register {
            a,
            b,
            modality_a,
            modality_b,
            out,
            overlay,
        } => {
            let args = RegisterArgs {
                input_a: a.clone(),
                input_b: b.clone(),
                modality_a: *modality_a,
                modality_b: *modality_b,
                out: out.clone(),
                overlay: *overlay,
            };
            let r = cmd_register(&args, &pipeline_config(cli)?)?;
            eprintln!(
                "{:?}: {} matches, {} inliers",
                r.status,
                r.matches.len(),
                r.num_inliers()
            );
            match r.status {
                RegistrationStatus::Ok => Ok(()),
                s => Err(CliError::Registration(s)),
            }
        }
        Command::Evaluate { manifest, out } => {
            let report = cmd_evaluate(manifest, out, &pipeline_config(cli)?)?;
            eprint!("{}", pair_log(&report));
            print!("{}", report.to_text_table());
            Ok(())
        }
        Command::Synth { count, out } => {
            let mut cfg: SynthDatasetConfig = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let m = cmd_synth(&cfg.resolve()?, *count, out)?;
            eprintln!("wrote {} pairs to {}", m.pairs.len(), out.display());
            Ok(())
        }
        Command::TrainToy {
            dataset,
            out,
            learning_rate,
        } => {
            let mut cfg: TrainToyConfig = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            let run = cmd_train_toy(dataset, &cfg.resolve()?, out)?;
            for w in &run.warnings {
                eprintln!("warning: {w}");
            }
            let last = run.outcome.curve.last().expect("curve has the initial row");
            println!(
                "epochs {} best {} train loss {:.4} validation precision {:.3}",
                last.epoch, run.outcome.best_epoch, last.train_loss, run.precision
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(3);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Registration(_)) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
