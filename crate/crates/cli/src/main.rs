use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use invalign::trainer::Axis;
use invalign_cli::{
    build_report, cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, configure_threads, parse_values, report_csv,
    CliError, CliResult, ExperimentConfig, Overrides,
};

#[derive(Parser)]
#[command(name = "invalign", version, about = "Domain-generalized face anti-spoofing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic world as CSV plus a manifest.
    Generate(Common),
    /// Train one run per held-out domain and seed.
    Train(Common),
    /// Train over a grid of one hyperparameter and write a summary CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, gamma or ta.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
    /// Aggregate completed run directories per method.
    Report {
        dirs: Vec<PathBuf>,
        /// Add Spearman correlations of S_align and S_sep with AUC.
        #[arg(long)]
        correlate: bool,
    },
    /// Score a checkpoint on a held-out domain.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        held_out: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(c) => {
            let path = cmd_generate(&c.load()?)?;
            println!("{}", path.display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let mut out = std::io::stdout();
            for run in cmd_train(&cfg, &mut out)? {
                println!("{}", run.dir.display());
            }
        }
        Command::Sweep { common, axis, values } => {
            let values = parse_values(&values)?;
            let (path, table) = cmd_sweep(&common.load()?, axis, &values)?;
            print!("{table}");
            eprintln!("wrote {}", path.display());
        }
        Command::Report { dirs, correlate } => {
            print!("{}", report_csv(&build_report(&dirs, correlate)?)?);
        }
        Command::Evaluate {
            config,
            checkpoint,
            held_out,
        } => {
            let cfg = ExperimentConfig::load(&config, &Overrides::default())?;
            let m = cmd_evaluate(&cfg, &checkpoint, held_out)?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(invalign::Error::from)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
