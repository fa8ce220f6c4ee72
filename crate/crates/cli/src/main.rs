mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gridnode::evaluation::TruthSource;
use gridnode::models::ModelKind;

use config::Config;
use error::CliError;

/// Identify power-network dynamics with graph neural ODEs.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "gridnode", version)]
struct Cli {
    /// Master seed for every random stream; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mpg,
    Monolith,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mpg => ModelKind::Mpg,
            KindArg::Monolith => ModelKind::Monolith,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TruthArg {
    Noisy,
    Clean,
}

impl From<TruthArg> for TruthSource {
    fn from(t: TruthArg) -> Self {
        match t {
            TruthArg::Noisy => TruthSource::NoisyTargets,
            TruthArg::Clean => TruthSource::CleanTrajectory,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the four excitation trajectories and write them as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slice trajectories into the datasets d1..d4.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on d1 with early stopping on d2 and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mpg")]
        model: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every point of the sweep grid and rank them on d3.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mpg")]
        model: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one or more checkpoints on a dataset.
    Eval {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checks checkpoints against this config's grid.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "noisy")]
        truth: TruthArg,
    },
    /// Apply a topology change, retrain on a fraction of new data, compare.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenario: Option<String>,
        /// Directory holding the original d4.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "noisy")]
        truth: TruthArg,
    },
    /// Run the gradient-check suite.
    Gradcheck,
    /// Print the configuration with every default filled in.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed_of = |c: &Config| cli.seed.unwrap_or(c.seed);
    match cli.command {
        Command::Simulate { config, out } => {
            let c = Config::load(&config)?;
            commands::simulate(&c, seed_of(&c), &out)
        }
        Command::Dataset { config, traj, out } => {
            let c = Config::load(&config)?;
            commands::dataset(&c, seed_of(&c), &traj, &out)
        }
        Command::Train { config, data, model, out } => {
            let c = Config::load(&config)?;
            commands::train_cmd(&c, seed_of(&c), &data, model.into(), &out)
        }
        Command::Sweep { config, data, model, out } => {
            let c = Config::load(&config)?;
            commands::sweep_cmd(&c, seed_of(&c), &data, model.into(), &out)
        }
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            truth,
        } => {
            let c = config.as_deref().map(Config::load).transpose()?;
            commands::eval_cmd(c.as_ref(), &ckpt, &data, truth.into(), &out)
        }
        Command::Transfer {
            ckpt,
            scenario,
            data,
            fraction,
            out,
            config,
            truth,
        } => {
            let c = Config::load_or_default(config.as_deref())?;
            let scenario = scenario.unwrap_or_else(|| c.transfer.scenario.clone());
            let fraction = fraction.unwrap_or(c.transfer.fraction);
            commands::transfer_cmd(&c, seed_of(&c), &ckpt, &scenario, &data, fraction, truth.into(), &out)
        }
        Command::Gradcheck => commands::gradcheck(cli.seed.unwrap_or(0)),
        Command::Config { config } => {
            let mut c = Config::load_or_default(config.as_deref())?;
            c.seed = seed_of(&c);
            print!("{}", c.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
