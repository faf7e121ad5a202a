//! `nlbt` — balanced truncation workbench for nonlinear stochastic systems.
//!
//! Exit codes: 0 success, 1 usage error, 2 certification failure or
//! inapplicable bound, 3 bound violated beyond the Monte Carlo slack.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, resolve, OrdersSpec, RunConfig};

#[derive(Parser)]
#[command(
    name = "nlbt",
    about = "Gramian-based balanced truncation of nonlinear stochastic systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration (JSON). A bare builtin name (example1, example2,
    /// linear-demo) selects that system with default settings.
    #[arg(long)]
    config: String,
    /// Override the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the truncation orders (comma separated).
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the system and certify the Gramian inequalities.
    Certify(CommonArgs),
    /// Compute Gramians, balance, and write HSVs plus reduced systems.
    Reduce(CommonArgs),
    /// Full pipeline with Monte Carlo validation of the error bound.
    Validate(CommonArgs),
    /// Monte Carlo simulation of the configured system.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write raw state trajectories (binary NLBT format).
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Write the configured system description to a JSON file.
    ExportSystem {
        #[command(flatten)]
        common: CommonArgs,
        /// Destination path for the system document.
        #[arg(long, default_value = "system.json")]
        to: PathBuf,
    },
}

fn apply_overrides(config: &mut RunConfig, args: &CommonArgs) -> Result<(), String> {
    if let Some(seed) = args.seed {
        config.grid.seed = seed;
    }
    if let Some(paths) = args.paths {
        if paths == 0 {
            return Err("--paths must be >= 1".into());
        }
        config.grid.paths = paths;
    }
    if let Some(orders) = &args.orders {
        if orders.is_empty() || orders.iter().any(|&r| r == 0) {
            return Err("--orders must be positive integers".into());
        }
        config.orders = OrdersSpec::List {
            values: orders.clone(),
        };
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    Ok(())
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("NLBT_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn run() -> Result<i32, String> {
    init_thread_pool();
    let cli = Cli::parse();
    let (common, runner): (
        &CommonArgs,
        Box<dyn Fn(&config::ResolvedConfig) -> Result<commands::CmdOutcome, String>>,
    ) = match &cli.command {
        Command::Certify(c) => (c, Box::new(commands::cmd_certify)),
        Command::Reduce(c) => (c, Box::new(commands::cmd_reduce)),
        Command::Validate(c) => (c, Box::new(commands::cmd_validate)),
        Command::Simulate {
            common,
            dump_trajectories,
        } => {
            let dump = *dump_trajectories;
            (
                common,
                Box::new(move |rc| commands::cmd_simulate(rc, dump)),
            )
        }
        Command::ExportSystem { common, to } => {
            let to = to.clone();
            (
                common,
                Box::new(move |rc| commands::cmd_export_system(rc, &to)),
            )
        }
    };

    let mut config = load_config(&common.config)?;
    apply_overrides(&mut config, common)?;
    let resolved = resolve(&config)?;
    let outcome = runner(&resolved)?;
    for line in &outcome.messages {
        println!("{line}");
    }
    Ok(outcome.exit)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code.clamp(0, 255) as u8),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
