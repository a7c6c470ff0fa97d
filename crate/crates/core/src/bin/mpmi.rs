use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use mpmi::bridge::cmd_serve;
use mpmi::harness::{cmd_bench, cmd_collect, cmd_run, cmd_train, RunConfig};
use mpmi::Error;

#[derive(Parser)]
#[command(version, about = "Shared-control safety filter: data, training, campaigns, benchmarks, live serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set sampling.per_dim_counts=[101]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for artifacts; relative paths in the config resolve here.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Record an excitation dataset.
    Collect(Common),
    /// Fit and sparsify a Koopman model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset to train on instead of the configured one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Headless campaign with a scripted user.
    Run(Common),
    /// Rollout throughput and paced-loop benchmark.
    Bench(Common),
    /// Serve live trials to WebSocket clients.
    Serve(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 3,
    }
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    RunConfig::load(common.config.as_deref(), &common.overrides).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Collect(c) => {
            let config = load(&c)?;
            let r = cmd_collect(&config, &c.out)?;
            println!("wrote {} transitions to {}", r.transitions, r.path.display());
        }
        Command::Train { common, dataset } => {
            let config = load(&common)?;
            let r = cmd_train(&config, dataset.as_deref(), &common.out)?;
            print!("{}", r.to_text());
        }
        Command::Run(c) => {
            let config = load(&c)?;
            let r = cmd_run(&config, &c.out)?;
            print!("{}", r.table);
            println!("trial log {}", r.paths.trial_log.display());
        }
        Command::Bench(c) => {
            let config = load(&c)?;
            print!("{}", cmd_bench(&config, &c.out)?.to_text());
        }
        Command::Serve(c) => {
            let config = load(&c)?;
            let stop = Arc::new(AtomicBool::new(false));
            let r = cmd_serve(&config, &c.out, stop, |addr| println!("listening on ws://{addr}"))?;
            println!("{} trials served, {} messages dropped", r.trials.len(), r.dropped);
            if let Some(log) = r.log {
                println!("session log {}", log.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
