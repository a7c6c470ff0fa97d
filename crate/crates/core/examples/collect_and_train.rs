//! Records an excitation dataset and fits a sparsified Koopman model.
//!
//! cargo run --release --example collect_and_train -- [balance_bot|race_car] [out_dir]

use std::path::PathBuf;

use mpmi::envs::EnvId;
use mpmi::harness::{cmd_collect, cmd_train, RunConfig};

fn main() -> mpmi::Result<()> {
    let mut args = std::env::args().skip(1);
    let env: EnvId = args.next().as_deref().unwrap_or("balance_bot").parse()?;
    let out = args.next().map_or_else(|| PathBuf::from("target/example-model").join(env.as_str()), PathBuf::from);
    let mut config = RunConfig::new(env);
    config.data.steps = 20_000;

    let collected = cmd_collect(&config, &out)?;
    println!("{} transitions in {}", collected.transitions, collected.path.display());
    let report = cmd_train(&config, None, &out)?;
    print!("{}", report.to_text());
    Ok(())
}
