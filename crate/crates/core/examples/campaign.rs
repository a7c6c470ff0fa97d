//! Paired-seed campaign with the adversarial user and a ground-truth
//! predictor; writes the trial log and summary tables.
//!
//! cargo run --release --example campaign -- [balance_bot|race_car] [trials]

use mpmi::envs::EnvId;
use mpmi::harness::{cmd_run, PredictorKind, RunConfig};

fn main() -> mpmi::Result<()> {
    let mut args = std::env::args().skip(1);
    let env: EnvId = args.next().as_deref().unwrap_or("balance_bot").parse()?;
    let mut config = RunConfig::new(env);
    config.model.predictor = PredictorKind::GroundTruth;
    config.session.trials = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    config.env.max_trial_time = Some(5.0);
    let out = std::path::PathBuf::from("target/example-campaign").join(env.as_str());

    let report = cmd_run(&config, &out)?;
    print!("{}", report.table);
    println!("trial log {}", report.paths.trial_log.display());
    Ok(())
}
