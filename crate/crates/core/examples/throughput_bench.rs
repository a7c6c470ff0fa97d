//! Rollout throughput sweep and a short paced run at the balance-bot rate.
//!
//! cargo run --release --example throughput_bench -- [sustain_seconds]

use mpmi::envs::EnvId;
use mpmi::harness::{cmd_bench, PredictorKind, RunConfig};

fn main() -> mpmi::Result<()> {
    let mut config = RunConfig::new(EnvId::BalanceBot);
    config.model.predictor = PredictorKind::GroundTruth;
    config.bench.sample_counts = vec![256, 1024, 2048];
    config.bench.repeats = 5;
    config.bench.sustain_seconds = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3.0);
    let report = cmd_bench(&config, std::path::Path::new("target/example-bench"))?;
    print!("{}", report.to_text());
    Ok(())
}
