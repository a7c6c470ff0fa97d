//! Serves live balance-bot trials over WebSocket. Connect a client to the
//! printed address, send `input` frames and watch the telemetry.
//!
//! cargo run --release --example serve_cockpit -- [trials]

use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use mpmi::bridge::cmd_serve;
use mpmi::envs::EnvId;
use mpmi::harness::{PredictorKind, RunConfig};

fn main() -> mpmi::Result<()> {
    let mut config = RunConfig::new(EnvId::BalanceBot);
    config.model.predictor = PredictorKind::GroundTruth;
    config.bridge.trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    config.bridge.listen = "127.0.0.1:0".into();
    config.session.rollout_workers = 0;
    let stop = Arc::new(AtomicBool::new(false));
    let report = cmd_serve(&config, std::path::Path::new("target/example-serve"), stop, |addr| {
        println!("listening on ws://{addr}");
        println!(r#"send e.g. {{"type":"input","tick_index":0,"client_time":0.0,"u":[0.2]}}"#);
    })?;
    for t in &report.trials {
        println!("trial {}: {:?} after {:.2} s", t.trial_id, t.outcome, t.duration);
    }
    Ok(())
}
