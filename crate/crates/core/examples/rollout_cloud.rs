//! Rolls every sample of a grid out from a leaning balance-bot state and
//! prints the decimated cloud a cockpit would draw.
//!
//! cargo run --release --example rollout_cloud -- [pitch]

use mpmi::bridge::decimate;
use mpmi::envs::{BalanceBotParams, EnvSpec};
use mpmi::rollout::{percent_safe, GroundTruth, HorizonConfig, RolloutEngine};
use mpmi::sampling::grid;

fn main() -> mpmi::Result<()> {
    let pitch: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.3);
    let env = EnvSpec::balance_bot(BalanceBotParams::default());
    let samples = grid(&env.control_space, &[101])?;
    let horizon = HorizonConfig {
        noise_sigma: vec![1e-3, 1e-2, 1e-2],
        noise_seed: 1,
        ..HorizonConfig::noise_free(30, env.dt)
    };
    let engine = RolloutEngine::new(0)?;
    let x = [pitch, 0.5, 0.0];
    let batch = engine.rollout_batch(&GroundTruth(&env), &env, &x, &samples, &horizon, 0);
    println!("state {x:?}: {} of {} rollouts safe ({:.2})", batch.n_safe(), batch.len(), percent_safe(&batch));

    let cloud = decimate(&batch, &samples, 10, 5);
    for t in &cloud.trajectories {
        let last = t.points.last().map_or(f64::NAN, |p| p[0]);
        println!(
            "u {:+.2}  safe steps {:2}  {}  final pitch {last:+.3}",
            t.control[0],
            t.safe_steps,
            if t.fully_safe { "safe  " } else { "unsafe" }
        );
    }
    Ok(())
}
