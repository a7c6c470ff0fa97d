//! One adversarial-user trial on the balance bot, with and without the
//! safety filter, using the simulator itself as the predictor.
//!
//! cargo run --release --example shared_control_trial -- [seed]

use std::sync::Arc;

use mpmi::envs::EnvId;
use mpmi::harness::{RunConfig, ScriptedUser, TrialSetup};
use mpmi::mpmi::{run_trial, Mode, SafetyFilter, TrialOptions};
use mpmi::rollout::{GroundTruth, RolloutEngine};

fn main() -> mpmi::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut config = RunConfig::new(EnvId::BalanceBot);
    config.env.max_trial_time = Some(5.0);
    let setup = TrialSetup::new(&config, seed)?;
    let engine = Arc::new(RolloutEngine::new(0)?);

    for mode in [Mode::UserOnly, Mode::Mpmi] {
        let mut filter = SafetyFilter::new(
            GroundTruth(setup.env.clone()),
            config.samples()?,
            setup.horizon.clone(),
            engine.clone(),
        )?;
        let mut user = ScriptedUser::new(config.session.user.clone(), &setup.env, setup.user_seed)?;
        let options = TrialOptions {
            trial_id: 0,
            seed,
            mode,
            realtime: false,
        };
        let rec = run_trial(&setup.env, &mut filter, &mut user, setup.x0.clone(), &options)?;
        let fallbacks = rec.ticks.iter().filter(|t| t.fallback_used).count();
        println!(
            "{:9}  {:?} after {:.2} s, mean deviation {:.3}, fallback on {fallbacks} ticks",
            mode.as_str(),
            rec.outcome,
            rec.duration,
            rec.mean_deviation().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
