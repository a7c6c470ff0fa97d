use std::sync::Arc;

use mpmi::envs::{AlwaysSafe, BalanceBotParams, EnvId, EnvSpec};
use mpmi::harness::{run_campaign, RunConfig, ScriptedUser, TrialSetup, UserSpec};
use mpmi::metrics::{summarize, Censoring, Outcome, TrialRecord};
use mpmi::mpmi::{run_trial, Mode, SafetyFilter, TrialOptions};
use mpmi::rollout::{GroundTruth, HorizonConfig, RolloutEngine};
use mpmi::sampling::grid;

#[test]
fn modes_coincide_when_everything_is_safe() {
    let mut bot = EnvSpec::balance_bot(BalanceBotParams::default());
    bot.max_trial_time = 0.5;
    let env = AlwaysSafe(bot.clone());
    let samples = grid(&bot.control_space, &[21]).unwrap();
    let engine = Arc::new(RolloutEngine::new(2).unwrap());
    let u = samples.sample(13).to_vec();
    let mut records = Vec::new();
    for mode in [Mode::UserOnly, Mode::Mpmi] {
        let mut filter = SafetyFilter::new(
            GroundTruth(&env),
            samples.clone(),
            HorizonConfig::noise_free(10, bot.dt),
            engine.clone(),
        )
        .unwrap();
        let mut user = ScriptedUser::new(UserSpec::Constant { value: u.clone() }, &bot, 0).unwrap();
        let options = TrialOptions {
            trial_id: 0,
            seed: 0,
            mode,
            realtime: false,
        };
        records.push(run_trial(&env, &mut filter, &mut user, vec![0.02, 0.0, 0.0], &options).unwrap());
    }
    let (a, b) = (&records[0], &records[1]);
    assert_eq!(a.ticks.len(), b.ticks.len());
    for (x, y) in a.ticks.iter().zip(&b.ticks) {
        assert_eq!(x.state, y.state);
        assert_eq!(x.u_r, y.u_r);
        assert_eq!(x.u_r, u);
    }
}

#[test]
fn paired_seeds_share_their_setup() {
    let config = RunConfig::new(EnvId::RaceCar);
    let a = TrialSetup::new(&config, 3).unwrap();
    let b = TrialSetup::new(&config, 3).unwrap();
    let c = TrialSetup::new(&config, 4).unwrap();
    assert_eq!(a.x0, b.x0);
    assert_eq!(a.user_seed, b.user_seed);
    assert_eq!(a.horizon, b.horizon);
    assert_ne!(a.x0, c.x0);
}

#[test]
fn ground_truth_campaign_is_reproducible() {
    let mut config = RunConfig::new(EnvId::BalanceBot);
    config.env.max_trial_time = Some(1.0);
    config.sampling.per_dim_counts = Some(vec![41]);
    config.horizon.steps = Some(20);
    config.session.trials = 3;
    let untimed = |mut trials: Vec<TrialRecord>| {
        for t in &mut trials {
            t.overruns = 0;
            for k in &mut t.ticks {
                k.compute_time = 0.0;
                k.overrun = false;
            }
        }
        trials
    };
    let first = untimed(run_campaign(&config, |s| GroundTruth(s.env.clone())).unwrap());
    let second = untimed(run_campaign(&config, |s| GroundTruth(s.env.clone())).unwrap());
    assert_eq!(first, second);
    assert_eq!(first.len(), 6);
    let summaries = summarize(&first, Censoring::AtMaxTime).unwrap();
    let time = |m: Mode| summaries.iter().find(|s| s.mode == m).unwrap().mean_time_to_failure.unwrap();
    assert!(time(Mode::Mpmi) >= time(Mode::UserOnly));
    assert!(first
        .iter()
        .filter(|t| t.mode == Mode::UserOnly)
        .all(|t| t.outcome == Outcome::Failed));
}
