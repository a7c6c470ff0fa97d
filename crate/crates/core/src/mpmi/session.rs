//! The fixed-rate shared-control loop.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{SafetyFilter, SharedControlDecision};
use crate::envs::Environment;
use crate::error::Result;
use crate::metrics::{Outcome, TickRecord, TrialRecord};
use crate::rollout::{Predictor, RolloutBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    UserOnly,
    Mpmi,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::UserOnly => "user_only",
            Mode::Mpmi => "mpmi",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user_only" => Ok(Mode::UserOnly),
            "mpmi" => Ok(Mode::Mpmi),
            other => Err(crate::Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// What the loop exposes to its operator after each decision.
#[derive(Debug, Clone, Copy)]
pub struct TickView<'a> {
    pub tick: u64,
    pub t: f64,
    pub mode: Mode,
    pub state: &'a [f64],
    pub decision: &'a SharedControlDecision,
    pub batch: &'a RolloutBatch,
}

/// The human side of the loop: supplies input, may switch modes, and sees
/// every decision.
pub trait Operator {
    /// New input for this tick, or `None` to hold the previous one.
    fn input(&mut self, tick: u64, state: &[f64]) -> Option<Vec<f64>>;

    fn mode_request(&mut self) -> Option<Mode> {
        None
    }

    fn observe(&mut self, _view: &TickView<'_>) {}

    /// Checked before every tick; `true` abandons the trial.
    fn stop_requested(&mut self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOptions {
    pub trial_id: u64,
    pub seed: u64,
    pub mode: Mode,
    /// Sleep so that ticks start `dt` apart in wall-clock time.
    pub realtime: bool,
}

/// Runs one trial from `x0` until the state fails or the time runs out.
///
/// Each tick reads the operator's input (zero-order hold, neutral before
/// the first input), rolls out the sample grid, applies either the filtered
/// control or the raw input depending on the mode, and steps the
/// environment. Ticks whose decision took longer than `dt` are counted as
/// overruns; none is skipped. A stop request from the operator ends the
/// trial with [`Error::Interrupted`](crate::Error::Interrupted).
pub fn run_trial<P, E>(
    env: &E,
    filter: &mut SafetyFilter<P>,
    operator: &mut dyn Operator,
    x0: Vec<f64>,
    options: &TrialOptions,
) -> Result<TrialRecord>
where
    P: Predictor,
    E: Environment + ?Sized,
{
    let dt = env.dt();
    let max_time = env.max_trial_time();
    let n_ticks = (max_time / dt).round() as u64;
    let space = env.control_space().clone();
    let mut held = space.clamp(&vec![0.0; space.dims()]).0;
    let mut mode = options.mode;
    let mut state = x0;
    let mut ticks = Vec::with_capacity(n_ticks as usize);
    let mut overruns = 0;
    let mut outcome = Outcome::Survived;
    let mut duration = max_time;
    let wall_start = Instant::now();

    for k in 0..n_ticks {
        let t = k as f64 * dt;
        if env.is_failed(&state) {
            outcome = Outcome::Failed;
            duration = t;
            break;
        }
        if operator.stop_requested() {
            return Err(crate::Error::Interrupted);
        }
        if let Some(m) = operator.mode_request() {
            mode = m;
        }
        if let Some(u) = operator.input(k, &state) {
            held = u;
        }
        let decision = match mode {
            Mode::Mpmi => filter.step(env, k, &state, &held),
            Mode::UserOnly => filter.assess(env, k, &state, &held),
        };
        let overrun = decision.compute_time > dt;
        overruns += overrun as usize;
        operator.observe(&TickView {
            tick: k,
            t,
            mode,
            state: &state,
            decision: &decision,
            batch: filter.batch(),
        });
        let next = env.step(&state, &decision.u_r)?;
        ticks.push(TickRecord::new(t, mode, state, &decision, overrun));
        state = next;
        if options.realtime {
            let due = wall_start + Duration::from_secs_f64((k + 1) as f64 * dt);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }

    Ok(TrialRecord {
        trial_id: options.trial_id,
        env_id: env.env_id(),
        mode: options.mode,
        seed: options.seed,
        outcome,
        duration,
        max_trial_time: max_time,
        dt,
        overruns,
        ticks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{AlwaysSafe, BalanceBotParams, EnvSpec};
    use crate::rollout::{GroundTruth, HorizonConfig, RolloutEngine};
    use crate::sampling::grid;
    use std::sync::Arc;

    struct Constant(Vec<f64>);

    impl Operator for Constant {
        fn input(&mut self, _tick: u64, _state: &[f64]) -> Option<Vec<f64>> {
            Some(self.0.clone())
        }
    }

    struct Silent;

    impl Operator for Silent {
        fn input(&mut self, _tick: u64, _state: &[f64]) -> Option<Vec<f64>> {
            None
        }
    }

    fn short_bot() -> EnvSpec {
        let mut env = EnvSpec::balance_bot(BalanceBotParams::default());
        env.max_trial_time = 1.0;
        env
    }

    fn options(mode: Mode) -> TrialOptions {
        TrialOptions {
            trial_id: 0,
            seed: 0,
            mode,
            realtime: false,
        }
    }

    fn filter<'a>(env: &'a EnvSpec, n: usize) -> SafetyFilter<GroundTruth<&'a EnvSpec>> {
        SafetyFilter::new(
            GroundTruth(env),
            grid(env.control_space(), &[n]).unwrap(),
            HorizonConfig::noise_free(20, env.dt),
            Arc::new(RolloutEngine::new(1).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn user_only_applies_input_unchanged() {
        let env = short_bot();
        let mut f = filter(&env, 21);
        let rec = run_trial(&env, &mut f, &mut Constant(vec![0.3]), vec![0.0; 3], &options(Mode::UserOnly)).unwrap();
        assert!(rec.ticks.iter().all(|t| t.u_r == t.u_h && t.deviation == 0.0));
        assert!(rec.ticks.iter().all(|t| !t.fallback_used));
    }

    #[test]
    fn silent_operator_holds_neutral_input() {
        let env = short_bot();
        let mut f = filter(&env, 21);
        let rec = run_trial(&env, &mut f, &mut Silent, vec![0.0; 3], &options(Mode::Mpmi)).unwrap();
        assert_eq!(rec.outcome, Outcome::Survived);
        assert_eq!(rec.duration, 1.0);
        assert_eq!(rec.ticks.len(), 100);
        assert!(rec.ticks.iter().all(|t| t.u_h == vec![0.0]));
        assert!(rec.ticks.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn failure_ends_trial_at_tick_time() {
        let env = short_bot();
        let mut f = filter(&env, 5);
        let rec = run_trial(&env, &mut f, &mut Constant(vec![-1.0]), vec![0.3, 0.0, 0.0], &options(Mode::UserOnly)).unwrap();
        assert_eq!(rec.outcome, Outcome::Failed);
        assert!(rec.duration < 1.0);
        assert_eq!(rec.duration, rec.ticks.len() as f64 * env.dt);
    }

    #[test]
    fn assistance_rescues_destabilizing_input() {
        let env = short_bot();
        let mut a = filter(&env, 41);
        let mut b = filter(&env, 41);
        let x0 = vec![0.2, 0.0, 0.0];
        let user = run_trial(&env, &mut a, &mut Constant(vec![-1.0]), x0.clone(), &options(Mode::UserOnly)).unwrap();
        let shared = run_trial(&env, &mut b, &mut Constant(vec![-1.0]), x0, &options(Mode::Mpmi)).unwrap();
        assert_eq!(user.outcome, Outcome::Failed);
        assert!(shared.duration > user.duration);
    }

    #[test]
    fn modes_coincide_in_always_safe_env() {
        let env = AlwaysSafe(short_bot());
        let samples = grid(env.control_space(), &[5]).unwrap();
        let mk = || {
            SafetyFilter::new(
                GroundTruth(&env),
                samples.clone(),
                HorizonConfig::noise_free(5, 0.01),
                Arc::new(RolloutEngine::new(1).unwrap()),
            )
            .unwrap()
        };
        // on-grid input: no quantization, identical trajectories
        let a = run_trial(&env, &mut mk(), &mut Constant(vec![0.5]), vec![0.0; 3], &options(Mode::UserOnly)).unwrap();
        let b = run_trial(&env, &mut mk(), &mut Constant(vec![0.5]), vec![0.0; 3], &options(Mode::Mpmi)).unwrap();
        let states = |r: &TrialRecord| r.ticks.iter().map(|t| t.state.clone()).collect::<Vec<_>>();
        assert_eq!(states(&a), states(&b));
    }
}
