//! Minimal-intervention selection: apply the fully-safe sample closest to
//! the operator's input.

mod session;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use session::{run_trial, Mode, Operator, TickView, TrialOptions};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rollout::{rollout_one, GroundTruth, HorizonConfig, Predictor, RolloutBatch, RolloutEngine, StreamId};
use crate::sampling::{euclidean, nearest_sample, SampleSet};

/// Cost of applying `candidate` when the operator asked for `u_h`.
pub fn deviation_cost(candidate: &[f64], u_h: &[f64]) -> f64 {
    euclidean(candidate, u_h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedControlDecision {
    pub tick_index: u64,
    /// Operator input after clamping to the control box.
    pub u_h: Vec<f64>,
    /// Applied control.
    pub u_r: Vec<f64>,
    /// `|u_h - u_r|`.
    pub deviation: f64,
    /// Distance from `u_h` to the closest fully-safe sample, or to the
    /// fallback choice when none is safe.
    pub deviation_to_closest_safe: f64,
    pub n_safe: usize,
    pub percent_safe: f64,
    pub fallback_used: bool,
    /// The raw input was outside the box.
    pub input_clamped: bool,
    /// The grid point nearest to `u_h` is fully safe.
    pub nearest_sample_safe: bool,
    /// Index of the selected sample, `None` when `u_h` was passed through.
    pub sample_index: Option<usize>,
    /// Wall-clock seconds spent deciding.
    pub compute_time: f64,
}

/// Outcome of scanning a batch for the sample to apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub deviation: f64,
    pub fallback: bool,
}

/// Fully-safe sample nearest to `u_h`, ties to the lower index. With no
/// fully-safe sample: the longest predicted survival, then the smaller
/// deviation, then the lower index.
pub fn select(batch: &RolloutBatch, samples: &SampleSet, u_h: &[f64]) -> Selection {
    select_by(batch, samples, |xi| deviation_cost(xi, u_h))
}

/// [`select`] under an arbitrary per-sample cost.
pub fn select_by(batch: &RolloutBatch, samples: &SampleSet, cost: impl Fn(&[f64]) -> f64) -> Selection {
    let mut best: Option<(usize, f64)> = None;
    for i in (0..batch.len()).filter(|&i| batch.fully_safe(i)) {
        let d = cost(samples.sample(i));
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    if let Some((index, deviation)) = best {
        return Selection {
            index,
            deviation,
            fallback: false,
        };
    }
    let mut pick: Option<(usize, usize, f64)> = None;
    for (i, &steps) in batch.safe_steps().iter().enumerate() {
        let d = cost(samples.sample(i));
        let better = match pick {
            None => true,
            Some((_, ps, pd)) => steps > ps || (steps == ps && d < pd),
        };
        if better {
            pick = Some((i, steps, d));
        }
    }
    let (index, _, deviation) = pick.expect("batch is not empty");
    Selection {
        index,
        deviation,
        fallback: true,
    }
}

/// The sampled safety filter: a predictor, a control grid, a horizon and a
/// worker pool, plus the batch of the latest tick.
pub struct SafetyFilter<P> {
    model: P,
    samples: SampleSet,
    horizon: HorizonConfig,
    engine: Arc<RolloutEngine>,
    batch: RolloutBatch,
}

impl<P: Predictor> SafetyFilter<P> {
    pub fn new(model: P, samples: SampleSet, horizon: HorizonConfig, engine: Arc<RolloutEngine>) -> Result<Self> {
        horizon.validate(model.state_dim())?;
        Ok(Self {
            model,
            samples,
            horizon,
            engine,
            batch: RolloutBatch::empty(),
        })
    }

    pub fn model(&self) -> &P {
        &self.model
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn horizon(&self) -> &HorizonConfig {
        &self.horizon
    }

    /// Rollouts computed by the latest `step` or `assess`.
    pub fn batch(&self) -> &RolloutBatch {
        &self.batch
    }

    /// Rolls out every sample from `x_t` and applies the selected one.
    pub fn step<E: Environment + ?Sized>(&mut self, env: &E, tick: u64, x_t: &[f64], u_h: &[f64]) -> SharedControlDecision {
        self.decide(env, tick, x_t, u_h, true)
    }

    /// Same rollouts and metrics, but the operator input is applied unchanged.
    pub fn assess<E: Environment + ?Sized>(&mut self, env: &E, tick: u64, x_t: &[f64], u_h: &[f64]) -> SharedControlDecision {
        self.decide(env, tick, x_t, u_h, false)
    }

    fn decide<E: Environment + ?Sized>(
        &mut self,
        env: &E,
        tick: u64,
        x_t: &[f64],
        u_h: &[f64],
        assist: bool,
    ) -> SharedControlDecision {
        let start = Instant::now();
        let (u_h, input_clamped) = self.samples.space().clamp(u_h);
        self.engine
            .rollout_batch_into(&self.model, env, x_t, &self.samples, &self.horizon, tick, &mut self.batch);
        decision_from(&self.batch, &self.samples, u_h, input_clamped, assist, start)
    }
}

fn decision_from(
    batch: &RolloutBatch,
    samples: &SampleSet,
    u_h: Vec<f64>,
    input_clamped: bool,
    assist: bool,
    start: Instant,
) -> SharedControlDecision {
    let sel = select(batch, samples, &u_h);
    let n_safe = batch.n_safe();
    let nearest = nearest_sample(samples, &u_h);
    let (u_r, sample_index, fallback_used) = if assist {
        (samples.sample(sel.index).to_vec(), Some(sel.index), sel.fallback)
    } else {
        (u_h.clone(), None, false)
    };
    SharedControlDecision {
        tick_index: batch.tick(),
        deviation: deviation_cost(&u_r, &u_h),
        u_h,
        u_r,
        deviation_to_closest_safe: sel.deviation,
        n_safe,
        percent_safe: n_safe as f64 / batch.len() as f64,
        fallback_used,
        input_clamped,
        nearest_sample_safe: batch.fully_safe(nearest.index),
        sample_index,
        compute_time: start.elapsed().as_secs_f64(),
    }
}

/// One filter step without keeping a filter around. Returns the decision and
/// the batch it was made from.
#[allow(clippy::too_many_arguments)]
pub fn mpmi_step<P, E>(
    engine: &RolloutEngine,
    model: &P,
    env: &E,
    samples: &SampleSet,
    horizon: &HorizonConfig,
    tick: u64,
    x_t: &[f64],
    u_h: &[f64],
) -> (SharedControlDecision, RolloutBatch)
where
    P: Predictor + ?Sized,
    E: Environment + ?Sized,
{
    let start = Instant::now();
    let (u_h, input_clamped) = samples.space().clamp(u_h);
    let batch = engine.rollout_batch(model, env, x_t, samples, horizon, tick);
    let decision = decision_from(&batch, samples, u_h, input_clamped, true, start);
    (decision, batch)
}

/// Largest dense grid the oracle accepts.
pub const ORACLE_MAX_SAMPLES: usize = 2_000_000;

/// Brute-force selection over a dense grid with the environment's own
/// dynamics and no noise: samples are visited in order of deviation from
/// `u_h` (then index) and the first fully-safe one is returned. `None` when
/// no sample is safe.
pub fn smi_oracle<E: Environment + ?Sized>(
    env: &E,
    x_t: &[f64],
    u_h: &[f64],
    dense: &SampleSet,
    steps: usize,
) -> Result<Option<Vec<f64>>> {
    if dense.len() > ORACLE_MAX_SAMPLES {
        return Err(Error::Config(format!(
            "oracle grid of {} samples exceeds the {ORACLE_MAX_SAMPLES} limit",
            dense.len()
        )));
    }
    let (u_h, _) = dense.space().clamp(u_h);
    let horizon = HorizonConfig::noise_free(steps, env.dt());
    horizon.validate(env.state_dim())?;
    let mut order: Vec<(f64, usize)> = (0..dense.len())
        .map(|i| (deviation_cost(dense.sample(i), &u_h), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let truth = GroundTruth(env);
    for (_, i) in order {
        let r = rollout_one(&truth, env, x_t, dense.sample(i), &horizon, StreamId { tick: 0, sample: 0 });
        if r.fully_safe {
            return Ok(Some(dense.sample(i).to_vec()));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{AlwaysSafe, BalanceBotParams, EnvId, EnvSpec};
    use crate::sampling::{grid, grid_half_spacing, ControlSpace};
    use proptest::prelude::*;

    /// Toy 1-D system: the state is the last applied control; safe iff >= 0.5.
    struct Toy {
        space: ControlSpace,
    }

    impl Environment for Toy {
        fn env_id(&self) -> EnvId {
            EnvId::BalanceBot
        }
        fn state_dim(&self) -> usize {
            3
        }
        fn control_space(&self) -> &ControlSpace {
            &self.space
        }
        fn dt(&self) -> f64 {
            0.01
        }
        fn max_trial_time(&self) -> f64 {
            1.0
        }
        fn step(&self, _state: &[f64], u: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![u[0], 0.0, 0.0])
        }
        fn is_safe(&self, state: &[f64]) -> bool {
            state[0] >= 0.5
        }
        fn is_failed(&self, _state: &[f64]) -> bool {
            false
        }
    }

    fn toy() -> Toy {
        Toy {
            space: ControlSpace::balance_bot(),
        }
    }

    fn engine() -> RolloutEngine {
        RolloutEngine::new(2).unwrap()
    }

    #[test]
    fn minimal_perturbation_toward_safe_set() {
        let env = toy();
        let set = grid(env.control_space(), &[21]).unwrap();
        let h = HorizonConfig::noise_free(5, 0.01);
        let (d, batch) = mpmi_step(&engine(), &GroundTruth(&env), &env, &set, &h, 0, &[0.0; 3], &[-1.0]);
        assert_eq!(d.u_r, vec![0.5]);
        assert_eq!(d.deviation, 1.5);
        assert!(!d.fallback_used);
        assert_eq!(d.n_safe, 6);

        // exhaustive oracle
        let best = (0..set.len())
            .filter(|&i| batch.fully_safe(i))
            .min_by(|&a, &b| deviation_cost(set.sample(a), &[-1.0]).total_cmp(&deviation_cost(set.sample(b), &[-1.0])))
            .unwrap();
        assert_eq!(set.sample(best), d.u_r.as_slice());
        assert_eq!(smi_oracle(&env, &[0.0; 3], &[-1.0], &set, 5).unwrap(), Some(vec![0.5]));
    }

    #[test]
    fn safe_grid_input_passes_through() {
        let env = toy();
        let set = grid(env.control_space(), &[21]).unwrap();
        let h = HorizonConfig::noise_free(5, 0.01);
        let (d, _) = mpmi_step(&engine(), &GroundTruth(&env), &env, &set, &h, 0, &[0.0; 3], set.sample(17));
        assert_eq!(d.u_r, set.sample(17));
        assert_eq!(d.deviation, 0.0);
        assert!(d.nearest_sample_safe);
    }

    #[test]
    fn equal_cost_ties_go_to_lower_index() {
        let env = AlwaysSafe(toy());
        let set = grid(env.control_space(), &[5]).unwrap();
        let h = HorizonConfig::noise_free(1, 0.01);
        let (d, _) = mpmi_step(&engine(), &GroundTruth(&env), &env, &set, &h, 0, &[0.0; 3], &[0.25]);
        assert_eq!(d.sample_index, Some(2));
        assert_eq!(d.u_r, vec![0.0]);
    }

    #[test]
    fn fallback_prefers_longest_survival() {
        // pitch far past the band, all rollouts unsafe at step 1
        let env = EnvSpec::balance_bot(BalanceBotParams::default());
        let set = grid(env.control_space(), &[11]).unwrap();
        let h = HorizonConfig::noise_free(10, 0.01);
        let (d, batch) = mpmi_step(&engine(), &GroundTruth(&env), &env, &set, &h, 0, &[0.7, 2.0, 0.0], &[0.3]);
        assert!(d.fallback_used);
        assert_eq!(d.n_safe, 0);
        assert_eq!(d.percent_safe, 0.0);
        // all tie at zero safe steps, so the closest to u_h wins
        assert!(batch.safe_steps().iter().all(|&s| s == 0));
        assert_eq!(d.u_r, set.sample(nearest_sample(&set, &[0.3]).index).to_vec());
        assert_eq!(smi_oracle(&env, &[0.7, 2.0, 0.0], &[0.3], &set, 10).unwrap(), None);
    }

    #[test]
    fn fallback_ranks_by_safe_steps_first() {
        // fails after a number of steps that grows with u
        struct Countdown(ControlSpace);
        impl Environment for Countdown {
            fn env_id(&self) -> EnvId {
                EnvId::BalanceBot
            }
            fn state_dim(&self) -> usize {
                3
            }
            fn control_space(&self) -> &ControlSpace {
                &self.0
            }
            fn dt(&self) -> f64 {
                0.01
            }
            fn max_trial_time(&self) -> f64 {
                1.0
            }
            fn step(&self, s: &[f64], u: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![s[0] + 1.0, u[0], 0.0])
            }
            fn is_safe(&self, s: &[f64]) -> bool {
                s[0] <= 2.0 + 2.0 * s[1]
            }
            fn is_failed(&self, _s: &[f64]) -> bool {
                false
            }
        }
        let env = Countdown(ControlSpace::balance_bot());
        let set = grid(env.control_space(), &[5]).unwrap();
        let h = HorizonConfig::noise_free(10, 0.01);
        let (d, batch) = mpmi_step(&engine(), &GroundTruth(&env), &env, &set, &h, 0, &[0.0; 3], &[-1.0]);
        assert_eq!(batch.safe_steps(), &[0, 1, 2, 3, 4]);
        assert!(d.fallback_used);
        assert_eq!(d.u_r, vec![1.0]);
    }

    #[test]
    fn assess_passes_input_through() {
        let env = toy();
        let set = grid(env.control_space(), &[21]).unwrap();
        let mut f = SafetyFilter::new(
            GroundTruth(&env),
            set,
            HorizonConfig::noise_free(3, 0.01),
            Arc::new(engine()),
        )
        .unwrap();
        let d = f.assess(&env, 4, &[0.0; 3], &[-2.0]);
        assert_eq!(d.u_h, vec![-1.0]);
        assert_eq!(d.u_r, vec![-1.0]);
        assert!(d.input_clamped);
        assert_eq!(d.deviation, 0.0);
        assert_eq!(d.deviation_to_closest_safe, 1.5);
        assert!(!d.fallback_used);
        assert_eq!(d.sample_index, None);
        let s = f.step(&env, 5, &[0.0; 3], &[-2.0]);
        assert_eq!(s.u_r, vec![0.5]);
        assert_eq!(f.batch().tick(), 5);
    }

    #[test]
    fn mip_pass_through_in_always_safe_env() {
        let env = AlwaysSafe(EnvSpec::balance_bot(BalanceBotParams::default()));
        let set = grid(env.control_space(), &[101]).unwrap();
        let h = HorizonConfig::noise_free(5, 0.01);
        let worst = grid_half_spacing(&set).worst_case;
        let eng = engine();
        for k in 0..200 {
            let u = -1.0 + 2.0 * (k as f64 + 0.37) / 200.0;
            let (d, _) = mpmi_step(&eng, &GroundTruth(&env), &env, &set, &h, k, &[0.0; 3], &[u]);
            assert!(d.deviation <= worst + 1e-15);
        }
        for i in (0..set.len()).step_by(7) {
            let (d, _) = mpmi_step(&eng, &GroundTruth(&env), &env, &set, &h, 0, &[0.0; 3], set.sample(i));
            assert_eq!(d.deviation, 0.0);
        }
    }

    #[test]
    fn oracle_rejects_oversized_grid() {
        let env = toy();
        let set = grid(env.control_space(), &[ORACLE_MAX_SAMPLES + 1]).unwrap();
        assert!(smi_oracle(&env, &[0.0; 3], &[0.0], &set, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn argmin_invariant_under_cost_scaling(
            steps in proptest::collection::vec(0usize..4, 9),
            u in -1.0f64..1.0,
            scale in 0.01f64..100.0,
        ) {
            let set = grid(&ControlSpace::balance_bot(), &[9]).unwrap();
            let batch = RolloutBatch::from_safe_steps(3, steps);
            let a = select_by(&batch, &set, |xi| deviation_cost(xi, &[u]));
            let b = select_by(&batch, &set, |xi| scale * deviation_cost(xi, &[u]));
            prop_assert_eq!(a.index, b.index);
            prop_assert_eq!(a.fallback, b.fallback);
        }

        #[test]
        fn decision_is_consistent(u in -3.0f64..3.0, pitch in -0.5f64..0.5, rate in -1.0f64..1.0) {
            let env = EnvSpec::balance_bot(BalanceBotParams::default());
            let set = grid(env.control_space(), &[33]).unwrap();
            let h = HorizonConfig::noise_free(20, 0.01);
            let (d, batch) = mpmi_step(&RolloutEngine::new(1).unwrap(), &GroundTruth(&env), &env, &set, &h, 0, &[pitch, rate, 0.0], &[u]);
            prop_assert_eq!(d.deviation, euclidean(&d.u_h, &d.u_r));
            prop_assert!(!d.fallback_used || d.n_safe == 0);
            let i = d.sample_index.unwrap();
            prop_assert_eq!(set.sample(i), d.u_r.as_slice());
            prop_assert!(batch.fully_safe(i) || d.fallback_used);
            prop_assert!(env.control_space().contains(&d.u_h));
        }
    }
}
