//! Receding-horizon rollouts: every sampled control is held over the horizon
//! and the prediction is checked for safety after each step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::koopman::{KoopmanModel, PredictScratch};
use crate::sampling::SampleSet;

/// One-step raw-state predictor usable from many workers at once.
pub trait Predictor: Sync {
    /// Per-worker buffers.
    type Scratch: Send;

    fn state_dim(&self) -> usize;
    fn scratch(&self) -> Self::Scratch;
    /// Writes the next state into `out`. Failures are reported by writing
    /// non-finite values, which rollouts treat as divergence.
    fn predict_into(&self, state: &[f64], control: &[f64], scratch: &mut Self::Scratch, out: &mut [f64]);
}

impl Predictor for KoopmanModel {
    type Scratch = PredictScratch;

    fn state_dim(&self) -> usize {
        KoopmanModel::state_dim(self)
    }

    fn scratch(&self) -> PredictScratch {
        PredictScratch::new(self)
    }

    #[inline]
    fn predict_into(&self, state: &[f64], control: &[f64], scratch: &mut PredictScratch, out: &mut [f64]) {
        self.predict_with(state, control, scratch, out)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    type Scratch = P::Scratch;

    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn scratch(&self) -> P::Scratch {
        (**self).scratch()
    }

    #[inline]
    fn predict_into(&self, state: &[f64], control: &[f64], scratch: &mut P::Scratch, out: &mut [f64]) {
        (**self).predict_into(state, control, scratch, out)
    }
}

/// The environment's own dynamics used as the predictor.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<E>(pub E);

impl<E: Environment> Predictor for GroundTruth<E> {
    type Scratch = ();

    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn scratch(&self) {}

    fn predict_into(&self, state: &[f64], control: &[f64], _scratch: &mut (), out: &mut [f64]) {
        match self.0.step(state, control) {
            Ok(next) => out.copy_from_slice(&next),
            Err(_) => out.fill(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonConfig {
    /// Prediction steps `T`.
    pub steps: usize,
    /// Seconds per prediction step.
    pub dt: f64,
    /// Standard deviation of the Gaussian noise added to each predicted raw
    /// state component. Empty means noise-free.
    pub noise_sigma: Vec<f64>,
    pub noise_seed: u64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            dt: 0.01,
            noise_sigma: Vec::new(),
            noise_seed: 0,
        }
    }
}

impl HorizonConfig {
    pub fn noise_free(steps: usize, dt: f64) -> Self {
        Self {
            steps,
            dt,
            noise_sigma: Vec::new(),
            noise_seed: 0,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("horizon needs at least one step".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("horizon dt must be positive, got {}", self.dt)));
        }
        if !self.noise_sigma.is_empty() && self.noise_sigma.len() != state_dim {
            return Err(Error::Config(format!(
                "noise_sigma has {} entries for a {state_dim}-dimensional state",
                self.noise_sigma.len()
            )));
        }
        if let Some(s) = self.noise_sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {s}")));
        }
        Ok(())
    }

    fn is_noisy(&self) -> bool {
        self.noise_sigma.iter().any(|s| *s > 0.0)
    }
}

/// Identifies the noise stream of one rollout: the same `(noise_seed, tick,
/// sample)` always yields the same draws, whatever thread runs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamId {
    pub tick: u64,
    pub sample: u64,
}

fn noise_rng(seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&id.tick.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id.sample);
    rng
}

/// Fills `row` (`(steps + 1) * n` entries) and returns the number of safe
/// predicted steps. Entries after the first unsafe state are NaN.
fn rollout_into<P, E>(
    model: &P,
    scratch: &mut P::Scratch,
    env: &E,
    x_t: &[f64],
    u: &[f64],
    horizon: &HorizonConfig,
    id: StreamId,
    row: &mut [f64],
) -> usize
where
    P: Predictor + ?Sized,
    E: Environment + ?Sized,
{
    let n = x_t.len();
    row[..n].copy_from_slice(x_t);
    let mut rng = horizon.is_noisy().then(|| noise_rng(horizon.noise_seed, id));
    let mut safe = 0;
    for s in 1..=horizon.steps {
        let (done, rest) = row.split_at_mut(s * n);
        let prev = &done[(s - 1) * n..];
        let next = &mut rest[..n];
        model.predict_into(prev, u, scratch, next);
        if let Some(rng) = rng.as_mut() {
            for (v, sigma) in next.iter_mut().zip(&horizon.noise_sigma) {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        if !(next.iter().all(|v| v.is_finite()) && env.is_safe(next)) {
            rest[n..].fill(f64::NAN);
            return safe;
        }
        safe += 1;
    }
    safe
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `(steps + 1) * n` entries, the start state first.
    pub trajectory: Vec<f64>,
    pub safe_steps: usize,
    pub fully_safe: bool,
}

/// A single rollout of `u` held constant from `x_t`.
pub fn rollout_one<P, E>(model: &P, env: &E, x_t: &[f64], u: &[f64], horizon: &HorizonConfig, id: StreamId) -> Rollout
where
    P: Predictor + ?Sized,
    E: Environment + ?Sized,
{
    let n = x_t.len();
    let mut trajectory = vec![0.0; (horizon.steps + 1) * n];
    let mut scratch = model.scratch();
    let safe_steps = rollout_into(model, &mut scratch, env, x_t, u, horizon, id, &mut trajectory);
    Rollout {
        trajectory,
        safe_steps,
        fully_safe: safe_steps == horizon.steps,
    }
}

/// Rollouts of every sample in a set from one start state.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    tick: u64,
    steps: usize,
    state_dim: usize,
    trajectories: Vec<f64>,
    safe_steps: Vec<usize>,
}

impl RolloutBatch {
    pub fn empty() -> Self {
        Self {
            tick: 0,
            steps: 0,
            state_dim: 0,
            trajectories: Vec::new(),
            safe_steps: Vec::new(),
        }
    }

    /// A batch holding only safe-step counts, with no trajectories.
    #[cfg(test)]
    pub(crate) fn from_safe_steps(steps: usize, safe_steps: Vec<usize>) -> Self {
        Self {
            tick: 0,
            steps,
            state_dim: 0,
            trajectories: Vec::new(),
            safe_steps,
        }
    }

    pub fn len(&self) -> usize {
        self.safe_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.safe_steps.is_empty()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Predicted states of sample `i`, `(steps + 1) * n` entries with NaN for
    /// states never computed.
    pub fn trajectory(&self, i: usize) -> &[f64] {
        let w = (self.steps + 1) * self.state_dim;
        &self.trajectories[i * w..(i + 1) * w]
    }

    /// Predicted state `s` of sample `i`, if it was computed.
    pub fn state(&self, i: usize, s: usize) -> Option<&[f64]> {
        let n = self.state_dim;
        let x = &self.trajectory(i)[s * n..(s + 1) * n];
        (!x[0].is_nan()).then_some(x)
    }

    pub fn safe_steps(&self) -> &[usize] {
        &self.safe_steps
    }

    pub fn fully_safe(&self, i: usize) -> bool {
        self.safe_steps[i] == self.steps
    }

    pub fn n_safe(&self) -> usize {
        self.safe_steps.iter().filter(|&&s| s == self.steps).count()
    }
}

/// Fraction of fully-safe rollouts.
///
/// # Panics
/// On an empty batch.
pub fn percent_safe(batch: &RolloutBatch) -> f64 {
    assert!(!batch.is_empty(), "percent_safe of an empty batch");
    batch.n_safe() as f64 / batch.len() as f64
}

/// Runs batches on a dedicated worker pool.
pub struct RolloutEngine {
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for RolloutEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RolloutEngine").field("workers", &self.workers()).finish()
    }
}

impl RolloutEngine {
    /// `workers == 0` uses one worker per available core.
    pub fn new(workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("rollout-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot start rollout workers: {e}")))?;
        Ok(Self { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn rollout_batch<P, E>(
        &self,
        model: &P,
        env: &E,
        x_t: &[f64],
        samples: &SampleSet,
        horizon: &HorizonConfig,
        tick: u64,
    ) -> RolloutBatch
    where
        P: Predictor + ?Sized,
        E: Environment + ?Sized,
    {
        let mut batch = RolloutBatch::empty();
        self.rollout_batch_into(model, env, x_t, samples, horizon, tick, &mut batch);
        batch
    }

    /// As [`rollout_batch`](Self::rollout_batch), reusing `batch`'s buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_batch_into<P, E>(
        &self,
        model: &P,
        env: &E,
        x_t: &[f64],
        samples: &SampleSet,
        horizon: &HorizonConfig,
        tick: u64,
        batch: &mut RolloutBatch,
    ) where
        P: Predictor + ?Sized,
        E: Environment + ?Sized,
    {
        let n = x_t.len();
        let w = (horizon.steps + 1) * n;
        batch.tick = tick;
        batch.steps = horizon.steps;
        batch.state_dim = n;
        batch.trajectories.resize(samples.len() * w, 0.0);
        batch.safe_steps.resize(samples.len(), 0);
        let trajectories = &mut batch.trajectories;
        let safe_steps = &mut batch.safe_steps;
        self.pool.install(|| {
            trajectories
                .par_chunks_mut(w)
                .zip(safe_steps.par_iter_mut())
                .enumerate()
                .with_min_len(8)
                .for_each_init(
                    || model.scratch(),
                    |scratch, (i, (row, safe))| {
                        let id = StreamId {
                            tick,
                            sample: i as u64,
                        };
                        *safe = rollout_into(model, scratch, env, x_t, samples.sample(i), horizon, id, row);
                    },
                );
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{AlwaysSafe, BalanceBotParams, EnvSpec};
    use crate::sampling::{grid, ControlSpace};
    use proptest::prelude::*;

    fn bot() -> EnvSpec {
        EnvSpec::balance_bot(BalanceBotParams::default())
    }

    fn noisy(steps: usize, seed: u64) -> HorizonConfig {
        HorizonConfig {
            steps,
            dt: 0.01,
            noise_sigma: vec![0.01, 0.02, 0.01],
            noise_seed: seed,
        }
    }

    #[test]
    fn single_safe_step() {
        let env = bot();
        let r = rollout_one(
            &GroundTruth(&env),
            &env,
            &[0.0; 3],
            &[0.0],
            &HorizonConfig::noise_free(1, 0.01),
            StreamId { tick: 0, sample: 0 },
        );
        assert_eq!((r.safe_steps, r.fully_safe), (1, true));
        assert_eq!(&r.trajectory[..3], &[0.0; 3]);
    }

    #[test]
    fn inside_band_nothing_is_safe() {
        let env = bot();
        let set = grid(&ControlSpace::balance_bot(), &[21]).unwrap();
        let engine = RolloutEngine::new(2).unwrap();
        // past the inflated limit and still falling
        let x = [0.7, 1.0, 0.0];
        let b = engine.rollout_batch(&GroundTruth(&env), &env, &x, &set, &HorizonConfig::noise_free(10, 0.01), 0);
        assert_eq!(b.n_safe(), 0);
        assert_eq!(percent_safe(&b), 0.0);
        for i in 0..b.len() {
            assert_eq!(b.safe_steps()[i], 0);
            assert!(b.state(i, 1).is_some());
            assert!(b.state(i, 2).is_none());
            assert!(b.trajectory(i)[6..].iter().all(|v| v.is_nan()));
        }
    }

    #[test]
    fn always_safe_batch_is_fully_safe() {
        let env = AlwaysSafe(bot());
        let set = grid(&ControlSpace::balance_bot(), &[11]).unwrap();
        let engine = RolloutEngine::new(1).unwrap();
        let b = engine.rollout_batch(&GroundTruth(&env), &env, &[0.2, 0.0, 0.0], &set, &noisy(20, 1), 3);
        assert_eq!(percent_safe(&b), 1.0);
        assert!(b.trajectory(4).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn destabilizing_command_fails_sooner() {
        let env = bot();
        let h = HorizonConfig::noise_free(60, 0.01);
        let id = StreamId { tick: 0, sample: 0 };
        let x = [0.3, 0.5, 0.0];
        // driving the base backwards tips a forward-leaning body further forward
        let bad = rollout_one(&GroundTruth(&env), &env, &x, &[-1.0], &h, id);
        let good = rollout_one(&GroundTruth(&env), &env, &x, &[1.0], &h, id);
        assert!(bad.safe_steps < good.safe_steps, "{} vs {}", bad.safe_steps, good.safe_steps);

        // scalar re-implementation of the loop
        let p = BalanceBotParams::default();
        let mut s = crate::envs::BalanceBotState::from_slice(&x);
        let mut count = 0;
        for _ in 0..60 {
            s = crate::envs::step_balance_bot(s, -1.0, 0.01, &p).unwrap();
            if s.pitch.abs() >= 0.8 - 0.15 {
                break;
            }
            count += 1;
        }
        assert_eq!(bad.safe_steps, count);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let env = bot();
        let set = grid(&ControlSpace::balance_bot(), &[257]).unwrap();
        let h = noisy(30, 42);
        let x = [0.1, -0.3, 0.2];
        let reference = RolloutEngine::new(1).unwrap().rollout_batch(&GroundTruth(&env), &env, &x, &set, &h, 7);
        for workers in [2, 4, 8] {
            let b = RolloutEngine::new(workers)
                .unwrap()
                .rollout_batch(&GroundTruth(&env), &env, &x, &set, &h, 7);
            assert_eq!(b.safe_steps(), reference.safe_steps());
            let bits = |b: &RolloutBatch| b.trajectories.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&b), bits(&reference));
        }
    }

    #[test]
    fn noise_free_rows_equal_single_rollouts() {
        let env = bot();
        let set = grid(&ControlSpace::balance_bot(), &[17]).unwrap();
        let h = HorizonConfig::noise_free(25, 0.01);
        let x = [0.2, 0.4, -0.1];
        let b = RolloutEngine::new(3).unwrap().rollout_batch(&GroundTruth(&env), &env, &x, &set, &h, 0);
        for i in 0..set.len() {
            let r = rollout_one(&GroundTruth(&env), &env, &x, set.sample(i), &h, StreamId { tick: 99, sample: 5 });
            assert_eq!(r.safe_steps, b.safe_steps()[i]);
            assert_eq!(r.fully_safe, b.fully_safe(i));
            let same = r
                .trajectory
                .iter()
                .zip(b.trajectory(i))
                .all(|(a, c)| a.to_bits() == c.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn noise_streams_differ_by_tick_and_sample() {
        let env = AlwaysSafe(bot());
        let h = noisy(5, 1);
        let at = |tick, sample| rollout_one(&GroundTruth(&env), &env, &[0.0; 3], &[0.0], &h, StreamId { tick, sample }).trajectory;
        assert_eq!(at(0, 0), at(0, 0));
        assert_ne!(at(0, 0), at(1, 0));
        assert_ne!(at(0, 0), at(0, 1));
    }

    #[test]
    fn horizon_validation() {
        assert!(HorizonConfig::noise_free(0, 0.01).validate(3).is_err());
        assert!(noisy(5, 0).validate(3).is_ok());
        assert!(noisy(5, 0).validate(6).is_err());
        let mut h = noisy(5, 0);
        h.noise_sigma[1] = -1.0;
        assert!(h.validate(3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shorter_horizon_is_a_prefix(
            pitch in -0.6f64..0.6,
            rate in -2.0f64..2.0,
            u in -1.0f64..1.0,
            short in 1usize..40,
            seed in 0u64..1000,
        ) {
            let env = bot();
            let x = [pitch, rate, 0.0];
            let id = StreamId { tick: 3, sample: 11 };
            let long = rollout_one(&GroundTruth(&env), &env, &x, &[u], &noisy(40, seed), id);
            let cut = rollout_one(&GroundTruth(&env), &env, &x, &[u], &noisy(short, seed), id);
            prop_assert_eq!(cut.safe_steps, long.safe_steps.min(short));
        }

        #[test]
        fn ground_truth_rollouts_match_constant_control_simulation(
            pitch in -0.6f64..0.6,
            rate in -2.0f64..2.0,
            u in -1.0f64..1.0,
        ) {
            let env = bot();
            let x = vec![pitch, rate, 0.0];
            let r = rollout_one(&GroundTruth(&env), &env, &x, &[u], &HorizonConfig::noise_free(30, 0.01), StreamId { tick: 0, sample: 0 });
            let mut s = x;
            let mut safe = true;
            for _ in 0..30 {
                s = env.step(&s, &[u]).unwrap();
                if !env.is_safe(&s) {
                    safe = false;
                    break;
                }
            }
            prop_assert_eq!(r.fully_safe, safe);
        }
    }
}
