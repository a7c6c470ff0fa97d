//! Orchestration behind the command-line tool: data collection, training,
//! headless campaigns and throughput benchmarks, all driven by one
//! [`RunConfig`].

mod config;
mod user;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    BenchConfig, BridgeConfig, DataConfig, EnvConfig, HorizonSection, ModelConfig, PredictorKind, RunConfig,
    SamplingConfig, SessionConfig,
};
pub use user::{ScriptedUser, UserSpec};

use crate::envs::{collect_dataset, Dataset, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::koopman::{evaluate, fit, sparsify, BasisDictionary, Evaluation, KoopmanModel, SparsifyStep};
use crate::metrics::{export, format_metric_table, format_summary_table, ExportPaths, MetricSummary, Provenance, TrialRecord};
use crate::mpmi::{run_trial, Mode, SafetyFilter, TrialOptions};
use crate::rollout::{GroundTruth, HorizonConfig, Predictor, RolloutBatch, RolloutEngine};

/// Independent 64-bit seed number `stream` derived from `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Everything one seed fixes about a trial, shared by all modes.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub seed: u64,
    pub env: EnvSpec,
    pub x0: Vec<f64>,
    pub user_seed: u64,
    pub horizon: HorizonConfig,
}

impl TrialSetup {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        let env = config.env.build(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let x0 = env.perturbed_start(&mut rng, config.env.initial_spread);
        let mut horizon = config.horizon();
        horizon.noise_seed = derive_seed(horizon.noise_seed ^ seed, 3);
        Ok(Self {
            seed,
            env,
            x0,
            user_seed: derive_seed(seed, 2),
            horizon,
        })
    }
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    out.join(p)
}

fn provenance(config: &RunConfig, seeds: Vec<u64>) -> Provenance {
    Provenance {
        config_hash: config.hash(),
        seeds,
    }
}

#[derive(Debug, Clone)]
pub struct CollectReport {
    pub path: PathBuf,
    pub transitions: usize,
}

/// Records a seeded excitation dataset to `out/<data.path>`.
pub fn cmd_collect(config: &RunConfig, out: &Path) -> Result<CollectReport> {
    let env = config.env.build(config.data.seed)?;
    let mut data = collect_dataset(&env, &config.data.excitation, config.data.steps, config.data.seed)?;
    data.header.config_hash = Some(config.hash());
    let path = resolve(out, &config.data.path);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    data.write(&path)?;
    Ok(CollectReport {
        path,
        transitions: data.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model_path: PathBuf,
    pub basis_count: usize,
    pub retained: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub baseline_error: f64,
    pub steps: Vec<SparsifyStep>,
    /// Held-out evaluation of the final model.
    pub evaluation: Evaluation,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "model      {}", self.model_path.display()).unwrap();
        writeln!(s, "samples    {} train, {} held out", self.n_train, self.n_holdout).unwrap();
        writeln!(s, "basis      {} retained of {}", self.retained, self.basis_count).unwrap();
        writeln!(s, "sparsity   baseline holdout error {:.4e}", self.baseline_error).unwrap();
        for st in &self.steps {
            writeln!(
                s,
                "  threshold {:<8.1e} retained {:>4}  error {:.4e}  {}",
                st.threshold,
                st.retained,
                st.holdout_error,
                if st.accepted { "accepted" } else { "rejected" }
            )
            .unwrap();
        }
        writeln!(s, "{:<8} {:>14} {:>14}", "dim", "1-step rmse", format!("{}-step rmse", self.evaluation.horizon)).unwrap();
        for (i, e) in self.evaluation.one_step_rmse.iter().enumerate() {
            let k = self
                .evaluation
                .k_step_rmse
                .as_ref()
                .map_or("-".to_string(), |k| format!("{:.4e}", k[i]));
            writeln!(s, "{:<8} {:>14.4e} {:>14}", format!("x{i}"), e, k).unwrap();
        }
        s
    }
}

/// Fits, sparsifies and evaluates a model on `dataset` (default
/// `out/<data.path>`), writing it to `out/<model.path>`.
pub fn cmd_train(config: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<TrainReport> {
    let data_path = dataset.map_or_else(|| resolve(out, &config.data.path), Path::to_path_buf);
    let data = Dataset::read(&data_path)?;
    if data.header.env_id != config.env.id {
        return Err(Error::Config(format!(
            "dataset holds {} transitions but the config is for {}",
            data.header.env_id, config.env.id
        )));
    }
    if (data.header.dt - config.env.dt()).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "dataset dt {} differs from the configured {}",
            data.header.dt,
            config.env.dt()
        )));
    }
    let (train, held) = data.split(config.model.holdout);
    if train.is_empty() || held.is_empty() {
        return Err(Error::Config(format!("dataset of {} rows is too small to split", data.len())));
    }
    let basis = BasisDictionary::from_spec(&config.basis_spec())?;
    let basis_count = basis.functions().len();
    let full = fit(&train, &basis, config.model.ridge)?;
    let sp = sparsify(&full, &train, &config.model.sparsity)?;
    let model = sp.model.with_config_hash(config.hash());
    let evaluation = evaluate(&model, &held, config.model.eval_horizon)?;
    let model_path = resolve(out, &config.model.path);
    if let Some(dir) = model_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.write(&model_path)?;
    Ok(TrainReport {
        model_path,
        basis_count,
        retained: model.basis().active_count(),
        n_train: train.len(),
        n_holdout: held.len(),
        baseline_error: sp.baseline_error,
        steps: sp.steps,
        evaluation,
    })
}

/// Loads the configured model and checks it against the environment.
pub fn load_model(config: &RunConfig, out: &Path) -> Result<KoopmanModel> {
    let path = resolve(out, &config.model.path);
    let model = KoopmanModel::read(&path)?;
    if model.env_id() != config.env.id {
        return Err(Error::Config(format!(
            "{} is a {} model, config is for {}",
            path.display(),
            model.env_id(),
            config.env.id
        )));
    }
    if (model.dt() - config.env.dt()).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "model dt {} differs from the configured {}",
            model.dt(),
            config.env.dt()
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trials: Vec<TrialRecord>,
    pub summaries: Vec<MetricSummary>,
    pub paths: ExportPaths,
    pub table: String,
}

/// One trial per (seed, mode) with the scripted user. Modes of a seed share
/// the environment, start state, user seed and noise seed.
pub fn run_campaign<P: Predictor>(
    config: &RunConfig,
    predictor: impl Fn(&TrialSetup) -> P + Sync,
) -> Result<Vec<TrialRecord>> {
    let seeds = config.session_seeds();
    let modes = &config.session.modes;
    let samples = config.samples()?;
    let jobs: Vec<(usize, u64, usize, Mode)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| modes.iter().enumerate().map(move |(j, &m)| (i, s, j, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.session.trial_workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start trial workers: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed, j, mode)| {
                let setup = TrialSetup::new(config, seed)?;
                let engine = Arc::new(RolloutEngine::new(config.session.rollout_workers)?);
                let mut filter = SafetyFilter::new(predictor(&setup), samples.clone(), setup.horizon.clone(), engine)?;
                let mut user = ScriptedUser::new(config.session.user.clone(), &setup.env, setup.user_seed)?;
                let options = TrialOptions {
                    trial_id: (i * modes.len() + j) as u64,
                    seed,
                    mode,
                    realtime: config.session.realtime,
                };
                run_trial(&setup.env, &mut filter, &mut user, setup.x0.clone(), &options)
            })
            .collect()
    })
}

/// Headless campaign; writes the trial log and summaries into `out`.
pub fn cmd_run(config: &RunConfig, out: &Path) -> Result<RunReport> {
    let trials = match config.model.predictor {
        PredictorKind::Koopman => {
            let model = load_model(config, out)?;
            run_campaign(config, |_| &model)?
        }
        PredictorKind::GroundTruth => run_campaign(config, |s| GroundTruth(s.env.clone()))?,
    };
    let prov = provenance(config, config.session_seeds());
    let (summaries, paths) = export(out, &trials, config.session.censoring, &prov)?;
    let table = format!("{}\n{}", format_summary_table(&summaries, &prov), format_metric_table(&summaries));
    Ok(RunReport {
        trials,
        summaries,
        paths,
        table,
    })
}

pub const REFERENCE_THROUGHPUT: &str = "reference GPU implementation: batch rates of ~7000 Hz (balance bot) and \
~3500 Hz (race car), between 600,000 and 1,000,000 trajectories every second";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub samples: usize,
    pub workers: usize,
    pub steps: usize,
    pub repeats: usize,
    pub mean_batch_seconds: f64,
    pub min_batch_seconds: f64,
    /// Trajectories per second at the mean batch time.
    pub rollouts_per_second: f64,
    /// `samples * steps` per second.
    pub trajectory_steps_per_second: f64,
    /// Predictions actually made, counting early termination.
    pub predictions_per_second: f64,
    pub achievable_hz: f64,
    pub percent_safe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SustainReport {
    pub rate_hz: f64,
    pub samples: usize,
    pub steps: usize,
    pub workers: usize,
    pub seconds: f64,
    pub ticks: usize,
    pub overruns: usize,
    pub overrun_fraction: f64,
    pub mean_tick_seconds: f64,
    pub p99_tick_seconds: f64,
    pub max_tick_seconds: f64,
    pub resets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub seed: u64,
    pub env_id: crate::envs::EnvId,
    pub predictor: PredictorKind,
    pub lifted_dim: Option<usize>,
    pub cores: usize,
    pub reference: String,
    pub points: Vec<BenchPoint>,
    pub sustain: Option<SustainReport>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# {}", self.reference).unwrap();
        writeln!(s, "# config {} seed {}", self.config_hash, self.seed).unwrap();
        writeln!(
            s,
            "# {} with {:?} predictor{}, {} cores",
            self.env_id,
            self.predictor,
            self.lifted_dim.map_or(String::new(), |d| format!(" (lifted dim {d})")),
            self.cores
        )
        .unwrap();
        writeln!(
            s,
            "{:>8} {:>7} {:>5} {:>12} {:>14} {:>16} {:>14} {:>10} {:>7}",
            "samples", "workers", "T", "batch ms", "rollouts/s", "traj-steps/s", "predicts/s", "max Hz", "% safe"
        )
        .unwrap();
        for p in &self.points {
            writeln!(
                s,
                "{:>8} {:>7} {:>5} {:>12.4} {:>14.0} {:>16.0} {:>14.0} {:>10.1} {:>7.3}",
                p.samples,
                p.workers,
                p.steps,
                p.mean_batch_seconds * 1e3,
                p.rollouts_per_second,
                p.trajectory_steps_per_second,
                p.predictions_per_second,
                p.achievable_hz,
                p.percent_safe
            )
            .unwrap();
        }
        if let Some(r) = &self.sustain {
            writeln!(
                s,
                "sustained {:.1} Hz, N={} T={} workers={} for {:.1} s: {} ticks, {} overruns ({:.3} %), \
                 tick mean {:.3} ms p99 {:.3} ms max {:.3} ms, {} resets",
                r.rate_hz,
                r.samples,
                r.steps,
                r.workers,
                r.seconds,
                r.ticks,
                r.overruns,
                100.0 * r.overrun_fraction,
                r.mean_tick_seconds * 1e3,
                r.p99_tick_seconds * 1e3,
                r.max_tick_seconds * 1e3,
                r.resets
            )
            .unwrap();
        }
        s
    }
}

fn predictions(batch: &RolloutBatch) -> usize {
    batch
        .safe_steps()
        .iter()
        .map(|&s| if s == batch.steps() { s } else { s + 1 })
        .sum()
}

/// Times batches over the configured sample counts and worker counts.
pub fn bench_sweep<P: Predictor, E: Environment>(
    model: &P,
    env: &E,
    x0: &[f64],
    config: &RunConfig,
) -> Result<Vec<BenchPoint>> {
    let space = env.control_space();
    let horizon = config.horizon();
    let mut points = Vec::new();
    for &workers in &config.bench.workers {
        let engine = RolloutEngine::new(workers)?;
        for &n in &config.bench.sample_counts {
            let samples = crate::sampling::grid(space, &balanced_counts(space.dims(), n))?;
            let mut batch = RolloutBatch::empty();
            engine.rollout_batch_into(model, env, x0, &samples, &horizon, 0, &mut batch);
            let mut times = Vec::with_capacity(config.bench.repeats);
            for r in 0..config.bench.repeats {
                let t0 = Instant::now();
                engine.rollout_batch_into(model, env, x0, &samples, &horizon, r as u64, &mut batch);
                times.push(t0.elapsed().as_secs_f64());
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let min = times.iter().copied().fold(f64::INFINITY, f64::min);
            let len = samples.len();
            points.push(BenchPoint {
                samples: len,
                workers: engine.workers(),
                steps: horizon.steps,
                repeats: config.bench.repeats,
                mean_batch_seconds: mean,
                min_batch_seconds: min,
                rollouts_per_second: len as f64 / mean,
                trajectory_steps_per_second: (len * horizon.steps) as f64 / mean,
                predictions_per_second: predictions(&batch) as f64 / mean,
                achievable_hz: 1.0 / mean,
                percent_safe: batch.n_safe() as f64 / len as f64,
            });
        }
    }
    Ok(points)
}

/// Per-dimension counts, at least 2 each, whose product is as close to `n`
/// as a near-cubic grid allows; exact for one dimension.
fn balanced_counts(dims: usize, n: usize) -> Vec<usize> {
    if dims == 1 {
        return vec![n.max(2)];
    }
    let side = ((n as f64).powf(1.0 / dims as f64).round() as usize).max(2);
    let mut counts = vec![side; dims];
    let rest: usize = counts[1..].iter().product();
    counts[0] = n.div_ceil(rest).max(2);
    counts
}

/// Runs the filter at the environment rate for `seconds` with a neutral
/// operator, resetting the state after failures, and counts ticks whose
/// decision plus environment step took longer than `dt`.
pub fn sustain<P: Predictor, E: Environment>(
    filter: &mut SafetyFilter<P>,
    env: &E,
    x0: &[f64],
    seconds: f64,
) -> Result<SustainReport> {
    let dt = env.dt();
    let n_ticks = (seconds / dt).round() as usize;
    let u_h = env.control_space().neutral();
    let mut x = x0.to_vec();
    let mut tick_times = Vec::with_capacity(n_ticks);
    let mut resets = 0;
    let start = Instant::now();
    for k in 0..n_ticks {
        let t0 = Instant::now();
        let d = filter.step(env, k as u64, &x, &u_h);
        x = env.step(&x, &d.u_r)?;
        if env.is_failed(&x) {
            x = x0.to_vec();
            resets += 1;
        }
        tick_times.push(t0.elapsed().as_secs_f64());
        let due = start + Duration::from_secs_f64((k + 1) as f64 * dt);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    let overruns = tick_times.iter().filter(|&&t| t > dt).count();
    let mut sorted = tick_times.clone();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted.get(((sorted.len() as f64 * 0.99).ceil() as usize).saturating_sub(1)).copied().unwrap_or(0.0);
    Ok(SustainReport {
        rate_hz: 1.0 / dt,
        samples: filter.samples().len(),
        steps: filter.horizon().steps,
        workers: 0,
        seconds: start.elapsed().as_secs_f64(),
        ticks: n_ticks,
        overruns,
        overrun_fraction: overruns as f64 / n_ticks.max(1) as f64,
        mean_tick_seconds: tick_times.iter().sum::<f64>() / n_ticks.max(1) as f64,
        p99_tick_seconds: p99,
        max_tick_seconds: sorted.last().copied().unwrap_or(0.0),
        resets,
    })
}

fn bench_with<P: Predictor>(config: &RunConfig, model: &P, setup: &TrialSetup) -> Result<(Vec<BenchPoint>, Option<SustainReport>)> {
    let points = bench_sweep(model, &setup.env, &setup.x0, config)?;
    let sustain_report = if config.bench.sustain_seconds > 0.0 {
        let space = setup.env.control_space();
        let samples = crate::sampling::grid(space, &balanced_counts(space.dims(), config.bench.sustain_samples))?;
        let engine = Arc::new(RolloutEngine::new(config.bench.sustain_workers)?);
        let workers = engine.workers();
        let mut filter = SafetyFilter::new(model, samples, setup.horizon.clone(), engine)?;
        let mut r = sustain(&mut filter, &setup.env, &setup.x0, config.bench.sustain_seconds)?;
        r.workers = workers;
        Some(r)
    } else {
        None
    };
    Ok((points, sustain_report))
}

/// Throughput sweep plus an optional paced run; writes `bench.json` and
/// `bench.txt` into `out`.
pub fn cmd_bench(config: &RunConfig, out: &Path) -> Result<BenchReport> {
    let setup = TrialSetup::new(config, config.bench.seed)?;
    let (lifted_dim, (points, sustain)) = match config.model.predictor {
        PredictorKind::Koopman => {
            let model = load_model(config, out)?;
            (Some(model.lifted_dim()), bench_with(config, &model, &setup)?)
        }
        PredictorKind::GroundTruth => (None, bench_with(config, &GroundTruth(setup.env.clone()), &setup)?),
    };
    let report = BenchReport {
        config_hash: config.hash(),
        seed: config.bench.seed,
        env_id: config.env.id,
        predictor: config.model.predictor,
        lifted_dim,
        cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        reference: REFERENCE_THROUGHPUT.into(),
        points,
        sustain,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("bench.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("serializes") + "\n")
        .map_err(|e| Error::io(&json, e))?;
    let txt = out.join("bench.txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_counts_cover_request() {
        assert_eq!(balanced_counts(1, 2048), vec![2048]);
        let c = balanced_counts(3, 1280);
        assert_eq!(c.len(), 3);
        let n: usize = c.iter().product();
        assert!(n >= 1280 && n < 1280 + 121, "{c:?}");
        assert_eq!(balanced_counts(3, 1), vec![2, 2, 2]);
        assert_eq!(balanced_counts(1, 1), vec![2]);
    }

    #[test]
    fn derived_seeds_are_distinct_streams() {
        assert_eq!(derive_seed(5, 1), derive_seed(5, 1));
        assert_ne!(derive_seed(5, 1), derive_seed(5, 2));
        assert_ne!(derive_seed(5, 1), derive_seed(6, 1));
    }

    #[test]
    fn paired_setups_match() {
        let config = RunConfig::new(crate::envs::EnvId::RaceCar);
        let a = TrialSetup::new(&config, 9).unwrap();
        let b = TrialSetup::new(&config, 9).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.horizon, b.horizon);
        assert_eq!(a.env.track().unwrap().centerline(), b.env.track().unwrap().centerline());
        assert!(a.env.is_safe(&a.x0));
    }
}
