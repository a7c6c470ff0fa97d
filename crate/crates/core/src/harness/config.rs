//! The declarative run configuration and its command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::user::UserSpec;
use crate::envs::{generate_track, BalanceBotParams, EnvId, EnvSpec, OuExcitation, RaceCarParams, TrackParams};
use crate::error::{Error, Result};
use crate::koopman::{BasisSpec, SparsifyConfig, DEFAULT_RIDGE};
use crate::metrics::Censoring;
use crate::mpmi::Mode;
use crate::rollout::HorizonConfig;
use crate::sampling::{grid, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub horizon: HorizonSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub id: EnvId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inflation_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_trial_time: Option<f64>,
    /// Scale of the seeded start-state perturbation.
    #[serde(default = "one")]
    pub initial_spread: f64,
    #[serde(default)]
    pub balance_bot: BalanceBotParams,
    #[serde(default)]
    pub race_car: RaceCarParams,
    #[serde(default)]
    pub track: TrackParams,
}

fn one() -> f64 {
    1.0
}

impl EnvConfig {
    pub fn new(id: EnvId) -> Self {
        Self {
            id,
            dt: None,
            inflation_radius: None,
            max_trial_time: None,
            initial_spread: 1.0,
            balance_bot: BalanceBotParams::default(),
            race_car: RaceCarParams::default(),
            track: TrackParams::default(),
        }
    }

    /// The environment instance for one seed. Only the race-car track
    /// depends on it.
    pub fn build(&self, seed: u64) -> Result<EnvSpec> {
        let mut env = match self.id {
            EnvId::BalanceBot => EnvSpec::balance_bot(self.balance_bot),
            EnvId::RaceCar => EnvSpec::race_car(self.race_car, generate_track(seed, &self.track)?),
        };
        if let Some(dt) = self.dt {
            env.dt = dt;
        }
        if let Some(r) = self.inflation_radius {
            env.inflation_radius = r;
        }
        if let Some(t) = self.max_trial_time {
            env.max_trial_time = t;
        }
        env.validate()?;
        Ok(env)
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(self.id.default_dt())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Grid points per control dimension; defaults to 1,024 for the balance
    /// bot and 20 x 8 x 8 for the race car.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_dim_counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonSection {
    /// Defaults to 30 for the balance bot, 25 for the race car.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub noise_sigma: Vec<f64>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Koopman,
    /// The environment's own dynamics.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub path: PathBuf,
    pub predictor: PredictorKind,
    pub basis_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monomials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sinusoids: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modulated: Option<usize>,
    pub ridge: f64,
    pub sparsity: SparsifyConfig,
    /// Fraction of the dataset held out for evaluation.
    pub holdout: f64,
    /// Open-loop horizon of the k-step evaluation.
    pub eval_horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("model.koopman"),
            predictor: PredictorKind::Koopman,
            basis_seed: 0,
            monomials: None,
            sinusoids: None,
            modulated: None,
            ridge: DEFAULT_RIDGE,
            sparsity: SparsifyConfig::default(),
            holdout: 0.2,
            eval_horizon: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub excitation: OuExcitation,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("dataset.ndjson"),
            steps: 50_000,
            seed: 0,
            excitation: OuExcitation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub modes: Vec<Mode>,
    /// Number of seeds when `seeds` is not given, counted from `first_seed`.
    pub trials: usize,
    pub first_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub user: UserSpec,
    /// Rollout threads per trial; 0 uses every core.
    pub rollout_workers: usize,
    /// Trials run concurrently.
    pub trial_workers: usize,
    /// Pace ticks to wall-clock time.
    pub realtime: bool,
    pub censoring: Censoring,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::UserOnly, Mode::Mpmi],
            trials: 20,
            first_seed: 0,
            seeds: None,
            user: UserSpec::default(),
            rollout_workers: 1,
            trial_workers: 1,
            realtime: false,
            censoring: Censoring::AtMaxTime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sample_counts: Vec<usize>,
    /// Worker counts to sweep; 0 means every core.
    pub workers: Vec<usize>,
    /// Batches timed per point of the sweep.
    pub repeats: usize,
    /// Length of the paced loop run; 0 skips it.
    pub sustain_seconds: f64,
    pub sustain_samples: usize,
    pub sustain_workers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sample_counts: vec![2, 256, 1024, 2048, 4096],
            workers: vec![1, 0],
            repeats: 20,
            sustain_seconds: 30.0,
            sustain_samples: 2048,
            sustain_workers: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub listen: String,
    /// Publish a rollout cloud every this many ticks.
    pub cloud_every: u64,
    /// At most this many trajectories per cloud.
    pub cloud_trajectories: usize,
    pub cloud_step_stride: usize,
    /// Outgoing messages buffered per client before the oldest is dropped.
    pub queue_capacity: usize,
    /// Trials served before exiting; 0 serves until stopped.
    pub trials: usize,
    /// Mode of the first trial; clients may switch it.
    pub mode: Mode,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8765".into(),
            cloud_every: 5,
            cloud_trajectories: 200,
            cloud_step_stride: 3,
            queue_capacity: 256,
            trials: 0,
            mode: Mode::Mpmi,
        }
    }
}

impl RunConfig {
    /// Defaults for `env`.
    pub fn new(env: EnvId) -> Self {
        Self {
            env: EnvConfig::new(env),
            sampling: SamplingConfig::default(),
            horizon: HorizonSection::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            session: SessionConfig::default(),
            bench: BenchConfig::default(),
            bridge: BridgeConfig::default(),
        }
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts empty) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.build(self.session_seeds().first().copied().unwrap_or(0))?;
        if !(self.env.initial_spread.is_finite() && self.env.initial_spread >= 0.0) {
            return Err(Error::Config(format!(
                "initial_spread must be >= 0, got {}",
                self.env.initial_spread
            )));
        }
        self.samples()?;
        self.horizon().validate(self.env.id.state_dim())?;
        if !(self.model.ridge.is_finite() && self.model.ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be >= 0, got {}", self.model.ridge)));
        }
        self.model.sparsity.validate()?;
        if !(self.model.holdout > 0.0 && self.model.holdout < 1.0) {
            return Err(Error::Config(format!("model.holdout must lie in (0, 1), got {}", self.model.holdout)));
        }
        if self.data.steps == 0 {
            return Err(Error::Config("data.steps must be positive".into()));
        }
        if self.session.modes.is_empty() {
            return Err(Error::Config("session.modes is empty".into()));
        }
        if self.session_seeds().is_empty() {
            return Err(Error::Config("session needs at least one seed".into()));
        }
        if self.session.trial_workers == 0 {
            return Err(Error::Config("session.trial_workers must be positive".into()));
        }
        self.session.user.validate(&self.env.id.control_space())?;
        if self.bench.sample_counts.contains(&0) || self.bench.repeats == 0 {
            return Err(Error::Config("bench sample counts and repeats must be positive".into()));
        }
        if !(self.bench.sustain_seconds.is_finite() && self.bench.sustain_seconds >= 0.0) {
            return Err(Error::Config("bench.sustain_seconds must be >= 0".into()));
        }
        if self.bridge.cloud_every == 0 || self.bridge.cloud_trajectories == 0 || self.bridge.cloud_step_stride == 0 {
            return Err(Error::Config("bridge cloud decimation must be positive".into()));
        }
        if self.bridge.queue_capacity == 0 {
            return Err(Error::Config("bridge.queue_capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.sampling.per_dim_counts.clone().unwrap_or_else(|| match self.env.id {
            EnvId::BalanceBot => vec![1024],
            EnvId::RaceCar => vec![20, 8, 8],
        })
    }

    pub fn samples(&self) -> Result<SampleSet> {
        grid(&self.env.id.control_space(), &self.sample_counts())
    }

    pub fn horizon(&self) -> HorizonConfig {
        let steps = self.horizon.steps.unwrap_or(match self.env.id {
            EnvId::BalanceBot => 30,
            EnvId::RaceCar => 25,
        });
        HorizonConfig {
            steps,
            dt: self.env.dt(),
            noise_sigma: self.horizon.noise_sigma.clone(),
            noise_seed: self.horizon.noise_seed,
        }
    }

    pub fn basis_spec(&self) -> BasisSpec {
        let mut spec = BasisSpec::default_for(self.env.id, self.model.basis_seed);
        if let Some(m) = self.model.monomials {
            spec.monomials = m;
        }
        if let Some(s) = self.model.sinusoids {
            spec.sinusoids = s;
        }
        if let Some(m) = self.model.modulated {
            spec.modulated = m;
        }
        spec
    }

    pub fn session_seeds(&self) -> Vec<u64> {
        match &self.session.seeds {
            Some(s) => s.clone(),
            None => (0..self.session.trials as u64).map(|i| self.session.first_seed + i).collect(),
        }
    }
}

/// `a.b.c=value`, where the value is a TOML literal or else a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
