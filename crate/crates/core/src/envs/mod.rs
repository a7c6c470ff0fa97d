//! Ground-truth simulators, safety predicates and data collection.

mod balance_bot;
mod dataset;
mod race_car;
mod track;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use balance_bot::{pendulum_energy, step_balance_bot, BalanceBotParams, BalanceBotState};
pub use dataset::{collect_dataset, Dataset, DatasetHeader, OuExcitation, Transition};
pub use race_car::{step_race_car, RaceCarParams, RaceCarState, YawResponse};
pub use track::{generate_track, Track, TrackParams};

use crate::error::{Error, Result};
use crate::sampling::ControlSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    BalanceBot,
    RaceCar,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::BalanceBot => "balance_bot",
            EnvId::RaceCar => "race_car",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvId::BalanceBot => BalanceBotState::DIM,
            EnvId::RaceCar => RaceCarState::DIM,
        }
    }

    pub fn control_space(self) -> ControlSpace {
        match self {
            EnvId::BalanceBot => ControlSpace::balance_bot(),
            EnvId::RaceCar => ControlSpace::race_car(),
        }
    }

    pub fn default_dt(self) -> f64 {
        match self {
            EnvId::BalanceBot => 0.01,
            EnvId::RaceCar => 1.0 / 60.0,
        }
    }

    pub fn default_inflation(self) -> f64 {
        match self {
            EnvId::BalanceBot => 0.15,
            EnvId::RaceCar => 0.5,
        }
    }

    pub fn default_max_trial_time(self) -> f64 {
        match self {
            EnvId::BalanceBot => 20.0,
            EnvId::RaceCar => 30.0,
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balance_bot" => Ok(EnvId::BalanceBot),
            "race_car" => Ok(EnvId::RaceCar),
            other => Err(Error::Config(format!("unknown env_id {other:?}"))),
        }
    }
}

/// A system that can be stepped and checked for safety on raw state slices.
pub trait Environment: Sync {
    fn env_id(&self) -> EnvId;
    fn state_dim(&self) -> usize;
    fn control_space(&self) -> &ControlSpace;
    fn dt(&self) -> f64;
    fn max_trial_time(&self) -> f64;
    fn step(&self, state: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    /// Inside the inflated barrier, strictly.
    fn is_safe(&self, state: &[f64]) -> bool;
    /// Past the physical barrier: the trial-ending condition.
    fn is_failed(&self, state: &[f64]) -> bool;
}

#[derive(Debug, Clone)]
pub enum Physics {
    BalanceBot(BalanceBotParams),
    RaceCar { params: RaceCarParams, track: Arc<Track> },
}

/// Dynamics, safety geometry and timing of one environment instance.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub physics: Physics,
    pub dt: f64,
    pub control_space: ControlSpace,
    /// Radians of pitch for the balance bot, meters of track distance for the car.
    pub inflation_radius: f64,
    pub max_trial_time: f64,
}

impl EnvSpec {
    pub fn balance_bot(params: BalanceBotParams) -> Self {
        let id = EnvId::BalanceBot;
        Self {
            physics: Physics::BalanceBot(params),
            dt: id.default_dt(),
            control_space: id.control_space(),
            inflation_radius: id.default_inflation(),
            max_trial_time: id.default_max_trial_time(),
        }
    }

    pub fn race_car(params: RaceCarParams, track: Track) -> Self {
        let id = EnvId::RaceCar;
        Self {
            physics: Physics::RaceCar {
                params,
                track: Arc::new(track),
            },
            dt: id.default_dt(),
            control_space: id.control_space(),
            inflation_radius: id.default_inflation(),
            max_trial_time: id.default_max_trial_time(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.inflation_radius.is_finite() && self.inflation_radius >= 0.0) {
            return Err(Error::Config(format!(
                "inflation_radius must be >= 0, got {}",
                self.inflation_radius
            )));
        }
        if !(self.max_trial_time.is_finite() && self.max_trial_time >= self.dt) {
            return Err(Error::Config(format!(
                "max_trial_time {} must be at least one timestep",
                self.max_trial_time
            )));
        }
        if self.control_space != self.env_id().control_space() {
            return Err(Error::Config(format!(
                "{} control space must be {:?}",
                self.env_id(),
                self.env_id().control_space().intervals()
            )));
        }
        match &self.physics {
            Physics::BalanceBot(p) => p.validate(),
            Physics::RaceCar { params, .. } => params.validate(),
        }
    }

    pub fn track(&self) -> Option<&Track> {
        match &self.physics {
            Physics::RaceCar { track, .. } => Some(track),
            Physics::BalanceBot(_) => None,
        }
    }

    /// Physics parameters by name, for config snapshots and logs.
    pub fn physics_params(&self) -> BTreeMap<&'static str, f64> {
        match &self.physics {
            Physics::BalanceBot(p) => BTreeMap::from([
                ("max_speed", p.max_speed),
                ("lag", p.lag),
                ("max_accel", p.max_accel),
                ("gravity", p.gravity),
                ("length", p.length),
                ("damping", p.damping),
                ("pitch_limit", p.pitch_limit),
            ]),
            Physics::RaceCar { params: p, track } => BTreeMap::from([
                ("max_steer", p.max_steer),
                ("gas_accel", p.gas_accel),
                ("brake_accel", p.brake_accel),
                ("wheelbase", p.wheelbase),
                ("friction", p.friction),
                ("gravity", p.gravity),
                ("drag", p.drag),
                ("half_width", track.half_width()),
            ]),
        }
    }

    /// Distance of the guarded quantity from the physical barrier: pitch
    /// margin for the balance bot, distance to the road edge for the car.
    /// Negative once failed.
    pub fn barrier_margin(&self, state: &[f64]) -> f64 {
        match &self.physics {
            Physics::BalanceBot(p) => p.pitch_limit - state[0].abs(),
            Physics::RaceCar { track, .. } => {
                track.half_width() - track.distance_to_centerline([state[0], state[1]])
            }
        }
    }

    /// Trial start: a small perturbation of upright rest, or of rest at the
    /// track start pose.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.perturbed_start(rng, 1.0)
    }

    /// Start states for data collection, spread `spread` times wider than
    /// trial starts.
    pub fn perturbed_start<R: Rng + ?Sized>(&self, rng: &mut R, spread: f64) -> Vec<f64> {
        match &self.physics {
            Physics::BalanceBot(_) => BalanceBotState {
                pitch: rng.gen_range(-0.05..=0.05) * spread,
                pitch_rate: rng.gen_range(-0.05..=0.05) * spread,
                speed: rng.gen_range(-0.05..=0.05) * spread,
            }
            .to_array()
            .to_vec(),
            Physics::RaceCar { track, .. } => {
                let (p, heading) = track.start_pose();
                car_start(p, heading, rng, spread)
            }
        }
    }

    /// Start states for data collection. Race-car episodes begin at a random
    /// point along the track so that every heading is represented.
    pub fn collection_start<R: Rng + ?Sized>(&self, rng: &mut R, spread: f64) -> Vec<f64> {
        match &self.physics {
            Physics::RaceCar { track, .. } => {
                let c = track.centerline();
                let i = rng.gen_range(0..c.len() - 1);
                let (a, b) = (c[i], c[i + 1]);
                car_start(a, (b[1] - a[1]).atan2(b[0] - a[0]), rng, spread)
            }
            Physics::BalanceBot(_) => self.perturbed_start(rng, spread),
        }
    }
}

fn car_start<R: Rng + ?Sized>(p: [f64; 2], heading: f64, rng: &mut R, spread: f64) -> Vec<f64> {
    let lateral = rng.gen_range(-0.3..=0.3) * spread.min(3.0);
    let heading = heading + rng.gen_range(-0.05..=0.05) * spread;
    let speed = if spread > 1.0 { rng.gen_range(0.0..=0.5 * spread) } else { 0.0 };
    RaceCarState {
        x: p[0] - lateral * heading.sin(),
        y: p[1] + lateral * heading.cos(),
        heading,
        vx: speed * heading.cos(),
        vy: speed * heading.sin(),
        heading_rate: 0.0,
    }
    .to_array()
    .to_vec()
}

impl Environment for EnvSpec {
    fn env_id(&self) -> EnvId {
        match self.physics {
            Physics::BalanceBot(_) => EnvId::BalanceBot,
            Physics::RaceCar { .. } => EnvId::RaceCar,
        }
    }

    fn state_dim(&self) -> usize {
        self.env_id().state_dim()
    }

    fn control_space(&self) -> &ControlSpace {
        &self.control_space
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn max_trial_time(&self) -> f64 {
        self.max_trial_time
    }

    fn step(&self, state: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() || u.len() != self.control_space.dims() {
            return Err(Error::Domain(format!(
                "{} expects state/control of length {}/{}, got {}/{}",
                self.env_id(),
                self.state_dim(),
                self.control_space.dims(),
                state.len(),
                u.len()
            )));
        }
        match &self.physics {
            Physics::BalanceBot(p) => {
                step_balance_bot(BalanceBotState::from_slice(state), u[0], self.dt, p).map(|s| s.to_array().to_vec())
            }
            Physics::RaceCar { params, .. } => {
                step_race_car(RaceCarState::from_slice(state), u, self.dt, params).map(|s| s.to_array().to_vec())
            }
        }
    }

    fn is_safe(&self, state: &[f64]) -> bool {
        match &self.physics {
            Physics::BalanceBot(p) => state[0].abs() < p.pitch_limit - self.inflation_radius,
            Physics::RaceCar { track, .. } => {
                track.distance_to_centerline([state[0], state[1]]) < track.half_width() - self.inflation_radius
            }
        }
    }

    fn is_failed(&self, state: &[f64]) -> bool {
        // NaN compares false, so a diverged state never counts as inside
        !(self.barrier_margin(state) > 0.0)
    }
}

/// Wraps an environment so that every state is safe and nothing fails.
#[derive(Debug, Clone)]
pub struct AlwaysSafe<E>(pub E);

impl<E: Environment> Environment for AlwaysSafe<E> {
    fn env_id(&self) -> EnvId {
        self.0.env_id()
    }
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn control_space(&self) -> &ControlSpace {
        self.0.control_space()
    }
    fn dt(&self) -> f64 {
        self.0.dt()
    }
    fn max_trial_time(&self) -> f64 {
        self.0.max_trial_time()
    }
    fn step(&self, state: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.0.step(state, u)
    }
    fn is_safe(&self, _state: &[f64]) -> bool {
        true
    }
    fn is_failed(&self, _state: &[f64]) -> bool {
        false
    }
}

impl<E: Environment + ?Sized> Environment for &E {
    fn env_id(&self) -> EnvId {
        (**self).env_id()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_space(&self) -> &ControlSpace {
        (**self).control_space()
    }
    fn dt(&self) -> f64 {
        (**self).dt()
    }
    fn max_trial_time(&self) -> f64 {
        (**self).max_trial_time()
    }
    fn step(&self, state: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        (**self).step(state, u)
    }
    fn is_safe(&self, state: &[f64]) -> bool {
        (**self).is_safe(state)
    }
    fn is_failed(&self, state: &[f64]) -> bool {
        (**self).is_failed(state)
    }
}

/// Classic fixed-step fourth-order Runge-Kutta.
pub(crate) fn rk4<const N: usize>(x: [f64; N], h: f64, f: impl Fn([f64; N]) -> [f64; N]) -> [f64; N] {
    let shift = |base: [f64; N], k: [f64; N], s: f64| -> [f64; N] { std::array::from_fn(|i| base[i] + s * k[i]) };
    let k1 = f(x);
    let k2 = f(shift(x, k1, h / 2.0));
    let k3 = f(shift(x, k2, h / 2.0));
    let k4 = f(shift(x, k3, h));
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bot() -> EnvSpec {
        EnvSpec::balance_bot(BalanceBotParams::default())
    }

    fn car() -> EnvSpec {
        EnvSpec::race_car(RaceCarParams::default(), generate_track(3, &TrackParams::default()).unwrap())
    }

    #[test]
    fn balance_bot_safety_boundaries() {
        let env = bot();
        let limit = 0.8;
        let r = env.inflation_radius;
        assert!(env.is_safe(&[0.0, 0.0, 0.0]));
        assert!(!env.is_safe(&[limit - r, 0.0, 0.0]));
        let band = [limit - r / 2.0, 0.0, 0.0];
        assert!(!env.is_safe(&band));
        assert!(!env.is_failed(&band));
        assert!(env.is_failed(&[limit, 0.0, 0.0]));
        assert!(env.is_failed(&[-limit - 0.1, 0.0, 0.0]));
    }

    #[test]
    fn race_car_edge_is_failed() {
        let env = car();
        let track = env.track().unwrap();
        let p = track.centerline()[0];
        let on_center = [p[0], p[1], 0.0, 0.0, 0.0, 0.0];
        assert!(env.is_safe(&on_center));
        assert!(!env.is_failed(&on_center));

        let straight = Track::from_centerline(0, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1.0, false);
        let env = EnvSpec::race_car(RaceCarParams::default(), straight);
        assert!(env.is_failed(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        assert!(!env.is_failed(&[1.0, 0.999, 0.0, 0.0, 0.0, 0.0]));
        assert!(!env.is_safe(&[1.0, 0.5, 0.0, 0.0, 0.0, 0.0]));
        assert!(env.is_safe(&[1.0, 0.499, 0.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn nan_state_is_failed_and_unsafe() {
        let env = bot();
        assert!(env.is_failed(&[f64::NAN, 0.0, 0.0]));
        assert!(!env.is_safe(&[f64::NAN, 0.0, 0.0]));
    }

    #[test]
    fn validation() {
        let mut env = bot();
        env.dt = 0.0;
        assert!(env.validate().is_err());
        let mut env = bot();
        env.inflation_radius = -1.0;
        assert!(env.validate().is_err());
        assert!(bot().validate().is_ok());
        assert!(car().validate().is_ok());
    }

    #[test]
    fn physics_params_named() {
        let params = bot().physics_params();
        assert_eq!(params["pitch_limit"], 0.8);
        assert_eq!(car().physics_params()["half_width"], 2.5);
    }

    proptest! {
        #[test]
        fn failed_implies_unsafe(pitch in -1.5f64..1.5, x in -30.0f64..30.0, y in -30.0f64..30.0) {
            let b = bot();
            let s = [pitch, 0.0, 0.0];
            prop_assert!(!b.is_failed(&s) || !b.is_safe(&s));
            let c = car();
            let s = [x, y, 0.0, 0.0, 0.0, 0.0];
            prop_assert!(!c.is_failed(&s) || !c.is_safe(&s));
        }

        #[test]
        fn inflation_never_makes_unsafe_safe(pitch in -1.0f64..1.0, r0 in 0.0f64..0.5, extra in 0.0f64..0.5) {
            let mut a = bot();
            a.inflation_radius = r0;
            let mut b = bot();
            b.inflation_radius = r0 + extra;
            let s = [pitch, 0.0, 0.0];
            prop_assert!(a.is_safe(&s) || !b.is_safe(&s));
        }
    }
}
