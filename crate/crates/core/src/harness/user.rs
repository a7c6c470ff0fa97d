//! Scripted stand-ins for a human operator.

use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::metrics::read_trial_log;
use crate::mpmi::Operator;
use crate::sampling::ControlSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserSpec {
    Constant {
        value: Vec<f64>,
    },
    /// `center + amplitude * half_width * sin(2 pi t / period + phase)` per
    /// dimension.
    Sinusoid {
        amplitude: Vec<f64>,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Clipped Gaussian increments, `volatility` half-widths per sqrt(s).
    RandomWalk {
        volatility: f64,
    },
    /// Each tick, picks the box corner (or center) that brings the
    /// ground-truth system closest to its barrier within `lookahead` steps.
    Adversarial {
        #[serde(default = "default_lookahead")]
        lookahead: usize,
    },
    /// Inputs recorded in a trial log.
    Replay {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        trial: Option<u64>,
    },
}

fn default_lookahead() -> usize {
    20
}

impl Default for UserSpec {
    fn default() -> Self {
        UserSpec::Adversarial {
            lookahead: default_lookahead(),
        }
    }
}

impl UserSpec {
    pub fn validate(&self, space: &ControlSpace) -> Result<()> {
        let dims = space.dims();
        match self {
            UserSpec::Constant { value } if value.len() != dims => Err(Error::Config(format!(
                "constant user needs {dims} components, got {}",
                value.len()
            ))),
            UserSpec::Sinusoid { amplitude, period, .. } => {
                if amplitude.len() != dims {
                    return Err(Error::Config(format!(
                        "sinusoid user needs {dims} amplitudes, got {}",
                        amplitude.len()
                    )));
                }
                if !(period.is_finite() && *period > 0.0) {
                    return Err(Error::Config(format!("sinusoid period must be positive, got {period}")));
                }
                Ok(())
            }
            UserSpec::RandomWalk { volatility } if !(volatility.is_finite() && *volatility >= 0.0) => {
                Err(Error::Config(format!("random walk volatility must be >= 0, got {volatility}")))
            }
            UserSpec::Adversarial { lookahead: 0 } => Err(Error::Config("adversarial lookahead must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// A seeded operator that follows a [`UserSpec`]. Every input lies inside
/// the control box.
#[derive(Debug, Clone)]
pub struct ScriptedUser {
    spec: UserSpec,
    env: EnvSpec,
    rng: ChaCha8Rng,
    current: Vec<f64>,
    replay: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
}

impl ScriptedUser {
    pub fn new(spec: UserSpec, env: &EnvSpec, seed: u64) -> Result<Self> {
        let space = env.control_space().clone();
        spec.validate(&space)?;
        let replay = match &spec {
            UserSpec::Replay { path, trial } => {
                let (_, trials) = read_trial_log(path)?;
                let rec = match trial {
                    Some(id) => trials.iter().find(|t| t.trial_id == *id),
                    None => trials.first(),
                }
                .ok_or_else(|| Error::Config(format!("{} holds no matching trial", path.display())))?;
                if rec.env_id != env.env_id() {
                    return Err(Error::Config(format!(
                        "replay of a {} trial in a {} session",
                        rec.env_id,
                        env.env_id()
                    )));
                }
                rec.ticks.iter().map(|t| t.u_h.clone()).collect()
            }
            _ => Vec::new(),
        };
        let mut candidates = corners(&space);
        candidates.push(space.intervals().iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect());
        Ok(Self {
            current: space.neutral(),
            spec,
            env: env.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            replay,
            candidates,
        })
    }

    pub fn spec(&self) -> &UserSpec {
        &self.spec
    }

    /// The input for `tick`, or `None` once a replay runs out.
    pub fn next_input(&mut self, tick: u64, state: &[f64]) -> Option<Vec<f64>> {
        let space = self.env.control_space();
        let t = tick as f64 * self.env.dt;
        let u = match &self.spec {
            UserSpec::Constant { value } => value.clone(),
            UserSpec::Sinusoid { amplitude, period, phase } => space
                .intervals()
                .iter()
                .zip(amplitude)
                .map(|(&(lo, hi), a)| 0.5 * (lo + hi) + a * 0.5 * (hi - lo) * (TAU * t / period + phase).sin())
                .collect(),
            UserSpec::RandomWalk { volatility } => {
                let sd = volatility * self.env.dt.sqrt();
                let rng = &mut self.rng;
                self.current
                    .iter()
                    .zip(space.intervals())
                    .map(|(v, &(lo, hi))| {
                        let z: f64 = rng.sample(StandardNormal);
                        v + sd * 0.5 * (hi - lo) * z
                    })
                    .collect()
            }
            UserSpec::Adversarial { lookahead } => self.most_dangerous(state, *lookahead),
            UserSpec::Replay { .. } => return self.replay.get(tick as usize).cloned(),
        };
        self.current = space.clamp(&u).0;
        Some(self.current.clone())
    }

    fn most_dangerous(&self, state: &[f64], lookahead: usize) -> Vec<f64> {
        let mut best: Option<(usize, f64)> = None;
        for (i, u) in self.candidates.iter().enumerate() {
            let mut x = state.to_vec();
            let mut worst = self.env.barrier_margin(&x);
            for _ in 0..lookahead {
                match self.env.step(&x, u) {
                    Ok(next) => x = next,
                    Err(_) => break,
                }
                worst = worst.min(self.env.barrier_margin(&x));
                if self.env.is_failed(&x) {
                    break;
                }
            }
            if best.map_or(true, |(_, w)| worst < w) {
                best = Some((i, worst));
            }
        }
        self.candidates[best.expect("at least one candidate").0].clone()
    }
}

fn corners(space: &ControlSpace) -> Vec<Vec<f64>> {
    let iv = space.intervals();
    (0..1usize << iv.len())
        .map(|mask| {
            iv.iter()
                .enumerate()
                .map(|(d, &(lo, hi))| if mask >> d & 1 == 1 { hi } else { lo })
                .collect()
        })
        .collect()
}

impl Operator for ScriptedUser {
    fn input(&mut self, tick: u64, state: &[f64]) -> Option<Vec<f64>> {
        self.next_input(tick, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BalanceBotParams, EnvId};
    use crate::harness::config::EnvConfig;
    use proptest::prelude::*;

    fn bot() -> EnvSpec {
        EnvSpec::balance_bot(BalanceBotParams::default())
    }

    #[test]
    fn constant_is_clamped() {
        let mut u = ScriptedUser::new(UserSpec::Constant { value: vec![3.0] }, &bot(), 0).unwrap();
        assert_eq!(u.next_input(0, &[0.0; 3]), Some(vec![1.0]));
    }

    #[test]
    fn sinusoid_follows_formula() {
        let spec = UserSpec::Sinusoid {
            amplitude: vec![0.5],
            period: 1.0,
            phase: 0.0,
        };
        let mut u = ScriptedUser::new(spec, &bot(), 0).unwrap();
        let v = u.next_input(25, &[0.0; 3]).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adversary_picks_the_worst_candidate() {
        let env = bot();
        let mut u = ScriptedUser::new(UserSpec::Adversarial { lookahead: 20 }, &env, 0).unwrap();
        for x in [[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [0.3, -1.0, 2.0]] {
            let margin = |c: f64| {
                let mut s = x.to_vec();
                let mut worst = env.barrier_margin(&s);
                for _ in 0..20 {
                    s = env.step(&s, &[c]).unwrap();
                    worst = worst.min(env.barrier_margin(&s));
                    if worst <= 0.0 {
                        break;
                    }
                }
                worst
            };
            let pick = u.next_input(0, &x).unwrap()[0];
            for c in [-1.0, 0.0, 1.0] {
                assert!(margin(pick) <= margin(c), "{x:?}: {pick} vs {c}");
            }
        }
        // mirror states get mirror pushes
        let a = u.next_input(0, &[0.1, 0.0, 0.0]).unwrap()[0];
        let b = u.next_input(0, &[-0.1, 0.0, 0.0]).unwrap()[0];
        assert_eq!(a, -b);
        assert_ne!(a, 0.0);
    }

    #[test]
    fn bad_specs_rejected() {
        let space = ControlSpace::balance_bot();
        assert!(UserSpec::Constant { value: vec![0.0, 0.0] }.validate(&space).is_err());
        assert!(UserSpec::Adversarial { lookahead: 0 }.validate(&space).is_err());
        assert!(UserSpec::Sinusoid {
            amplitude: vec![1.0],
            period: 0.0,
            phase: 0.0
        }
        .validate(&space)
        .is_err());
    }

    proptest! {
        #[test]
        fn inputs_stay_in_box(seed in 0u64..1000, vol in 0.0f64..50.0, ticks in 1u64..200) {
            let env = EnvConfig::new(EnvId::RaceCar).build(seed).unwrap();
            let space = env.control_space().clone();
            let specs = [
                UserSpec::RandomWalk { volatility: vol },
                UserSpec::Sinusoid { amplitude: vec![vol, vol, vol], period: 1.3, phase: 0.1 },
                UserSpec::Constant { value: vec![vol, -vol, vol] },
            ];
            for spec in specs {
                let mut u = ScriptedUser::new(spec, &env, seed).unwrap();
                for k in 0..ticks {
                    let v = u.next_input(k, &[0.0; 6]).unwrap();
                    prop_assert!(space.contains(&v));
                }
            }
        }
    }
}
