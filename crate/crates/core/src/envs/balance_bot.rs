//! Planar wheeled inverted pendulum.
//!
//! The wheel command sets a target base speed; the base tracks it through a
//! first-order lag with saturated acceleration, and the body is tipped by
//! gravity against the base acceleration.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BalanceBotState {
    /// Body angle from vertical, radians. Positive tips forward.
    pub pitch: f64,
    pub pitch_rate: f64,
    /// Linear velocity of the wheel base, m/s.
    pub speed: f64,
}

impl BalanceBotState {
    pub const DIM: usize = 3;

    pub fn to_array(self) -> [f64; 3] {
        [self.pitch, self.pitch_rate, self.speed]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            pitch: x[0],
            pitch_rate: x[1],
            speed: x[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceBotParams {
    /// Wheel speed at full command, m/s.
    pub max_speed: f64,
    /// Speed-tracking time constant, s.
    pub lag: f64,
    /// Base acceleration limit, m/s^2.
    pub max_accel: f64,
    pub gravity: f64,
    /// Pivot-to-center-of-mass length, m.
    pub length: f64,
    /// Viscous damping on pitch rate, 1/s.
    pub damping: f64,
    /// Pitch at which the body touches the ground, rad.
    pub pitch_limit: f64,
}

impl Default for BalanceBotParams {
    fn default() -> Self {
        Self {
            max_speed: 10.0,
            lag: 0.15,
            max_accel: 40.0,
            gravity: 9.81,
            length: 0.5,
            damping: 0.05,
            pitch_limit: 0.8,
        }
    }
}

impl BalanceBotParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_speed", self.max_speed),
            ("lag", self.lag),
            ("max_accel", self.max_accel),
            ("gravity", self.gravity),
            ("length", self.length),
            ("pitch_limit", self.pitch_limit),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("balance bot {name} must be positive, got {v}")));
            }
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(Error::Config(format!("balance bot damping must be >= 0, got {}", self.damping)));
        }
        Ok(())
    }

    /// Base acceleration produced by `command` at the current base speed.
    pub fn base_accel(&self, command: f64, speed: f64) -> f64 {
        ((command * self.max_speed - speed) / self.lag).clamp(-self.max_accel, self.max_accel)
    }

    fn derivative(&self, x: [f64; 3], command: f64) -> [f64; 3] {
        let [pitch, rate, speed] = x;
        let a = self.base_accel(command, speed);
        let pitch_acc = (self.gravity * pitch.sin() - a * pitch.cos()) / self.length - self.damping * rate;
        [rate, pitch_acc, a]
    }
}

/// One RK4 step of the balance bot with the wheel command held over `dt`.
pub fn step_balance_bot(
    state: BalanceBotState,
    command: f64,
    dt: f64,
    params: &BalanceBotParams,
) -> Result<BalanceBotState> {
    let x = state.to_array();
    ensure_finite("balance bot state", &x)?;
    ensure_finite("balance bot command", &[command])?;
    if !(-1.0..=1.0).contains(&command) {
        return Err(Error::Domain(format!("balance bot command {command} outside [-1, 1]")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("timestep must be positive, got {dt}")));
    }
    let next = super::rk4(x, dt, |s| params.derivative(s, command));
    Ok(BalanceBotState::from_slice(&next))
}

/// Mechanical energy per unit mass-length squared of the undamped, unactuated
/// body: `pitch_rate^2 / 2 + (g / L) cos(pitch)`.
pub fn pendulum_energy(state: &BalanceBotState, params: &BalanceBotParams) -> f64 {
    0.5 * state.pitch_rate * state.pitch_rate + params.gravity / params.length * state.pitch.cos()
}
