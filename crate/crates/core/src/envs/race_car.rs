//! Friction-limited kinematic bicycle.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::sampling::ControlSpace;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RaceCarState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// World-frame velocity, m/s.
    pub vx: f64,
    pub vy: f64,
    pub heading_rate: f64,
}

impl RaceCarState {
    pub const DIM: usize = 6;

    pub fn to_array(self) -> [f64; 6] {
        [self.x, self.y, self.heading, self.vx, self.vy, self.heading_rate]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            x: s[0],
            y: s[1],
            heading: s[2],
            vx: s[3],
            vy: s[4],
            heading_rate: s[5],
        }
    }

    /// Forward body speed: world velocity projected on the heading, never negative.
    pub fn body_speed(&self) -> f64 {
        (self.vx * self.heading.cos() + self.vy * self.heading.sin()).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceCarParams {
    /// Steering angle at full lock, rad.
    pub max_steer: f64,
    /// Acceleration at full gas, m/s^2.
    pub gas_accel: f64,
    /// Deceleration at full brake, m/s^2.
    pub brake_accel: f64,
    pub wheelbase: f64,
    /// Tyre friction coefficient.
    pub friction: f64,
    pub gravity: f64,
    /// Linear rolling drag, 1/s. Caps the top speed at `gas_accel / drag`.
    pub drag: f64,
}

impl Default for RaceCarParams {
    fn default() -> Self {
        Self {
            max_steer: 0.5,
            gas_accel: 6.0,
            brake_accel: 10.0,
            wheelbase: 0.3,
            friction: 1.0,
            gravity: 9.81,
            drag: 0.5,
        }
    }
}

/// Yaw rate actually achieved and whether the tyres are sliding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawResponse {
    pub rate: f64,
    pub kinematic_rate: f64,
    pub slipping: bool,
}

impl RaceCarParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_steer", self.max_steer),
            ("gas_accel", self.gas_accel),
            ("brake_accel", self.brake_accel),
            ("wheelbase", self.wheelbase),
            ("friction", self.friction),
            ("gravity", self.gravity),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("race car {name} must be positive, got {v}")));
            }
        }
        if !(self.drag.is_finite() && self.drag >= 0.0) {
            return Err(Error::Config(format!("race car drag must be >= 0, got {}", self.drag)));
        }
        Ok(())
    }

    /// No-slip yaw rate `v tan(delta) / L`, scaled down when the lateral
    /// acceleration it demands exceeds the friction limit.
    pub fn yaw_response(&self, speed: f64, steer: f64) -> YawResponse {
        let delta = steer * self.max_steer;
        let kinematic_rate = speed * delta.tan() / self.wheelbase;
        let required = (speed * kinematic_rate).abs();
        let limit = self.friction * self.gravity;
        if required > limit {
            YawResponse {
                rate: kinematic_rate * limit / required,
                kinematic_rate,
                slipping: true,
            }
        } else {
            YawResponse {
                rate: kinematic_rate,
                kinematic_rate,
                slipping: false,
            }
        }
    }

    fn longitudinal(&self, u: &[f64], speed: f64) -> f64 {
        let accel = u[1] * self.gas_accel + u[2] * self.brake_accel - self.drag * speed;
        if speed <= 0.0 && accel < 0.0 {
            0.0
        } else {
            accel
        }
    }
}

/// One RK4 step of the bicycle over `(x, y, heading, speed)`; the world-frame
/// velocity and yaw rate are re-derived from the end-of-step speed.
pub fn step_race_car(state: RaceCarState, u: &[f64], dt: f64, params: &RaceCarParams) -> Result<RaceCarState> {
    ensure_finite("race car state", &state.to_array())?;
    ensure_finite("race car control", u)?;
    if !ControlSpace::race_car().contains(u) {
        return Err(Error::Domain(format!("race car control {u:?} outside the control box")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("timestep must be positive, got {dt}")));
    }
    let start = [state.x, state.y, state.heading, state.body_speed()];
    let end = super::rk4(start, dt, |s| {
        let v = s[3].max(0.0);
        [
            v * s[2].cos(),
            v * s[2].sin(),
            params.yaw_response(v, u[0]).rate,
            params.longitudinal(u, s[3]),
        ]
    });
    let speed = end[3].max(0.0);
    Ok(RaceCarState {
        x: end[0],
        y: end[1],
        heading: end[2],
        vx: speed * end[2].cos(),
        vy: speed * end[2].sin(),
        heading_rate: params.yaw_response(speed, u[0]).rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DT: f64 = 1.0 / 60.0;

    #[test]
    fn rest_is_fixed_point() {
        let p = RaceCarParams::default();
        let s = RaceCarState {
            x: 3.0,
            y: -1.0,
            heading: 0.7,
            ..Default::default()
        };
        assert_eq!(step_race_car(s, &[0.0, 0.0, 0.0], DT, &p).unwrap(), s);
        // braking at rest never reverses
        assert_eq!(step_race_car(s, &[0.0, 0.0, -1.0], DT, &p).unwrap(), s);
    }

    #[test]
    fn straight_line_acceleration() {
        let p = RaceCarParams::default();
        let s = RaceCarState::default();
        let n = step_race_car(s, &[0.0, 1.0, 0.0], DT, &p).unwrap();
        assert!(n.vx > 0.0);
        assert!(n.vy.abs() < 1e-15);
        assert_eq!(n.heading, 0.0);
        assert!(n.x > 0.0);
    }

    #[test]
    fn skid_limits_yaw_rate() {
        let p = RaceCarParams::default();
        let speed = 6.0;
        let s = RaceCarState {
            vx: speed,
            ..Default::default()
        };
        let yaw = p.yaw_response(speed, 1.0);
        assert!(yaw.slipping);
        let n = step_race_car(s, &[1.0, 0.0, 0.0], DT, &p).unwrap();
        let v = n.body_speed();
        let kinematic = v * 0.5f64.tan() / 0.3;
        assert!(n.heading_rate < kinematic);
        // saturated: lateral acceleration sits exactly on the friction circle
        assert!((n.heading_rate * v - 9.81).abs() < 1e-9);

        // reference integration with the slip rule applied by hand
        let mut r = [0.0, 0.0, 0.0, speed];
        let f = |s: [f64; 4]| {
            let v = s[3];
            let kin = v * 0.5f64.tan() / 0.3;
            let w = if (v * kin).abs() > 9.81 { 9.81 / v } else { kin };
            [v * s[2].cos(), v * s[2].sin(), w, -0.5 * v]
        };
        let k1 = f(r);
        let k2 = f(std::array::from_fn(|i| r[i] + DT / 2.0 * k1[i]));
        let k3 = f(std::array::from_fn(|i| r[i] + DT / 2.0 * k2[i]));
        let k4 = f(std::array::from_fn(|i| r[i] + DT * k3[i]));
        r = std::array::from_fn(|i| r[i] + DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        assert!((n.x - r[0]).abs() < 1e-12);
        assert!((n.y - r[1]).abs() < 1e-12);
        assert!((n.heading - r[2]).abs() < 1e-12);
        assert!((n.body_speed() - r[3]).abs() < 1e-12);
    }

    #[test]
    fn low_speed_turn_is_kinematic() {
        let p = RaceCarParams::default();
        let yaw = p.yaw_response(1.0, 0.5);
        assert!(!yaw.slipping);
        assert_eq!(yaw.rate, yaw.kinematic_rate);
    }

    #[test]
    fn rejects_bad_input() {
        let p = RaceCarParams::default();
        let s = RaceCarState::default();
        assert!(step_race_car(s, &[0.0, 2.0, 0.0], DT, &p).is_err());
        assert!(step_race_car(s, &[f64::NAN, 0.0, 0.0], DT, &p).is_err());
        let bad = RaceCarState { x: f64::INFINITY, ..s };
        assert!(matches!(step_race_car(bad, &[0.0; 3], DT, &p), Err(Error::Domain(_))));
    }
}
