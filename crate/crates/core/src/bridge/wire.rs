//! Wire schema: one JSON object per text frame, discriminated by `type`.
//!
//! Server to client: `hello`, `config_snapshot`, `state_update`,
//! `decision_update`, `rollout_cloud`, `trial_event`, `error`.
//! Client to server: `input`, `mode_set`.
//!
//! Every message carries `tick_index`. Server messages reach each client in
//! non-decreasing tick order; client messages carry the last tick the
//! client saw and its own send time (`client_time`, seconds on the
//! client's clock).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvId, EnvSpec, Environment};
use crate::metrics::Outcome;
use crate::mpmi::{Mode, SharedControlDecision};
use crate::rollout::RolloutBatch;
use crate::sampling::SampleSet;

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        tick_index: u64,
        version: u32,
        server: String,
    },
    ConfigSnapshot(ConfigSnapshot),
    StateUpdate {
        tick_index: u64,
        trial_id: u64,
        t: f64,
        state: Vec<f64>,
    },
    DecisionUpdate(DecisionUpdate),
    RolloutCloud(RolloutCloud),
    Input {
        tick_index: u64,
        client_time: f64,
        u: Vec<f64>,
    },
    ModeSet {
        tick_index: u64,
        client_time: f64,
        mode: Mode,
    },
    TrialEvent {
        tick_index: u64,
        trial_id: u64,
        event: TrialEvent,
        t: f64,
    },
    Error {
        tick_index: u64,
        message: String,
    },
}

impl WireMessage {
    pub fn tick_index(&self) -> u64 {
        match self {
            WireMessage::Hello { tick_index, .. }
            | WireMessage::StateUpdate { tick_index, .. }
            | WireMessage::Input { tick_index, .. }
            | WireMessage::ModeSet { tick_index, .. }
            | WireMessage::TrialEvent { tick_index, .. }
            | WireMessage::Error { tick_index, .. } => *tick_index,
            WireMessage::ConfigSnapshot(c) => c.tick_index,
            WireMessage::DecisionUpdate(d) => d.tick_index,
            WireMessage::RolloutCloud(c) => c.tick_index,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialEvent {
    Started,
    Failed,
    Survived,
}

impl From<Outcome> for TrialEvent {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Survived => TrialEvent::Survived,
            Outcome::Failed => TrialEvent::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub seed: u64,
    pub half_width: f64,
    pub closed: bool,
    pub centerline: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub tick_index: u64,
    pub env_id: EnvId,
    pub dt: f64,
    pub max_trial_time: f64,
    pub state_dim: usize,
    pub control_intervals: Vec<[f64; 2]>,
    pub inflation_radius: f64,
    pub physics: BTreeMap<String, f64>,
    pub track: Option<TrackSnapshot>,
    pub samples: usize,
    pub horizon_steps: usize,
    pub mode: Mode,
    pub config_hash: String,
}

impl ConfigSnapshot {
    pub fn new(env: &EnvSpec, samples: usize, horizon_steps: usize, mode: Mode, config_hash: String) -> Self {
        Self {
            tick_index: 0,
            env_id: env.env_id(),
            dt: env.dt,
            max_trial_time: env.max_trial_time,
            state_dim: env.state_dim(),
            control_intervals: env.control_space.intervals().iter().map(|&(lo, hi)| [lo, hi]).collect(),
            inflation_radius: env.inflation_radius,
            physics: env.physics_params().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            track: env.track().map(|t| TrackSnapshot {
                seed: t.seed(),
                half_width: t.half_width(),
                closed: t.is_closed(),
                centerline: t.centerline().to_vec(),
            }),
            samples,
            horizon_steps,
            mode,
            config_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionUpdate {
    pub tick_index: u64,
    pub mode: Mode,
    pub u_h: Vec<f64>,
    pub u_r: Vec<f64>,
    pub deviation: f64,
    pub deviation_to_closest_safe: f64,
    pub n_safe: usize,
    pub percent_safe: f64,
    pub fallback_used: bool,
    pub input_clamped: bool,
    pub compute_time: f64,
    pub overrun: bool,
    /// `client_time` of the input message applied on this tick, if one
    /// arrived since the previous tick.
    pub input_client_time: Option<f64>,
}

impl DecisionUpdate {
    pub fn new(d: &SharedControlDecision, mode: Mode, overrun: bool, input_client_time: Option<f64>) -> Self {
        Self {
            tick_index: d.tick_index,
            mode,
            u_h: d.u_h.clone(),
            u_r: d.u_r.clone(),
            deviation: d.deviation,
            deviation_to_closest_safe: d.deviation_to_closest_safe,
            n_safe: d.n_safe,
            percent_safe: d.percent_safe,
            fallback_used: d.fallback_used,
            input_clamped: d.input_clamped,
            compute_time: d.compute_time,
            overrun,
            input_client_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudTrajectory {
    pub index: usize,
    pub control: Vec<f64>,
    pub safe_steps: usize,
    pub fully_safe: bool,
    /// Predicted states at steps `0, step_stride, 2 step_stride, ...` up to
    /// the last computed one.
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutCloud {
    pub tick_index: u64,
    pub total_samples: usize,
    pub steps: usize,
    pub sample_stride: usize,
    pub step_stride: usize,
    pub trajectories: Vec<CloudTrajectory>,
}

/// Every `sample_stride`-th trajectory of `batch`, every `step_stride`-th
/// state of each.
pub fn decimate(batch: &RolloutBatch, samples: &SampleSet, sample_stride: usize, step_stride: usize) -> RolloutCloud {
    let sample_stride = sample_stride.max(1);
    let step_stride = step_stride.max(1);
    let trajectories = (0..batch.len())
        .step_by(sample_stride)
        .map(|i| CloudTrajectory {
            index: i,
            control: samples.sample(i).to_vec(),
            safe_steps: batch.safe_steps()[i],
            fully_safe: batch.fully_safe(i),
            points: (0..=batch.steps())
                .step_by(step_stride)
                .map_while(|s| batch.state(i, s).map(<[f64]>::to_vec))
                .collect(),
        })
        .collect();
    RolloutCloud {
        tick_index: batch.tick(),
        total_samples: batch.len(),
        steps: batch.steps(),
        sample_stride,
        step_stride,
        trajectories,
    }
}

/// Sample stride that keeps a cloud of `n` trajectories under `max`.
pub fn sample_stride_for(n: usize, max: usize) -> usize {
    n.div_ceil(max.max(1)).max(1)
}
