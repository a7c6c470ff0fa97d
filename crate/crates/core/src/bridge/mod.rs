//! Streaming boundary between the live loop and interactive clients:
//! telemetry out, operator input and mode switches in.

mod hub;
mod server;
mod wire;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

pub use hub::{ClientQueue, Hub, InputHandoff};
pub use server::BridgeServer;
pub use wire::{
    decimate, sample_stride_for, CloudTrajectory, ConfigSnapshot, DecisionUpdate, RolloutCloud, TrackSnapshot,
    TrialEvent, WireMessage, WIRE_VERSION,
};

use crate::error::{Error, Result};
use crate::harness::{load_model, PredictorKind, RunConfig, TrialSetup};
use crate::metrics::{write_trial_log, Provenance, TrialRecord};
use crate::mpmi::{run_trial, Mode, Operator, SafetyFilter, TickView, TrialOptions};
use crate::rollout::{GroundTruth, Predictor, RolloutEngine};
use crate::sampling::SampleSet;

/// Operator backed by the input handoff that publishes every tick.
pub struct BridgeOperator<'a> {
    hub: &'a Hub,
    handoff: &'a InputHandoff,
    stop: &'a AtomicBool,
    tick: &'a AtomicU64,
    samples: &'a SampleSet,
    trial_id: u64,
    dt: f64,
    tick_offset: u64,
    cloud_every: u64,
    sample_stride: usize,
    step_stride: usize,
    input_time: Option<f64>,
    mode_seen: Option<Mode>,
}

impl<'a> BridgeOperator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hub: &'a Hub,
        handoff: &'a InputHandoff,
        stop: &'a AtomicBool,
        tick: &'a AtomicU64,
        samples: &'a SampleSet,
        config: &crate::harness::BridgeConfig,
        trial_id: u64,
        dt: f64,
    ) -> Self {
        Self {
            hub,
            handoff,
            stop,
            tick,
            samples,
            trial_id,
            dt,
            tick_offset: tick.load(Ordering::Relaxed),
            cloud_every: config.cloud_every,
            sample_stride: sample_stride_for(samples.len(), config.cloud_trajectories),
            step_stride: config.cloud_step_stride,
            input_time: None,
            mode_seen: None,
        }
    }

    /// Session-wide tick index of a trial tick.
    fn global(&self, tick: u64) -> u64 {
        self.tick_offset + tick
    }
}

impl Operator for BridgeOperator<'_> {
    fn input(&mut self, tick: u64, _state: &[f64]) -> Option<Vec<f64>> {
        self.tick.store(self.global(tick), Ordering::Relaxed);
        let (u, time) = self.handoff.take_input()?;
        self.input_time = Some(time);
        Some(u)
    }

    fn mode_request(&mut self) -> Option<Mode> {
        let m = self.handoff.take_mode();
        if m.is_some() {
            self.mode_seen = m;
        }
        m
    }

    fn observe(&mut self, view: &TickView<'_>) {
        let tick_index = self.global(view.tick);
        self.hub.publish(&WireMessage::StateUpdate {
            tick_index,
            trial_id: self.trial_id,
            t: view.t,
            state: view.state.to_vec(),
        });
        let mut d = DecisionUpdate::new(
            view.decision,
            view.mode,
            view.decision.compute_time > self.dt,
            self.input_time.take(),
        );
        d.tick_index = tick_index;
        self.hub.publish(&WireMessage::DecisionUpdate(d));
        if view.tick % self.cloud_every == 0 && self.hub.client_count() > 0 {
            let mut cloud = decimate(view.batch, self.samples, self.sample_stride, self.step_stride);
            cloud.tick_index = tick_index;
            self.hub.publish(&WireMessage::RolloutCloud(cloud));
        }
    }

    fn stop_requested(&mut self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

/// How a live session is run.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    /// Pace ticks to wall-clock time.
    pub realtime: bool,
    /// Trials before returning; 0 runs until `stop` is set.
    pub max_trials: usize,
    pub mode: Mode,
}

/// Back-to-back trials over the configured seeds, driven by the handoff and
/// published to the hub. Returns the completed trials.
pub fn serve_session<P: Predictor>(
    config: &RunConfig,
    predictor: impl Fn(&TrialSetup) -> P,
    hub: &Hub,
    handoff: &InputHandoff,
    stop: &AtomicBool,
    tick: &AtomicU64,
    options: &SessionOptions,
) -> Result<Vec<TrialRecord>> {
    let seeds = config.session_seeds();
    let samples = config.samples()?;
    let engine = Arc::new(RolloutEngine::new(config.session.rollout_workers)?);
    let mut mode = options.mode;
    let mut trials = Vec::new();
    for (i, &seed) in seeds.iter().cycle().enumerate() {
        if stop.load(Ordering::Relaxed) || (options.max_trials > 0 && trials.len() >= options.max_trials) {
            break;
        }
        let setup = TrialSetup::new(config, seed)?;
        let mut filter = SafetyFilter::new(predictor(&setup), samples.clone(), setup.horizon.clone(), engine.clone())?;
        if let Some(m) = handoff.take_mode() {
            mode = m;
        }
        hub.set_snapshot(ConfigSnapshot {
            tick_index: tick.load(Ordering::Relaxed),
            ..ConfigSnapshot::new(&setup.env, samples.len(), setup.horizon.steps, mode, config.hash())
        });
        let trial_id = i as u64;
        hub.publish(&WireMessage::TrialEvent {
            tick_index: tick.load(Ordering::Relaxed),
            trial_id,
            event: TrialEvent::Started,
            t: 0.0,
        });
        let mut op = BridgeOperator::new(hub, handoff, stop, tick, &samples, &config.bridge, trial_id, setup.env.dt);
        let options = TrialOptions {
            trial_id,
            seed,
            mode,
            realtime: options.realtime,
        };
        let result = run_trial(&setup.env, &mut filter, &mut op, setup.x0.clone(), &options);
        if let Some(m) = op.mode_seen {
            mode = m;
        }
        match result {
            Ok(rec) => {
                let end = tick.load(Ordering::Relaxed) + 1;
                tick.store(end, Ordering::Relaxed);
                hub.publish(&WireMessage::TrialEvent {
                    tick_index: end,
                    trial_id,
                    event: rec.outcome.into(),
                    t: rec.duration,
                });
                trials.push(rec);
            }
            Err(Error::Interrupted) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone)]
pub struct ServeReport {
    pub addr: SocketAddr,
    pub trials: Vec<TrialRecord>,
    /// Trial log of the session, usable as a replay source.
    pub log: Option<PathBuf>,
    pub dropped: u64,
}

/// Starts the bridge on the configured address and serves live trials
/// until `stop` is set or `bridge.trials` trials have run. `ready` gets the
/// bound address once clients can connect.
pub fn cmd_serve(
    config: &RunConfig,
    out: &Path,
    stop: Arc<AtomicBool>,
    ready: impl FnOnce(SocketAddr),
) -> Result<ServeReport> {
    let hub = Arc::new(Hub::new(config.bridge.queue_capacity));
    let handoff = Arc::new(InputHandoff::new(config.env.id.control_space().dims()));
    let tick = Arc::new(AtomicU64::new(0));
    let model = match config.model.predictor {
        PredictorKind::Koopman => Some(load_model(config, out)?),
        PredictorKind::GroundTruth => None,
    };
    let server = BridgeServer::start(&config.bridge.listen, hub.clone(), handoff.clone(), tick.clone())?;
    let addr = server.local_addr();
    ready(addr);
    let options = SessionOptions {
        realtime: true,
        max_trials: config.bridge.trials,
        mode: config.bridge.mode,
    };
    let trials = match &model {
        Some(m) => serve_session(config, |_| m, &hub, &handoff, &stop, &tick, &options)?,
        None => serve_session(config, |s| GroundTruth(s.env.clone()), &hub, &handoff, &stop, &tick, &options)?,
    };
    let dropped = hub.dropped();
    drop(server);
    let log = if trials.is_empty() {
        None
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("session.ndjson");
        let prov = Provenance {
            config_hash: config.hash(),
            seeds: trials.iter().map(|t| t.seed).collect(),
        };
        write_trial_log(&path, &trials, &prov)?;
        Some(path)
    };
    Ok(ServeReport {
        addr,
        trials,
        log,
        dropped,
    })
}
