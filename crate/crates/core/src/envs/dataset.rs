//! Transition datasets and the random-excitation collector.
//!
//! File layout: one JSON header line, then one JSON array per transition
//! holding `[x_t..., u_t..., x_{t+1}...]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EnvId, EnvSpec, Environment};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "mpmi-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub env_id: EnvId,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl DatasetHeader {
    pub fn new(env_id: EnvId, dt: f64, seed: u64) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            env_id,
            state_dim: env_id.state_dim(),
            control_dim: env_id.control_space().dims(),
            dt,
            seed,
            config_hash: None,
        }
    }

    fn width(&self) -> usize {
        2 * self.state_dim + self.control_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition<'a> {
    pub state: &'a [f64],
    pub control: &'a [f64],
    pub next: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    rows: Vec<f64>,
}

impl Dataset {
    pub fn new(header: DatasetHeader) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, state: &[f64], control: &[f64], next: &[f64]) -> Result<()> {
        let h = &self.header;
        if state.len() != h.state_dim || next.len() != h.state_dim || control.len() != h.control_dim {
            return Err(Error::Domain(format!(
                "transition dims {}/{}/{} do not match header {}/{}",
                state.len(),
                control.len(),
                next.len(),
                h.state_dim,
                h.control_dim
            )));
        }
        self.rows.extend_from_slice(state);
        self.rows.extend_from_slice(control);
        self.rows.extend_from_slice(next);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.header.width()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, i: usize) -> Transition<'_> {
        let (n, m) = (self.header.state_dim, self.header.control_dim);
        let w = self.header.width();
        let row = &self.rows[i * w..(i + 1) * w];
        Transition {
            state: &row[..n],
            control: &row[n..n + m],
            next: &row[n + m..],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Whether transition `i + 1` starts where transition `i` ended.
    pub fn continues(&self, i: usize) -> bool {
        i + 1 < self.len() && self.get(i).next == self.get(i + 1).state
    }

    /// Contiguous split: the first `1 - holdout` fraction and the rest.
    pub fn split(&self, holdout: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let cut = ((n as f64) * (1.0 - holdout)).round() as usize;
        let cut = cut.clamp(1.min(n), n);
        let w = self.header.width();
        let head = Dataset {
            header: self.header.clone(),
            rows: self.rows[..cut * w].to_vec(),
        };
        let tail = Dataset {
            header: self.header.clone(),
            rows: self.rows[cut * w..].to_vec(),
        };
        (head, tail)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
        for row in self.rows.chunks_exact(self.header.width()) {
            let line = serde_json::to_string(row).expect("numbers serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 1, "empty dataset file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| Error::parse(&name, 1, format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::parse(&name, 1, format!("unsupported format {:?}", header.format)));
        }
        if header.state_dim != header.env_id.state_dim() || header.control_dim != header.env_id.control_space().dims() {
            return Err(Error::parse(&name, 1, "dims do not match env_id"));
        }
        let mut ds = Dataset::new(header);
        let width = ds.header.width();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> =
                serde_json::from_str(&line).map_err(|e| Error::parse(&name, lineno, e.to_string()))?;
            if row.len() != width {
                return Err(Error::parse(
                    &name,
                    lineno,
                    format!("expected {width} numbers, found {}", row.len()),
                ));
            }
            ds.rows.extend_from_slice(&row);
        }
        Ok(ds)
    }
}

/// Ornstein-Uhlenbeck excitation around the box center, clipped to the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuExcitation {
    /// Mean-reversion rate, 1/s.
    pub reversion: f64,
    /// Diffusion as a fraction of each interval's half-width per sqrt(s).
    pub volatility: f64,
    /// Episode start spread relative to trial starts.
    pub start_spread: f64,
}

impl Default for OuExcitation {
    fn default() -> Self {
        Self {
            reversion: 1.5,
            volatility: 2.0,
            start_spread: 4.0,
        }
    }
}

/// Seeded random-excitation rollouts of the ground-truth system. Episodes
/// restart on failure or after `max_trial_time`.
pub fn collect_dataset(env: &EnvSpec, excitation: &OuExcitation, n_steps: usize, seed: u64) -> Result<Dataset> {
    if n_steps == 0 {
        return Err(Error::Config("dataset needs at least one step".into()));
    }
    env.validate()?;
    let space = env.control_space().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(DatasetHeader::new(env.env_id(), env.dt, seed));
    let episode_len = (env.max_trial_time / env.dt).round() as usize;
    let dt = env.dt;

    let fresh_episode = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        let x = env.collection_start(rng, excitation.start_spread);
        let u = space.intervals().iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
        (x, u)
    };
    let (mut x, mut u) = fresh_episode(&mut rng);
    let mut t = 0;
    for _ in 0..n_steps {
        let next = env.step(&x, &u)?;
        ds.push(&x, &u, &next)?;
        t += 1;
        if env.is_failed(&next) || t >= episode_len {
            (x, u) = fresh_episode(&mut rng);
            t = 0;
            continue;
        }
        x = next;
        for (v, &(lo, hi)) in u.iter_mut().zip(space.intervals()) {
            let center = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let z: f64 = rng.sample(StandardNormal);
            *v += -excitation.reversion * (*v - center) * dt + excitation.volatility * half * dt.sqrt() * z;
            *v = v.clamp(lo, hi);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::BalanceBotParams;

    fn bot() -> EnvSpec {
        EnvSpec::balance_bot(BalanceBotParams::default())
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(collect_dataset(&bot(), &OuExcitation::default(), 0, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = collect_dataset(&bot(), &OuExcitation::default(), 2_000, 5).unwrap();
        let b = collect_dataset(&bot(), &OuExcitation::default(), 2_000, 5).unwrap();
        let c = collect_dataset(&bot(), &OuExcitation::default(), 2_000, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 2_000);
    }

    #[test]
    fn controls_stay_in_box_and_episodes_chain() {
        let env = bot();
        let ds = collect_dataset(&env, &OuExcitation::default(), 3_000, 9).unwrap();
        let mut breaks = 0;
        for i in 0..ds.len() {
            let tr = ds.get(i);
            assert!(env.control_space().contains(tr.control));
            if i + 1 < ds.len() && !ds.continues(i) {
                breaks += 1;
            }
        }
        assert!(breaks > 0, "random excitation should topple the bot at least once");
    }

    #[test]
    fn file_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let ds = collect_dataset(&bot(), &OuExcitation::default(), 200, 2).unwrap();
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "[1.0, 2.0]";
        std::fs::write(&path, lines.join("\n")).unwrap();
        match Dataset::read(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "{\"format\": \"nope\"}\n").unwrap();
        assert!(matches!(Dataset::read(&path), Err(Error::Parse { line: 1, .. })));
    }
}
