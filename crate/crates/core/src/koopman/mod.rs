//! Koopman models with inputs: a basis dictionary and a square operator over
//! the active lifted coordinates. The next raw state is the raw-state rows of
//! the operator applied to the lifted current state and control.

pub mod basis;
mod fit;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use basis::{BasisDictionary, BasisFunction, BasisSpec, CompiledLift};
pub use fit::{fit, sparsify, Sparsified, SparsifyConfig, SparsifyStep, DEFAULT_RIDGE};

use crate::envs::Dataset;
use crate::envs::EnvId;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "mpmi-koopman/1";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingStats {
    /// Per state dimension, on the training data.
    pub one_step_rmse: Vec<f64>,
    pub n_samples: usize,
    pub retained_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    basis: BasisDictionary,
    k: DMatrix<f64>,
    dt: f64,
    ridge: f64,
    stats: TrainingStats,
    config_hash: Option<String>,
    /// Raw-state rows of `k`, row-major, for the prediction hot path.
    state_rows: Vec<f64>,
    lift: CompiledLift,
}

/// Per-worker buffers for repeated predictions. Control-only lifted entries
/// are reused while the control stays the same.
#[derive(Debug, Clone)]
pub struct PredictScratch {
    z: Vec<f64>,
    lifted: Vec<f64>,
    primed: bool,
}

impl PredictScratch {
    pub fn new(model: &KoopmanModel) -> Self {
        Self {
            z: vec![0.0; model.lift.vars()],
            lifted: vec![0.0; model.lifted_dim()],
            primed: false,
        }
    }
}

impl KoopmanModel {
    pub fn new(basis: BasisDictionary, k: DMatrix<f64>, dt: f64, ridge: f64) -> Result<Self> {
        let q = basis.active_count();
        if k.nrows() != q || k.ncols() != q {
            return Err(Error::Config(format!(
                "operator is {}x{} but the basis has {q} active functions",
                k.nrows(),
                k.ncols()
            )));
        }
        if let Some(v) = k.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("operator contains non-finite entry {v}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("model dt must be positive, got {dt}")));
        }
        let n = basis.state_dim();
        let state_rows = (0..n).flat_map(|i| k.row(i).iter().copied().collect::<Vec<_>>()).collect();
        let stats = TrainingStats {
            retained_count: q,
            ..Default::default()
        };
        let lift = CompiledLift::new(&basis);
        Ok(Self {
            lift,
            basis,
            k,
            dt,
            ridge,
            stats,
            config_hash: None,
            state_rows,
        })
    }

    /// Operator equal to the identity: every prediction returns the current state.
    pub fn identity(basis: BasisDictionary, dt: f64) -> Result<Self> {
        let q = basis.active_count();
        Self::new(basis, DMatrix::identity(q, q), dt, 0.0)
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn basis(&self) -> &BasisDictionary {
        &self.basis
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn training_stats(&self) -> &TrainingStats {
        &self.stats
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.config_hash.as_deref()
    }

    pub fn env_id(&self) -> EnvId {
        self.basis.env_id()
    }

    pub fn state_dim(&self) -> usize {
        self.basis.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.basis.control_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        self.k.nrows()
    }

    /// Checked one-step prediction of the raw state.
    pub fn predict(&self, state: &[f64], control: &[f64]) -> Result<Vec<f64>> {
        let lifted = self.basis.lift(state, control)?;
        let mut out = vec![0.0; self.state_dim()];
        self.apply_state_rows(&lifted, &mut out);
        Ok(out)
    }

    /// Unchecked prediction. `lifted` must hold `lifted_dim()` entries and
    /// `out` `state_dim()`.
    #[inline]
    pub fn predict_into(&self, state: &[f64], control: &[f64], lifted: &mut [f64], out: &mut [f64]) {
        self.basis.lift_into(state, control, lifted);
        self.apply_state_rows(lifted, out);
    }

    /// Same result as [`predict_into`](Self::predict_into), reusing the
    /// control-only part of the lift across calls with an unchanged control.
    #[inline]
    pub fn predict_with(&self, state: &[f64], control: &[f64], scratch: &mut PredictScratch, out: &mut [f64]) {
        let n = state.len();
        let (zx, zu) = scratch.z.split_at_mut(n);
        zx.copy_from_slice(state);
        if !scratch.primed || zu.iter().zip(control).any(|(a, b)| a.to_bits() != b.to_bits()) {
            zu.copy_from_slice(control);
            self.lift.eval_control(&self.basis, &scratch.z, &mut scratch.lifted);
            scratch.primed = true;
        }
        self.lift.eval_state(&self.basis, &scratch.z, &mut scratch.lifted);
        self.apply_state_rows(&scratch.lifted, out);
    }

    #[inline]
    fn apply_state_rows(&self, lifted: &[f64], out: &mut [f64]) {
        let q = lifted.len();
        for (o, row) in out.iter_mut().zip(self.state_rows.chunks_exact(q)) {
            *o = row.iter().zip(lifted).map(|(a, b)| a * b).sum();
        }
    }

    /// Writes the self-describing model file: a JSON header line, then the
    /// operator row by row as whitespace-separated decimals.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            env_id: self.env_id(),
            dt: self.dt,
            ridge: self.ridge,
            basis: self.basis.spec().clone(),
            active_mask: self.basis.active_mask().to_vec(),
            dim: self.lifted_dim(),
            training_stats: self.stats.clone(),
            config_hash: self.config_hash.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let line = serde_json::to_string(&header).expect("header serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        for row in self.k.row_iter() {
            let text: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", text.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 1, "empty model file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: ModelHeader =
            serde_json::from_str(&first).map_err(|e| Error::parse(&name, 1, format!("bad header: {e}")))?;
        if header.format != MODEL_FORMAT {
            return Err(Error::parse(&name, 1, format!("unsupported format {:?}", header.format)));
        }
        if header.basis.env_id != header.env_id {
            return Err(Error::parse(&name, 1, "basis env_id differs from model env_id"));
        }
        let mut basis = BasisDictionary::from_spec(&header.basis).map_err(|e| Error::parse(&name, 1, e.to_string()))?;
        basis
            .set_active_mask(&header.active_mask)
            .map_err(|e| Error::parse(&name, 1, e.to_string()))?;
        if basis.active_mask() != header.active_mask.as_slice() || basis.active_count() != header.dim {
            return Err(Error::parse(&name, 1, "active mask inconsistent with dim"));
        }
        let q = header.dim;
        let mut values = Vec::with_capacity(q * q);
        for r in 0..q {
            let lineno = r + 2;
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(&name, lineno, format!("expected {q} operator rows, found {r}")))?
                .map_err(|e| Error::io(path, e))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| Error::parse(&name, lineno, format!("bad number: {e}")))?;
            if row.len() != q {
                return Err(Error::parse(&name, lineno, format!("expected {q} numbers, found {}", row.len())));
            }
            values.extend(row);
        }
        let k = DMatrix::from_row_slice(q, q, &values);
        let mut model = KoopmanModel::new(basis, k, header.dt, header.ridge).map_err(|e| Error::parse(&name, 2, e.to_string()))?;
        model.stats = header.training_stats;
        model.config_hash = header.config_hash;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format: String,
    env_id: EnvId,
    dt: f64,
    ridge: f64,
    basis: BasisSpec,
    active_mask: Vec<bool>,
    dim: usize,
    training_stats: TrainingStats,
    #[serde(default)]
    config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub one_step_rmse: Vec<f64>,
    pub horizon: usize,
    /// Open-loop error after `horizon` chained predictions with the recorded
    /// controls; `None` when no contiguous window is that long.
    pub k_step_rmse: Option<Vec<f64>>,
    pub windows: usize,
}

/// One-step and open-loop `horizon`-step RMSE per state dimension. Windows
/// start at every transition and never cross an episode break.
pub fn evaluate(model: &KoopmanModel, data: &Dataset, horizon: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("evaluation horizon must be >= 1".into()));
    }
    if data.header.env_id != model.env_id() {
        return Err(Error::Config(format!(
            "dataset is for {} but the model is for {}",
            data.header.env_id,
            model.env_id()
        )));
    }
    let n = model.state_dim();
    let mut lifted = vec![0.0; model.lifted_dim()];
    let mut pred = vec![0.0; n];

    let mut one = vec![0.0f64; n];
    for tr in data.iter() {
        model.predict_into(tr.state, tr.control, &mut lifted, &mut pred);
        for ((acc, p), y) in one.iter_mut().zip(&pred).zip(tr.next) {
            *acc += (p - y) * (p - y);
        }
    }
    let one_step_rmse = one.iter().map(|s| (s / data.len() as f64).sqrt()).collect();

    let mut run = vec![1usize; data.len()];
    for i in (0..data.len().saturating_sub(1)).rev() {
        if data.continues(i) {
            run[i] = run[i + 1] + 1;
        }
    }
    let mut multi = vec![0.0f64; n];
    let mut windows = 0;
    let mut x = vec![0.0; n];
    for i in (0..data.len()).filter(|&i| run[i] >= horizon) {
        x.copy_from_slice(data.get(i).state);
        for j in 0..horizon {
            model.predict_into(&x, data.get(i + j).control, &mut lifted, &mut pred);
            x.copy_from_slice(&pred);
        }
        for ((acc, p), y) in multi.iter_mut().zip(&x).zip(data.get(i + horizon - 1).next) {
            *acc += (p - y) * (p - y);
        }
        windows += 1;
    }
    let k_step_rmse = (windows > 0).then(|| multi.iter().map(|s| (s / windows as f64).sqrt()).collect());
    Ok(Evaluation {
        one_step_rmse,
        horizon,
        k_step_rmse,
        windows,
    })
}
