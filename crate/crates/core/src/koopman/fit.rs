//! Least-squares operator fit and sequential thresholded basis selection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::basis::{BasisDictionary, BasisFunction};
use super::{evaluate, KoopmanModel, TrainingStats};
use crate::envs::Dataset;
use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Cholesky pivots at or below this (in the column-normalized problem) are
/// reported as rank deficiency.
const PIVOT_TOL: f64 = 1e-10;

const CHUNK: usize = 512;

/// Second moments of the lifted data over every dictionary function,
/// regardless of the active mask. Refits on a sub-basis slice these.
#[derive(Debug, Clone)]
pub(crate) struct GramStats {
    /// Sum of `psi(x_t, u_t) psi(x_t, u_t)^T`.
    xx: DMatrix<f64>,
    /// Sum of `psi(x_t, u_t) psi(x_{t+1}, u_t)^T`.
    xy: DMatrix<f64>,
    samples: usize,
}

impl GramStats {
    pub(crate) fn accumulate(data: &Dataset, basis: &BasisDictionary) -> Result<Self> {
        check_compatible(data, basis)?;
        let p = basis.functions().len();
        let mut xx = DMatrix::zeros(p, p);
        let mut xy = DMatrix::zeros(p, p);
        let mut src = DMatrix::zeros(CHUNK, p);
        let mut dst = DMatrix::zeros(CHUNK, p);
        let mut start = 0;
        while start < data.len() {
            let rows = CHUNK.min(data.len() - start);
            if rows < CHUNK {
                src = DMatrix::zeros(rows, p);
                dst = DMatrix::zeros(rows, p);
            }
            for r in 0..rows {
                let tr = data.get(start + r);
                ensure_finite("dataset row", tr.state)?;
                ensure_finite("dataset row", tr.control)?;
                ensure_finite("dataset row", tr.next)?;
                for (j, f) in basis.functions().iter().enumerate() {
                    src[(r, j)] = f.eval(tr.state, tr.control);
                    dst[(r, j)] = f.eval(tr.next, tr.control);
                }
            }
            xx.gemm_tr(1.0, &src, &src, 1.0);
            xy.gemm_tr(1.0, &src, &dst, 1.0);
            start += rows;
        }
        Ok(Self {
            xx,
            xy,
            samples: data.len(),
        })
    }

    fn merged(&self, other: &GramStats) -> GramStats {
        GramStats {
            xx: &self.xx + &other.xx,
            xy: &self.xy + &other.xy,
            samples: self.samples + other.samples,
        }
    }

    /// RMS of each dictionary column; zero columns get scale 1 so that the
    /// pivot check catches them.
    fn column_scale(&self) -> Vec<f64> {
        (0..self.xx.nrows())
            .map(|j| {
                let s = (self.xx[(j, j)] / self.samples as f64).sqrt();
                if s.is_finite() && s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn check_compatible(data: &Dataset, basis: &BasisDictionary) -> Result<()> {
    if data.header.env_id != basis.env_id() {
        return Err(Error::Config(format!(
            "dataset is for {} but the basis is for {}",
            data.header.env_id,
            basis.env_id()
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(())
}

/// Solves for the operator over the active functions. Returns `K` in
/// active order with control and constant rows replaced by identity rows.
pub(crate) fn solve(stats: &GramStats, basis: &BasisDictionary, ridge: f64) -> Result<DMatrix<f64>> {
    let active: Vec<usize> = (0..basis.functions().len()).filter(|&j| basis.active_mask()[j]).collect();
    let q = active.len();
    let scale = stats.column_scale();
    let s_inv = 1.0 / stats.samples as f64;

    let mut gram = vec![0.0; q * q];
    for (a, &ja) in active.iter().enumerate() {
        for (b, &jb) in active.iter().enumerate() {
            gram[a * q + b] = stats.xx[(ja, jb)] * s_inv / (scale[ja] * scale[jb]);
        }
        gram[a * q + a] += ridge;
    }
    let chol = cholesky(&mut gram, q).map_err(|(a, pivot)| Error::IllConditioned {
        index: active[a],
        name: basis.functions()[active[a]].to_string(),
        pivot,
    })?;

    let mut k = DMatrix::zeros(q, q);
    let mut rhs = vec![0.0; q];
    for (c, &jc) in active.iter().enumerate() {
        for (a, &ja) in active.iter().enumerate() {
            rhs[a] = stats.xy[(ja, jc)] * s_inv / scale[ja];
        }
        chol.solve_in_place(&mut rhs);
        for (a, &ja) in active.iter().enumerate() {
            k[(c, a)] = rhs[a] / scale[ja];
        }
    }
    for (c, &jc) in active.iter().enumerate() {
        if matches!(basis.functions()[jc], BasisFunction::Control(_) | BasisFunction::Constant) {
            k.row_mut(c).fill(0.0);
            k[(c, c)] = 1.0;
        }
    }
    Ok(k)
}

struct Cholesky<'a> {
    l: &'a [f64],
    n: usize,
}

/// In-place lower Cholesky factor. On failure returns the row whose pivot
/// collapsed and the pivot value.
fn cholesky(a: &mut [f64], n: usize) -> Result<Cholesky<'_>, (usize, f64)> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > PIVOT_TOL) {
            return Err((j, d));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(Cholesky { l: a, n })
}

impl Cholesky<'_> {
    fn solve_in_place(&self, b: &mut [f64]) {
        let (l, n) = (self.l, self.n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }
}

/// Least-squares fit of the operator over the active basis functions. The
/// lifted target of each pair reuses the source control.
pub fn fit(data: &Dataset, basis: &BasisDictionary, ridge: f64) -> Result<KoopmanModel> {
    check_ridge(ridge)?;
    let stats = GramStats::accumulate(data, basis)?;
    model_from_stats(&stats, basis.clone(), ridge, data)
}

fn check_ridge(ridge: f64) -> Result<()> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    Ok(())
}

fn model_from_stats(stats: &GramStats, basis: BasisDictionary, ridge: f64, data: &Dataset) -> Result<KoopmanModel> {
    let k = solve(stats, &basis, ridge)?;
    let mut model = KoopmanModel::new(basis, k, data.header.dt, ridge)?;
    let eval = evaluate(&model, data, 1)?;
    model.stats = TrainingStats {
        one_step_rmse: eval.one_step_rmse,
        n_samples: data.len(),
        retained_count: model.basis().active_count(),
    };
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsifyConfig {
    /// Influence thresholds tried in order.
    pub thresholds: Vec<f64>,
    /// Largest accepted ratio of held-out error to the unpruned error.
    pub max_rmse_growth: f64,
    /// Fraction of the dataset (taken from the end) used as the holdout.
    pub holdout: f64,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            max_rmse_growth: 1.05,
            holdout: 0.2,
        }
    }
}

impl SparsifyConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.thresholds.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::Config(format!("sparsity threshold must be finite and >= 0, got {t}")));
        }
        if !(self.max_rmse_growth >= 1.0 && self.max_rmse_growth.is_finite()) {
            return Err(Error::Config(format!(
                "max_rmse_growth must be >= 1, got {}",
                self.max_rmse_growth
            )));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!("holdout must lie in (0, 1), got {}", self.holdout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyStep {
    pub threshold: f64,
    pub retained: usize,
    /// Normalized held-out one-step error of the train-split refit.
    pub holdout_error: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sparsified {
    pub model: KoopmanModel,
    pub baseline_error: f64,
    pub steps: Vec<SparsifyStep>,
}

/// Sequentially thresholded refitting. Each threshold prunes non-exempt
/// columns whose influence on the raw-state rows falls below it, refitting
/// until the mask is stable; the schedule stops at the first threshold whose
/// held-out error exceeds `max_rmse_growth` times the unpruned error. The
/// surviving basis is refit on the whole dataset.
pub fn sparsify(model: &KoopmanModel, data: &Dataset, config: &SparsifyConfig) -> Result<Sparsified> {
    config.validate()?;
    let basis0 = model.basis();
    check_compatible(data, basis0)?;
    let (train, hold) = data.split(config.holdout);
    if train.is_empty() || hold.is_empty() {
        return Err(Error::Config(format!(
            "{} transitions are too few for a {} holdout",
            data.len(),
            config.holdout
        )));
    }
    let ridge = model.ridge();
    let train_stats = GramStats::accumulate(&train, basis0)?;
    let sigma = target_scale(data);
    let scale = train_stats.column_scale();

    let mut basis = basis0.clone();
    let mut k = solve(&train_stats, &basis, ridge)?;
    let baseline_error = holdout_error(&basis, &k, &hold, &sigma)?;
    let mut accepted_mask = basis.active_mask().to_vec();
    let mut steps = Vec::new();

    for &threshold in &config.thresholds {
        loop {
            let mask = pruned_mask(&basis, &k, &scale, &sigma, threshold);
            if mask == basis.active_mask() {
                break;
            }
            basis.set_active_mask(&mask)?;
            k = solve(&train_stats, &basis, ridge)?;
        }
        let err = holdout_error(&basis, &k, &hold, &sigma)?;
        let accepted = err <= config.max_rmse_growth * baseline_error + 1e-12;
        steps.push(SparsifyStep {
            threshold,
            retained: basis.active_count(),
            holdout_error: err,
            accepted,
        });
        if !accepted {
            break;
        }
        accepted_mask = basis.active_mask().to_vec();
    }

    let model = if accepted_mask == basis0.active_mask() {
        model.clone()
    } else {
        let mut basis = basis0.clone();
        basis.set_active_mask(&accepted_mask)?;
        let full = train_stats.merged(&GramStats::accumulate(&hold, &basis)?);
        model_from_stats(&full, basis, ridge, data)?
    };
    Ok(Sparsified {
        model,
        baseline_error,
        steps,
    })
}

/// Population standard deviation of each next-state component; 1 where flat.
fn target_scale(data: &Dataset) -> Vec<f64> {
    let n = data.header.state_dim;
    let count = data.len() as f64;
    let mut mean = vec![0.0; n];
    for tr in data.iter() {
        for (m, v) in mean.iter_mut().zip(tr.next) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; n];
    for tr in data.iter() {
        for ((s, v), m) in var.iter_mut().zip(tr.next).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.into_iter()
        .map(|s| {
            let sd = (s / count).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

fn pruned_mask(basis: &BasisDictionary, k: &DMatrix<f64>, scale: &[f64], sigma: &[f64], threshold: f64) -> Vec<bool> {
    let mut mask = basis.active_mask().to_vec();
    let active: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    for (a, &j) in active.iter().enumerate() {
        if basis.functions()[j].is_exempt() {
            continue;
        }
        let influence = sigma
            .iter()
            .enumerate()
            .map(|(i, s)| k[(i, a)].abs() * scale[j] / s)
            .fold(0.0, f64::max);
        if influence < threshold {
            mask[j] = false;
        }
    }
    mask
}

/// Root mean square over state components of the RMSE normalized by `sigma`.
fn holdout_error(basis: &BasisDictionary, k: &DMatrix<f64>, hold: &Dataset, sigma: &[f64]) -> Result<f64> {
    let model = KoopmanModel::new(basis.clone(), k.clone(), hold.header.dt, 0.0)?;
    let eval = evaluate(&model, hold, 1)?;
    let ms = eval
        .one_step_rmse
        .iter()
        .zip(sigma)
        .map(|(r, s)| (r / s).powi(2))
        .sum::<f64>()
        / sigma.len() as f64;
    Ok(if ms.is_finite() { ms.sqrt() } else { f64::INFINITY })
}
