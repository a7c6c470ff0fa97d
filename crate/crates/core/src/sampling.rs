//! Equally spaced sampling of a bounded control box.
//!
//! Samples are endpoint-inclusive per dimension and stored row-major with the
//! last dimension varying fastest. Besides the grid itself this module carries
//! the asymptotic deviation bound `measure / 2N` and the exact half-spacing
//! diagnostic that accompanies it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box of admissible control vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpace {
    intervals: Vec<(f64, f64)>,
}

impl ControlSpace {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Config("control space needs at least one dimension".into()));
        }
        for (i, &(lo, hi)) in intervals.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!(
                    "control dimension {i}: interval ({lo}, {hi}) is empty or non-finite"
                )));
            }
        }
        Ok(Self { intervals })
    }

    /// `[-1, 1]`, the balance-bot wheel command.
    pub fn balance_bot() -> Self {
        Self {
            intervals: vec![(-1.0, 1.0)],
        }
    }

    /// Steering `[-1, 1]`, gas `[0, 1]`, brake `[-1, 0]`.
    pub fn race_car() -> Self {
        Self {
            intervals: vec![(-1.0, 1.0), (0.0, 1.0), (-1.0, 0.0)],
        }
    }

    pub fn dims(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Lebesgue measure of the box.
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).product()
    }

    /// Sum of the interval widths. Equals the measure in one dimension; the
    /// race-car box has measure 2 but total width 4.
    pub fn total_width(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dims()
            && u
                .iter()
                .zip(&self.intervals)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Clamps `u` into the box. Returns the clamped vector and whether any
    /// component moved. Non-finite components are replaced by the clamped zero.
    pub fn clamp(&self, u: &[f64]) -> (Vec<f64>, bool) {
        let mut moved = u.len() != self.dims();
        let out = self
            .intervals
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| {
                let v = u.get(i).copied().unwrap_or(0.0);
                let v = if v.is_finite() {
                    v
                } else {
                    moved = true;
                    0.0
                };
                let c = v.clamp(lo, hi);
                if c != v {
                    moved = true;
                }
                c
            })
            .collect();
        (out, moved)
    }

    /// The zero vector clamped into the box.
    pub fn neutral(&self) -> Vec<f64> {
        self.clamp(&vec![0.0; self.dims()]).0
    }
}

/// Cartesian grid of control samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    space: ControlSpace,
    counts: Vec<usize>,
    /// Per-dimension coordinate ladders.
    axes: Vec<Vec<f64>>,
    /// `len() * dims` values, row-major.
    samples: Vec<f64>,
}

/// Builds the endpoint-inclusive grid with `counts[i]` points along dimension `i`.
pub fn grid(space: &ControlSpace, counts: &[usize]) -> Result<SampleSet> {
    if counts.len() != space.dims() {
        return Err(Error::Config(format!(
            "grid counts have {} entries for a {}-dimensional control space",
            counts.len(),
            space.dims()
        )));
    }
    if let Some((i, n)) = counts.iter().enumerate().find(|(_, n)| **n < 2) {
        return Err(Error::Config(format!(
            "grid dimension {i} has {n} points; both endpoints require at least 2"
        )));
    }
    let axes: Vec<Vec<f64>> = space
        .intervals()
        .iter()
        .zip(counts)
        .map(|(&(lo, hi), &n)| {
            let last = (n - 1) as f64;
            (0..n)
                .map(|j| {
                    if j == n - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * (j as f64 / last)
                    }
                })
                .collect()
        })
        .collect();

    let total: usize = counts.iter().product();
    let dims = counts.len();
    let mut samples = Vec::with_capacity(total * dims);
    let mut idx = vec![0usize; dims];
    for _ in 0..total {
        samples.extend(idx.iter().zip(&axes).map(|(&j, axis)| axis[j]));
        for d in (0..dims).rev() {
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }

    Ok(SampleSet {
        space: space.clone(),
        counts: counts.to_vec(),
        axes,
        samples,
    })
}

impl SampleSet {
    pub fn space(&self) -> &ControlSpace {
        &self.space
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.space.dims()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.space.dims()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let m = self.dims();
        &self.samples[i * m..(i + 1) * m]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.samples.chunks_exact(self.dims())
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.samples
    }

    /// Row-major index of the per-dimension grid coordinates.
    pub fn index_of(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.counts)
            .fold(0, |acc, (&j, &n)| acc * n + j)
    }
}

/// `measure / (2 n)`: expected deviation between a safe input and the applied
/// sample for `n` samples over a box of the given volume.
///
/// # Panics
/// If `n == 0`.
pub fn deviation_bound(measure: f64, n: usize) -> f64 {
    assert!(n >= 1, "deviation bound needs at least one sample");
    measure / (2.0 * n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpacing {
    pub per_dim: Vec<f64>,
    /// Largest Euclidean distance from any point of the box to its nearest sample.
    pub worst_case: f64,
}

pub fn grid_half_spacing(set: &SampleSet) -> HalfSpacing {
    let per_dim: Vec<f64> = set
        .space
        .intervals()
        .iter()
        .zip(&set.counts)
        .map(|(&(lo, hi), &n)| (hi - lo) / (2.0 * (n - 1) as f64))
        .collect();
    let worst_case = per_dim.iter().map(|h| h * h).sum::<f64>().sqrt();
    HalfSpacing {
        per_dim,
        worst_case,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub index: usize,
    pub distance: f64,
    /// `u` was outside the box and was clamped before the lookup.
    pub clamped: bool,
}

/// Closed-form nearest grid point, O(dims). Ties go to the lower index.
pub fn nearest_sample(set: &SampleSet, u: &[f64]) -> Nearest {
    let (u, clamped) = set.space.clamp(u);
    let mut index = 0;
    let mut dist2 = 0.0;
    for ((axis, &(lo, hi)), (&v, &n)) in set
        .axes
        .iter()
        .zip(set.space.intervals())
        .zip(u.iter().zip(&set.counts))
    {
        let t = (v - lo) / (hi - lo) * (n - 1) as f64;
        let j0 = (t.floor() as usize).min(n - 2);
        let (d0, d1) = ((v - axis[j0]).abs(), (axis[j0 + 1] - v).abs());
        let (j, d) = if d1 < d0 { (j0 + 1, d1) } else { (j0, d0) };
        index = index * n + j;
        dist2 += d * d;
    }
    Nearest {
        index,
        distance: dist2.sqrt(),
        clamped,
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
