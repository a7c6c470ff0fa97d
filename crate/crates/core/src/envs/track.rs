//! Seeded closed race tracks.
//!
//! A circle is perturbed radially at a handful of evenly spaced checkpoints;
//! the radius profile is smoothed with a periodic Catmull-Rom spline over the
//! polar angle, so zero perturbation yields the exact circle and every track is
//! star-shaped around the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackParams {
    pub checkpoints: usize,
    /// Nominal radius, m.
    pub radius: f64,
    /// Relative radial perturbation amplitude; 0.3 means +-30 %.
    pub radial_noise: f64,
    /// Road half-width, m.
    pub half_width: f64,
    /// Maximum waypoint spacing as a fraction of the half-width.
    pub spacing_factor: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            checkpoints: 12,
            radius: 20.0,
            radial_noise: 0.3,
            half_width: 2.5,
            spacing_factor: 0.5,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width.is_finite() && self.half_width > 0.0) {
            return Err(Error::Config(format!("track half_width must be positive, got {}", self.half_width)));
        }
        if !(self.radius.is_finite() && self.radius > self.half_width) {
            return Err(Error::Config(format!(
                "track radius {} must exceed half_width {}",
                self.radius, self.half_width
            )));
        }
        if !(0.0..1.0).contains(&self.radial_noise) {
            return Err(Error::Config(format!("radial_noise must lie in [0, 1), got {}", self.radial_noise)));
        }
        if self.checkpoints < 3 {
            return Err(Error::Config("a closed track needs at least 3 checkpoints".into()));
        }
        if !(self.spacing_factor > 0.0 && self.spacing_factor < 1.0) {
            return Err(Error::Config(format!("spacing_factor must lie in (0, 1), got {}", self.spacing_factor)));
        }
        Ok(())
    }
}

/// Uniform bucket grid over segment bounding boxes.
#[derive(Debug, Clone)]
struct SegmentIndex {
    origin: [f64; 2],
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Track {
    seed: u64,
    centerline: Vec<[f64; 2]>,
    half_width: f64,
    closed: bool,
    index: SegmentIndex,
}

impl PartialEq for Track {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.centerline == other.centerline
            && self.half_width == other.half_width
            && self.closed == other.closed
    }
}

pub fn generate_track(seed: u64, params: &TrackParams) -> Result<Track> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.checkpoints;
    let radii: Vec<f64> = (0..n)
        .map(|_| {
            let jitter: f64 = if params.radial_noise > 0.0 {
                rng.gen_range(-1.0..=1.0)
            } else {
                0.0
            };
            params.radius * (1.0 + params.radial_noise * jitter)
        })
        .collect();

    let r_max = radii.iter().cloned().fold(0.0, f64::max);
    let spacing = params.spacing_factor * params.half_width;
    // Catmull-Rom can overshoot the control points; start with margin and
    // refine until the spacing bound holds.
    let mut count = ((std::f64::consts::TAU * r_max * 1.5) / spacing).ceil() as usize;
    count = count.max(4 * n);
    loop {
        let pts = sample_polar(&radii, count);
        let worst = pts
            .windows(2)
            .map(|w| dist(w[0], w[1]))
            .fold(0.0, f64::max);
        if worst <= spacing {
            return Ok(Track::from_centerline(seed, pts, params.half_width, true));
        }
        count *= 2;
    }
}

fn sample_polar(radii: &[f64], count: usize) -> Vec<[f64; 2]> {
    let n = radii.len();
    let mut pts = Vec::with_capacity(count + 1);
    for k in 0..count {
        let s = k as f64 / count as f64 * n as f64;
        let i = s.floor() as usize % n;
        let t = s - s.floor();
        let p0 = radii[(i + n - 1) % n];
        let p1 = radii[i];
        let p2 = radii[(i + 1) % n];
        let p3 = radii[(i + 2) % n];
        let r = catmull_rom(p0, p1, p2, p3, t);
        let phi = std::f64::consts::TAU * k as f64 / count as f64;
        pts.push([r * phi.cos(), r * phi.sin()]);
    }
    pts.push(pts[0]);
    pts
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

impl Track {
    pub fn from_centerline(seed: u64, centerline: Vec<[f64; 2]>, half_width: f64, closed: bool) -> Self {
        let index = SegmentIndex::build(&centerline, half_width);
        Self {
            seed,
            centerline,
            half_width,
            closed,
            index,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centerline(&self) -> &[[f64; 2]] {
        &self.centerline
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Start pose: first waypoint, heading toward the second.
    pub fn start_pose(&self) -> ([f64; 2], f64) {
        let a = self.centerline[0];
        let b = self.centerline[1];
        (a, (b[1] - a[1]).atan2(b[0] - a[0]))
    }

    /// Exhaustive distance from `p` to the centerline polyline.
    pub fn distance_brute(&self, p: [f64; 2]) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance from `p` to the centerline polyline using the bucket grid.
    pub fn distance_to_centerline(&self, p: [f64; 2]) -> f64 {
        let ix = &self.index;
        let cx = ((p[0] - ix.origin[0]) / ix.cell).floor();
        let cy = ((p[1] - ix.origin[1]) / ix.cell).floor();
        if !(cx >= 0.0 && cy >= 0.0 && (cx as usize) < ix.cols && (cy as usize) < ix.rows) {
            return self.distance_brute(p);
        }
        let (cx, cy) = (cx as isize, cy as isize);
        let max_ring = ix.cols.max(ix.rows) as isize;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for (x, y) in ring_cells(cx, cy, ring) {
                if x < 0 || y < 0 || x as usize >= ix.cols || y as usize >= ix.rows {
                    continue;
                }
                for &s in &ix.buckets[y as usize * ix.cols + x as usize] {
                    let s = s as usize;
                    let d = segment_distance(p, self.centerline[s], self.centerline[s + 1]);
                    if d < best {
                        best = d;
                    }
                }
            }
            // anything in ring + 1 or beyond is at least ring * cell away
            if best <= ring as f64 * ix.cell {
                break;
            }
        }
        best
    }

    /// Discrete (Menger) curvature extremes over consecutive waypoint triples.
    pub fn curvature_range(&self) -> (f64, f64) {
        let pts = &self.centerline;
        let n = if self.closed { pts.len() - 1 } else { pts.len() };
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        let triples = if self.closed { n } else { n.saturating_sub(2) };
        for i in 0..triples {
            let (a, b, c) = if self.closed {
                (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n])
            } else {
                (pts[i], pts[i + 1], pts[i + 2])
            };
            let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            let k = 2.0 * cross.abs() / (dist(a, b) * dist(b, c) * dist(a, c));
            lo = lo.min(k);
            hi = hi.max(k);
        }
        (lo, hi)
    }
}

/// Cells at Chebyshev distance exactly `ring` from `(cx, cy)`.
fn ring_cells(cx: isize, cy: isize, ring: isize) -> impl Iterator<Item = (isize, isize)> {
    (-ring..=ring).flat_map(move |dx| {
        let edge = dx.abs() == ring;
        let dys: Box<dyn Iterator<Item = isize>> = if edge {
            Box::new(-ring..=ring)
        } else {
            Box::new([-ring, ring].into_iter())
        };
        dys.map(move |dy| (cx + dx, cy + dy))
    })
}

impl SegmentIndex {
    fn build(pts: &[[f64; 2]], half_width: f64) -> Self {
        let cell = half_width.max(1e-3);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        // pad so that queries within a few half-widths of the road stay on-grid
        let pad = 4.0 * cell;
        let origin = [lo[0] - pad, lo[1] - pad];
        let cols = (((hi[0] + pad) - origin[0]) / cell).ceil().max(1.0) as usize;
        let rows = (((hi[1] + pad) - origin[1]) / cell).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (s, w) in pts.windows(2).enumerate() {
            let x0 = ((w[0][0].min(w[1][0]) - origin[0]) / cell).floor() as usize;
            let x1 = ((w[0][0].max(w[1][0]) - origin[0]) / cell).floor() as usize;
            let y0 = ((w[0][1].min(w[1][1]) - origin[1]) / cell).floor() as usize;
            let y1 = ((w[0][1].max(w[1][1]) - origin[1]) / cell).floor() as usize;
            for y in y0..=y1.min(rows - 1) {
                for x in x0..=x1.min(cols - 1) {
                    buckets[y * cols + x].push(s as u32);
                }
            }
        }
        Self {
            origin,
            cell,
            cols,
            rows,
            buckets,
        }
    }
}
