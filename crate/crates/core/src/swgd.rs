//! Sliced-Wasserstein gradient descent over kernel-thresholded sample subsets.
//!
//! Each batch element picks a kernel instance (a tile cell as center), a
//! threshold `z` on `|g|` and a random slice direction. The samples of every
//! cell whose folded kernel weight exceeds `z` form a subset; its projection on
//! the slice is matched rank-to-rank against an equal number of targets from
//! the projected uniform density, and the gradient of the squared 1D distance
//! is scattered back onto the sample coordinates. Adam consumes the batch-mean
//! gradient.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpatioTemporalKernel;
use crate::rng::{self, StreamRng};
use crate::tile::{CellIndex, SampleTile};

/// Uniform density over `[0, 1)^dim`; the only target the optimizer supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetDensity {
    pub dim: usize,
}

impl TargetDensity {
    pub fn uniform(dim: usize) -> Self {
        Self { dim }
    }
}

/// Unit-norm projection direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceDirection(Vec<f64>);

impl SliceDirection {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidInput("slice direction must be non-zero".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    /// Uniform on the unit sphere, via normalized Gaussians.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return Self(v.into_iter().map(|x| x / norm).collect());
            }
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, p: &[f64]) -> f64 {
        self.0.iter().zip(p).map(|(a, b)| a * b).sum()
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

/// A `(cell, slot)` reference into a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Member {
    pub cell: usize,
    pub slot: usize,
}

/// Samples of all cells whose kernel weight around `center` exceeds `z` in
/// magnitude. Members are sorted by `(cell, slot)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredSubset {
    pub center: CellIndex,
    pub z: f64,
    pub members: Vec<Member>,
}

impl FilteredSubset {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// A kernel folded onto a tile: taps landing on the same wrapped offset are
/// summed, then ordered by decreasing magnitude so a threshold selects a prefix.
#[derive(Clone, Debug)]
pub struct FoldedKernel {
    dims: [usize; 3],
    /// `(dx, dy, dt, |w|)` with offsets already reduced mod dims.
    taps: Vec<([usize; 3], f64)>,
    max_weight: f64,
}

impl FoldedKernel {
    pub fn new(kernel: &SpatioTemporalKernel, dims: [usize; 3]) -> Self {
        let mut folded: Vec<([usize; 3], f64)> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for (dx, dy, dt, w) in kernel.taps() {
            let key = [
                (dx as i64).rem_euclid(dims[0] as i64) as usize,
                (dy as i64).rem_euclid(dims[1] as i64) as usize,
                (dt as i64).rem_euclid(dims[2] as i64) as usize,
            ];
            let i = *slot.entry(key).or_insert_with(|| {
                folded.push((key, 0.0));
                folded.len() - 1
            });
            folded[i].1 += w;
        }
        let mut taps: Vec<([usize; 3], f64)> = folded
            .into_iter()
            .map(|(k, w)| (k, w.abs()))
            .filter(|t| t.1 > 0.0)
            .collect();
        // Stable order for equal magnitudes keeps subsets deterministic.
        taps.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let max_weight = taps.first().map_or(0.0, |t| t.1);
        Self {
            dims,
            taps,
            max_weight,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Largest folded `|g|`.
    pub fn max_weight(&self) -> f64 {
        self.max_weight
    }

    /// Folded `|g|` at a wrapped offset; zero off the support.
    pub fn weight_at(&self, offset: [usize; 3]) -> f64 {
        self.taps
            .iter()
            .find(|t| t.0 == offset)
            .map_or(0.0, |t| t.1)
    }

    pub fn support_len(&self) -> usize {
        self.taps.len()
    }

    /// Cells around `center` with `|g| > z`, as sorted linear cell indices.
    pub fn cells_above(&self, center: CellIndex, z: f64) -> Vec<usize> {
        let [cx, cy, ct] = center.wrapped(self.dims);
        let [nx, ny, nt] = self.dims;
        let count = self.taps.partition_point(|t| t.1 > z);
        let mut cells: Vec<usize> = self.taps[..count]
            .iter()
            .map(|&([dx, dy, dt], _)| {
                let x = (cx + dx) % nx;
                let y = (cy + dy) % ny;
                let t = (ct + dt) % nt;
                (t * ny + y) * nx + x
            })
            .collect();
        cells.sort_unstable();
        cells
    }

    pub fn filter(&self, spp: usize, center: CellIndex, z: f64) -> Result<FilteredSubset> {
        if !(z >= 0.0 && z < self.max_weight) {
            return Err(Error::EmptySubset {
                z,
                max_weight: self.max_weight,
            });
        }
        let members = self
            .cells_above(center, z)
            .into_iter()
            .flat_map(|cell| (0..spp).map(move |slot| Member { cell, slot }))
            .collect();
        Ok(FilteredSubset { center, z, members })
    }
}

/// Samples of the cells where the toroidally wrapped `|g|` centered at `center`
/// exceeds `z`.
pub fn filter_subset(
    tile: &SampleTile,
    kernel: &SpatioTemporalKernel,
    center: CellIndex,
    z: f64,
) -> Result<FilteredSubset> {
    FoldedKernel::new(kernel, tile.dims()).filter(tile.spp(), center, z)
}

/// Projections sorted ascending, plus the member index holding each rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub values: Vec<f64>,
    pub ranks: Vec<usize>,
}

/// Projects every member onto `theta` and sorts; ties go to the lower `(cell, slot)`.
pub fn project_ranked(tile: &SampleTile, subset: &FilteredSubset, theta: &SliceDirection) -> Projection {
    let raw: Vec<f64> = subset
        .members
        .iter()
        .map(|m| {
            let o = tile.coord_offset(m.cell, m.slot);
            theta.dot(&tile.samples()[o..o + tile.dim()])
        })
        .collect();
    let mut ranks: Vec<usize> = (0..raw.len()).collect();
    ranks.sort_by(|&a, &b| {
        raw[a]
            .total_cmp(&raw[b])
            .then(subset.members[a].cmp(&subset.members[b]))
    });
    Projection {
        values: ranks.iter().map(|&i| raw[i]).collect(),
        ranks,
    }
}

pub fn project(tile: &SampleTile, subset: &FilteredSubset, theta: &SliceDirection) -> Vec<f64> {
    project_ranked(tile, subset, theta).values
}

/// `count` uniform points from `density`, projected on `theta`, sorted.
pub fn target_projection<R: Rng + ?Sized>(
    count: usize,
    theta: &SliceDirection,
    density: TargetDensity,
    rng: &mut R,
) -> Vec<f64> {
    let mut point = vec![0.0; density.dim];
    let mut out: Vec<f64> = (0..count)
        .map(|_| {
            point.iter_mut().for_each(|c| *c = rng.random::<f64>());
            theta.dot(&point)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// How the 1D targets for a subset of `n` samples are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Quantiles `(k + 1/2) / n` of the projected density.
    #[default]
    Quantile,
    /// `n` fresh uniform draws, projected and sorted.
    Random,
}

/// Distribution of `theta . u` for `u` uniform on the unit hypercube: a shift
/// plus a sum of independent uniforms on `[0, a_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedUniform {
    shift: f64,
    widths: Vec<f64>,
    /// `sum a_J` and parity of every subset `J` of the widths.
    corners: Vec<(f64, f64)>,
    scale_cdf: f64,
    scale_pdf: f64,
    total: f64,
}

/// Widths below this fraction of the largest are replaced by their mean.
const NEGLIGIBLE_WIDTH: f64 = 1e-4;

impl ProjectedUniform {
    pub fn new(theta: &SliceDirection) -> Self {
        let max = theta.as_slice().iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let mut shift = 0.0;
        let mut widths = Vec::new();
        for &t in theta.as_slice() {
            if t.abs() < NEGLIGIBLE_WIDTH * max {
                shift += 0.5 * t;
            } else {
                if t < 0.0 {
                    shift += t;
                }
                widths.push(t.abs());
            }
        }
        let m = widths.len();
        let corners = (0..1usize << m)
            .map(|mask| {
                let sum: f64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| widths[i]).sum();
                let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                (sum, sign)
            })
            .collect();
        let prod: f64 = widths.iter().product();
        let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
        Self {
            shift,
            total: widths.iter().sum(),
            corners,
            scale_cdf: 1.0 / (fact(m) * prod),
            scale_pdf: 1.0 / (fact(m - 1) * prod),
            widths,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.shift, self.shift + self.total)
    }

    /// CDF of the unshifted sum on `[0, total / 2]`, where no cancellation
    /// against the upper corners occurs.
    fn lower_cdf(&self, s: f64) -> f64 {
        let m = self.widths.len() as i32;
        self.corners
            .iter()
            .filter(|(c, _)| s > *c)
            .map(|(c, sign)| sign * (s - c).powi(m))
            .sum::<f64>()
            * self.scale_cdf
    }

    fn lower_pdf(&self, s: f64) -> f64 {
        let m = self.widths.len() as i32;
        self.corners
            .iter()
            .filter(|(c, _)| s > *c)
            .map(|(c, sign)| sign * (s - c).powi(m - 1))
            .sum::<f64>()
            * self.scale_pdf
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let s = x - self.shift;
        if s <= 0.0 {
            0.0
        } else if s >= self.total {
            1.0
        } else if s <= 0.5 * self.total {
            self.lower_cdf(s).clamp(0.0, 1.0)
        } else {
            (1.0 - self.lower_cdf(self.total - s)).clamp(0.0, 1.0)
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let s = x - self.shift;
        if s <= 0.0 || s >= self.total {
            0.0
        } else if s <= 0.5 * self.total {
            self.lower_pdf(s).max(0.0)
        } else {
            self.lower_pdf(self.total - s).max(0.0)
        }
    }

    /// Inverse CDF by Newton steps kept inside a shrinking bisection bracket.
    pub fn quantile(&self, p: f64) -> f64 {
        let (lo0, hi0) = self.support();
        let p = p.clamp(0.0, 1.0);
        let (mut lo, mut hi) = (lo0, hi0);
        let mut x = lo0 + p * self.total;
        let tol = 1e-14 * self.total.max(1.0);
        for _ in 0..200 {
            let f = self.cdf(x) - p;
            if f.abs() < 1e-15 {
                break;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = self.pdf(x);
            let newton = if d > 0.0 { x - f / d } else { f64::NAN };
            x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < tol {
                break;
            }
        }
        x
    }
}

/// Midpoint quantiles of the projection of `density` on `theta`, ascending.
pub fn quantile_targets(count: usize, theta: &SliceDirection, density: TargetDensity) -> Vec<f64> {
    debug_assert_eq!(theta.as_slice().len(), density.dim);
    let dist = ProjectedUniform::new(theta);
    (0..count)
        .map(|k| dist.quantile((k as f64 + 0.5) / count as f64))
        .collect()
}

/// Exact 1D 2-Wasserstein distance between equal-size sorted point sets.
pub fn w1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    Ok(w1d_squared(xs, ys)?.sqrt())
}

/// `(1/m) sum (x_k - y_k)^2` under monotone pairing.
pub fn w1d_squared(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs.len(), ys.len())?;
    debug_assert!(xs.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    let m = xs.len() as f64;
    Ok(xs.iter().zip(ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m)
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!(
            "point sets differ in size: {a} vs {b}"
        )));
    }
    if a == 0 {
        return Err(Error::InvalidInput("point sets are empty".into()));
    }
    Ok(())
}

/// Gradient of [`w1d_squared`] with respect to each member's coordinates,
/// aligned with `subset.members`.
pub fn w1d_gradient(
    tile: &SampleTile,
    subset: &FilteredSubset,
    theta: &SliceDirection,
    targets: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let proj = project_ranked(tile, subset, theta);
    check_pair(proj.values.len(), targets.len())?;
    let m = targets.len() as f64;
    let mut out = vec![Vec::new(); subset.len()];
    for (k, &member) in proj.ranks.iter().enumerate() {
        let s = 2.0 / m * (proj.values[k] - targets[k]);
        out[member] = theta.as_slice().iter().map(|t| s * t).collect();
    }
    Ok(out)
}

/// Random choices behind one batch element.
#[derive(Clone, Debug)]
pub struct ElementDraw {
    pub subset: FilteredSubset,
    pub theta: SliceDirection,
    pub targets: Vec<f64>,
    /// Thresholds that produced empty subsets and were redrawn.
    pub empty_redraws: usize,
}

const MAX_REDRAWS: usize = 64;

/// Draws center, threshold, slice and targets for one batch element. Membership
/// depends only on the draws, never on sample positions.
pub fn draw_element(
    tile: &SampleTile,
    folded: &FoldedKernel,
    mode: TargetMode,
    rng: &mut StreamRng,
) -> Result<ElementDraw> {
    let [nx, ny, nt] = tile.dims();
    let mut empty_redraws = 0;
    loop {
        let center = CellIndex::new(
            rng.random_range(0..nx) as i64,
            rng.random_range(0..ny) as i64,
            rng.random_range(0..nt) as i64,
        );
        let z = rng.random::<f64>() * folded.max_weight();
        let theta = SliceDirection::random(tile.dim(), rng);
        match folded.filter(tile.spp(), center, z) {
            Ok(subset) if !subset.is_empty() => {
                let density = TargetDensity::uniform(tile.dim());
                let targets = match mode {
                    TargetMode::Quantile => quantile_targets(subset.len(), &theta, density),
                    TargetMode::Random => target_projection(subset.len(), &theta, density, rng),
                };
                return Ok(ElementDraw {
                    subset,
                    theta,
                    targets,
                    empty_redraws,
                });
            }
            _ if empty_redraws < MAX_REDRAWS => empty_redraws += 1,
            Ok(_) | Err(_) => {
                return Err(Error::EmptySubset {
                    z,
                    max_weight: folded.max_weight(),
                })
            }
        }
    }
}

/// Batch-mean gradient and the statistics logged alongside it.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    /// Same layout as [`SampleTile::samples`].
    pub gradient: Vec<f64>,
    /// Mean 1D distance (not squared) over the batch.
    pub mean_distance: f64,
    /// Mean squared 1D distance; the quantity whose gradient is returned.
    pub mean_squared: f64,
    pub empty_subsets: usize,
}

/// Adds `scale * w1d_gradient` of one element into a tile-shaped gradient buffer.
pub fn scatter_element(tile: &SampleTile, draw: &ElementDraw, scale: f64, gradient: &mut [f64]) -> Result<()> {
    let grads = w1d_gradient(tile, &draw.subset, &draw.theta, &draw.targets)?;
    for (member, g) in draw.subset.members.iter().zip(grads) {
        let o = tile.coord_offset(member.cell, member.slot);
        for (dst, v) in gradient[o..o + tile.dim()].iter_mut().zip(g) {
            *dst += scale * v;
        }
    }
    Ok(())
}

/// Estimates the batch-mean gradient for `iteration` under master seed `seed`.
/// Element `e` draws from stream `(iteration, e)`, and contributions are summed
/// in element order, so the result is independent of thread count.
pub fn estimate_gradient(
    tile: &SampleTile,
    folded: &FoldedKernel,
    batch_size: usize,
    mode: TargetMode,
    seed: u64,
    iteration: u32,
) -> Result<GradientEstimate> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    let dim = tile.dim();
    let parts: Vec<Result<(Vec<(usize, f64)>, f64, usize)>> = (0..batch_size)
        .into_par_iter()
        .map(|e| {
            let mut rng = rng::stream(seed, iteration, e as u32);
            let draw = draw_element(tile, folded, mode, &mut rng)?;
            let proj = project_ranked(tile, &draw.subset, &draw.theta);
            let m = draw.targets.len() as f64;
            let mut sq = 0.0;
            let mut sparse = Vec::with_capacity(proj.ranks.len() * dim);
            for (k, &i) in proj.ranks.iter().enumerate() {
                let diff = proj.values[k] - draw.targets[k];
                sq += diff * diff;
                let s = 2.0 / m * diff;
                let member = draw.subset.members[i];
                let o = tile.coord_offset(member.cell, member.slot);
                for (c, t) in draw.theta.as_slice().iter().enumerate() {
                    sparse.push((o + c, s * t));
                }
            }
            Ok((sparse, sq / m, draw.empty_redraws))
        })
        .collect();

    let mut gradient = vec![0.0; tile.samples().len()];
    let mut sum_d = 0.0;
    let mut sum_sq = 0.0;
    let mut empty = 0;
    for part in parts {
        let (sparse, sq, e) = part?;
        for (i, g) in sparse {
            gradient[i] += g;
        }
        sum_sq += sq;
        sum_d += sq.sqrt();
        empty += e;
    }
    let inv = 1.0 / batch_size as f64;
    gradient.iter_mut().for_each(|g| *g *= inv);
    Ok(GradientEstimate {
        gradient,
        mean_distance: sum_d * inv,
        mean_squared: sum_sq * inv,
        empty_subsets: empty,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Multiplies the logged objective only.
    pub lipschitz_scale: f64,
    pub targets: TargetMode,
    /// Remap each coordinate to its rank quantile after the last step.
    pub equalize_marginals: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 4_000,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
            seed: 0,
            lipschitz_scale: 1.0,
            targets: TargetMode::Quantile,
            equalize_marginals: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::param("adam_epsilon", "must be positive"));
        }
        if !(self.lipschitz_scale > 0.0 && self.lipschitz_scale.is_finite()) {
            return Err(Error::param("lipschitz_scale", "must be positive"));
        }
        if self.iterations > u32::MAX as usize {
            return Err(Error::param("iterations", "too many iterations"));
        }
        Ok(())
    }
}

/// Adam moments shaped like the tile's coordinate storage.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam step on `params` followed by boundary reflection.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], cfg: &OptimizerConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(gradient.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = cfg.learning_rate;
        let eps = cfg.adam_epsilon;
        params
            .par_iter_mut()
            .zip(self.m.par_iter_mut())
            .zip(self.v.par_iter_mut())
            .zip(gradient.par_iter())
            .for_each(|(((p, m), v), &g)| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = reflect_unit(*p - lr * mh / (vh.sqrt() + eps));
            });
    }
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Folds a real number into `[0, 1)` by mirror reflection at 0 and 1.
pub fn reflect_unit(x: f64) -> f64 {
    if (0.0..1.0).contains(&x) {
        return x;
    }
    let y = x.rem_euclid(2.0);
    let r = if y >= 1.0 { 2.0 - y } else { y };
    if r >= 1.0 {
        BELOW_ONE
    } else if r < 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Batch-mean sliced 1D distance times the Lipschitz scale.
    pub objective: f64,
    pub empty_subset_count: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Optimized {
    pub tile: SampleTile,
    pub log: Vec<LogEntry>,
    pub warnings: Vec<String>,
}

/// Axes on which the tile is less than ten times the kernel extent.
pub fn tile_ratio_warnings(kernel: &SpatioTemporalKernel, dims: [usize; 3]) -> Vec<String> {
    let names = ["X", "Y", "T"];
    kernel
        .extent()
        .iter()
        .zip(dims)
        .zip(names)
        .filter(|((&k, d), _)| *d < 10 * k && k > 1)
        .map(|((&k, d), n)| {
            format!("tile axis {n} ({d}) is less than 10x the kernel extent ({k}); tiling artifacts likely")
        })
        .collect()
}

pub fn optimize(tile: SampleTile, kernel: &SpatioTemporalKernel, config: &OptimizerConfig) -> Result<Optimized> {
    optimize_with(tile, kernel, config, |_| {})
}

/// Runs `config.iterations` Adam steps, calling `progress` after each one.
pub fn optimize_with(
    mut tile: SampleTile,
    kernel: &SpatioTemporalKernel,
    config: &OptimizerConfig,
    mut progress: impl FnMut(&LogEntry),
) -> Result<Optimized> {
    config.validate()?;
    let dims = tile.dims();
    let extent = kernel.extent();
    if extent.iter().zip(dims).any(|(&k, d)| k > d) {
        return Err(Error::param(
            "kernel",
            format!("kernel extent {extent:?} exceeds tile dimensions {dims:?}"),
        ));
    }
    let warnings = tile_ratio_warnings(kernel, dims);
    let folded = FoldedKernel::new(kernel, dims);
    let mut adam = AdamState::new(tile.samples().len());
    let mut log = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    for it in 0..config.iterations {
        let est = estimate_gradient(&tile, &folded, config.batch_size, config.targets, config.seed, it as u32)?;
        adam.step(tile.samples_mut(), &est.gradient, config);
        let entry = LogEntry {
            iteration: it,
            objective: config.lipschitz_scale * est.mean_distance,
            empty_subset_count: est.empty_subsets,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        progress(&entry);
        log.push(entry);
    }
    if config.equalize_marginals && config.iterations > 0 {
        equalize_marginals(&mut tile);
    }
    Ok(Optimized {
        tile,
        log,
        warnings,
    })
}

/// Replaces every coordinate by `(rank + 1/2) / n` among all samples of the
/// tile, component by component. Order within each component is kept, so the
/// relative arrangement survives while the marginals become exactly uniform.
///
/// Small filtered subsets pull their members toward the center of the slice,
/// which leaves the optimized marginals short of mass near 0 and 1.
pub fn equalize_marginals(tile: &mut SampleTile) {
    let dim = tile.dim();
    let n = tile.samples().len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    for c in 0..dim {
        let samples = tile.samples();
        order.sort_by(|&a, &b| samples[a * dim + c].total_cmp(&samples[b * dim + c]).then(a.cmp(&b)));
        let values = tile.samples_mut();
        for (rank, &i) in order.iter().enumerate() {
            values[i * dim + c] = (rank as f64 + 0.5) / n as f64;
        }
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
    }
}

/// Mean of `values[i..i + window]` for the first and last full windows.
pub fn window_means(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || values.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..window]), mean(&values[values.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{ApplicationPolicy, SpatialKernel, TaaKernel, DEFAULT_SPATIAL_TRUNCATION};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_kernel() -> SpatioTemporalKernel {
        let ks = SpatialKernel::gaussian(2.1, DEFAULT_SPATIAL_TRUNCATION).unwrap();
        SpatioTemporalKernel::compose(&ks, None, None, ApplicationPolicy::Toroidal)
    }

    fn taa_kernel() -> SpatioTemporalKernel {
        let ks = SpatialKernel::gaussian(2.1, DEFAULT_SPATIAL_TRUNCATION).unwrap();
        let ka = TaaKernel::new(0.2, Some(8)).unwrap();
        SpatioTemporalKernel::compose(&ks, None, Some(&ka), ApplicationPolicy::Toroidal)
    }

    /// Minimum over all m! assignments of the mean squared pairing cost.
    fn brute_force_w2(xs: &[f64], ys: &[f64]) -> f64 {
        fn permute(k: usize, idx: &mut Vec<usize>, xs: &[f64], ys: &[f64], best: &mut f64) {
            if k == idx.len() {
                let c: f64 = idx.iter().enumerate().map(|(i, &j)| (xs[i] - ys[j]).powi(2)).sum();
                *best = best.min(c);
                return;
            }
            for i in k..idx.len() {
                idx.swap(k, i);
                permute(k + 1, idx, xs, ys, best);
                idx.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        permute(0, &mut (0..xs.len()).collect(), xs, ys, &mut best);
        (best / xs.len() as f64).sqrt()
    }

    #[test]
    fn w1d_small_cases() {
        assert_eq!(w1d(&[0.1, 0.4], &[0.1, 0.4]).unwrap(), 0.0);
        assert!((w1d(&[0.0, 0.5], &[0.5, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((brute_force_w2(&[0.0, 0.5], &[0.5, 1.0]) - 0.5).abs() < 1e-15);
        assert!(matches!(w1d(&[0.0], &[0.0, 1.0]), Err(Error::InvalidInput(_))));
        assert!(w1d(&[], &[]).is_err());
    }

    #[test]
    fn w1d_matches_exhaustive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = rng.random_range(1..=6);
            let mut xs: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            let mut ys: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let brute = brute_force_w2(&xs, &ys);
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            assert!((w1d(&xs, &ys).unwrap() - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_threshold_examples() {
        let tile = SampleTile::init_random([16, 16, 4], 2, 2, 1).unwrap();
        let k = gaussian_kernel();
        let all = filter_subset(&tile, &k, CellIndex::new(3, 3, 1), 0.0).unwrap();
        assert_eq!(all.len(), 49 * 2);
        assert!(matches!(
            filter_subset(&tile, &k, CellIndex::new(0, 0, 0), k.max_weight()),
            Err(Error::EmptySubset { .. })
        ));
        let top = filter_subset(&tile, &k, CellIndex::new(0, 0, 0), k.max_weight() * 0.999).unwrap();
        assert_eq!(top.members, vec![Member { cell: 0, slot: 0 }, Member { cell: 0, slot: 1 }]);
    }

    #[test]
    fn filter_matches_full_scan() {
        let tile = SampleTile::init_random([16, 12, 5], 1, 2, 1).unwrap();
        let k = taa_kernel();
        let z = 0.5 * k.max_weight();
        for center in [CellIndex::new(0, 0, 0), CellIndex::new(15, 11, 4), CellIndex::new(7, 2, 1)] {
            let subset = filter_subset(&tile, &k, center, z).unwrap();
            // Scan every tile cell and every kernel tap that wraps onto it.
            let mut expected = Vec::new();
            for t in 0..5i64 {
                for y in 0..12i64 {
                    for x in 0..16i64 {
                        let mut g = 0.0;
                        for (dx, dy, dt, w) in k.taps() {
                            let hit = (center.x + dx as i64 - x).rem_euclid(16) == 0
                                && (center.y + dy as i64 - y).rem_euclid(12) == 0
                                && (center.t + dt as i64 - t).rem_euclid(5) == 0;
                            if hit {
                                g += w;
                            }
                        }
                        if g.abs() > z {
                            expected.push(((t * 12 + y) * 16 + x) as usize);
                        }
                    }
                }
            }
            let got: Vec<usize> = subset.members.iter().map(|m| m.cell).collect();
            assert_eq!(got, expected);
        }
    }

    fn subset_of(tile: &SampleTile) -> FilteredSubset {
        filter_subset(tile, &gaussian_kernel(), CellIndex::new(4, 4, 0), 0.0).unwrap()
    }

    #[test]
    fn axis_projection_is_sorted_first_coordinate() {
        let tile = SampleTile::init_random([8, 8, 1], 1, 2, 2).unwrap();
        let s = subset_of(&tile);
        let got = project(&tile, &s, &SliceDirection::new(vec![1.0, 0.0]).unwrap());
        let mut expected: Vec<f64> = s.members.iter().map(|m| tile.samples()[m.cell * 2]).collect();
        expected.sort_by(f64::total_cmp);
        assert_eq!(got, expected);
    }

    #[test]
    fn negated_direction_reverses() {
        let tile = SampleTile::init_random([8, 8, 1], 1, 3, 2).unwrap();
        let s = subset_of(&tile);
        let theta = SliceDirection::random(3, &mut ChaCha8Rng::seed_from_u64(1));
        let a = project(&tile, &s, &theta);
        let b = project(&tile, &s, &theta.negated());
        let rev: Vec<f64> = b.iter().rev().map(|v| -v).collect();
        assert_eq!(a, rev);
    }

    #[test]
    fn hand_computed_projection() {
        let samples = vec![0.1, 0.2, 0.5, 0.5, 0.9, 0.0, 0.3, 0.7];
        let tile = SampleTile::from_samples([2, 2, 1], 1, 2, 0, samples).unwrap();
        let subset = FilteredSubset {
            center: CellIndex::default(),
            z: 0.0,
            members: (0..4).map(|cell| Member { cell, slot: 0 }).collect(),
        };
        let theta = SliceDirection::new(vec![0.6, 0.8]).unwrap();
        let p = project(&tile, &subset, &theta);
        // 0.06+0.16, 0.30+0.40, 0.54+0.00, 0.18+0.56
        let expected = [0.22, 0.54, 0.70, 0.74];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_by_member_index() {
        let tile = SampleTile::from_samples([2, 1, 1], 2, 1, 0, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let subset = FilteredSubset {
            center: CellIndex::default(),
            z: 0.0,
            members: vec![
                Member { cell: 0, slot: 0 },
                Member { cell: 0, slot: 1 },
                Member { cell: 1, slot: 0 },
                Member { cell: 1, slot: 1 },
            ],
        };
        let p = project_ranked(&tile, &subset, &SliceDirection::new(vec![1.0]).unwrap());
        assert_eq!(p.ranks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn target_projection_properties() {
        let theta = SliceDirection::new(vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = target_projection(100, &theta, TargetDensity::uniform(1), &mut rng);
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
        assert!(t.iter().all(|v| (0.0..1.0).contains(v)));
        let a = target_projection(50, &theta, TargetDensity::uniform(1), &mut ChaCha8Rng::seed_from_u64(9));
        let b = target_projection(50, &theta, TargetDensity::uniform(1), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        // Kolmogorov-Smirnov distance against U(0,1) along an axis of the 2D cube.
        let theta = SliceDirection::new(vec![0.0, 1.0]).unwrap();
        let n = 10_000;
        let t = target_projection(n, &theta, TargetDensity::uniform(2), &mut rng);
        let ks = t
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / n as f64 - v).abs().max((v - i as f64 / n as f64).abs()))
            .fold(0.0f64, f64::max);
        assert!(ks < 0.02, "ks {ks}");
    }

    #[test]
    fn quantile_targets_in_one_dimension_are_midpoints() {
        let t = quantile_targets(4, &SliceDirection::new(vec![1.0]).unwrap(), TargetDensity::uniform(1));
        for (a, b) in t.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert!((a - b).abs() < 1e-13);
        }
        let t = quantile_targets(2, &SliceDirection::new(vec![-1.0]).unwrap(), TargetDensity::uniform(1));
        assert!((t[0] + 0.75).abs() < 1e-13 && (t[1] + 0.25).abs() < 1e-13);
    }

    #[test]
    fn projected_square_matches_trapezoid() {
        // theta = (a, b) with a >= b > 0: density rises on [0, b], flat to a, falls to a + b.
        let theta = SliceDirection::new(vec![0.8, 0.6]).unwrap();
        let (a, b) = (0.8, 0.6);
        let trapezoid = |s: f64| {
            if s <= b {
                s * s / (2.0 * a * b)
            } else if s <= a {
                (s - b / 2.0) / a
            } else {
                1.0 - (a + b - s).powi(2) / (2.0 * a * b)
            }
        };
        let d = ProjectedUniform::new(&theta);
        for i in 0..=100 {
            let s = (a + b) * i as f64 / 100.0;
            assert!((d.cdf(s) - trapezoid(s)).abs() < 1e-12, "{s}");
        }
        for i in 1..100 {
            let p = i as f64 / 100.0;
            assert!((trapezoid(d.quantile(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn projected_cube_matches_empirical_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let theta = SliceDirection::random(4, &mut rng);
            let d = ProjectedUniform::new(&theta);
            let n = 20_000;
            let draws = target_projection(n, &theta, TargetDensity::uniform(4), &mut rng);
            let ks = draws
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64 / n as f64 - d.cdf(v)).abs().max((d.cdf(v) - i as f64 / n as f64).abs()))
                .fold(0.0f64, f64::max);
            assert!(ks < 0.015, "ks {ks}");
            let q = quantile_targets(9, &theta, TargetDensity::uniform(4));
            assert!(q.windows(2).all(|w| w[0] < w[1]));
            // Symmetric about the projected cube center.
            let mid: f64 = theta.as_slice().iter().sum::<f64>() / 2.0;
            assert!((q[4] - mid).abs() < 1e-12);
            assert!((q[0] + q[8] - 2.0 * mid).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_components_are_absorbed() {
        let theta = SliceDirection::new(vec![1.0, 1e-9]).unwrap();
        let d = ProjectedUniform::new(&theta);
        assert!((d.quantile(0.3) - 0.3).abs() < 1e-8);
        assert!(d.pdf(0.5) > 0.99);
    }

    #[test]
    fn gradient_trivial_cases() {
        let tile = SampleTile::from_samples([1, 1, 1], 1, 2, 0, vec![0.3, 0.9]).unwrap();
        let subset = FilteredSubset {
            center: CellIndex::default(),
            z: 0.0,
            members: vec![Member { cell: 0, slot: 0 }],
        };
        let theta = SliceDirection::new(vec![1.0, 0.0]).unwrap();
        let g = w1d_gradient(&tile, &subset, &theta, &[0.7]).unwrap();
        assert!((g[0][0] - 2.0 * (0.3 - 0.7)).abs() < 1e-15);
        assert_eq!(g[0][1], 0.0);

        let at_target = w1d_gradient(&tile, &subset, &theta, &[0.3]).unwrap();
        assert_eq!(at_target[0], vec![0.0, 0.0]);
        assert!(w1d_gradient(&tile, &subset, &theta, &[0.3, 0.4]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tile = SampleTile::init_random([5, 1, 1], 1, 3, 12).unwrap();
        let subset = FilteredSubset {
            center: CellIndex::default(),
            z: 0.0,
            members: (0..5).map(|cell| Member { cell, slot: 0 }).collect(),
        };
        let theta = SliceDirection::random(3, &mut rng);
        let targets = target_projection(5, &theta, TargetDensity::uniform(3), &mut rng);
        let g = w1d_gradient(&tile, &subset, &theta, &targets).unwrap();
        let h = 1e-6;
        for (i, member) in subset.members.iter().enumerate() {
            for c in 0..3 {
                let o = tile.coord_offset(member.cell, member.slot) + c;
                let f = |delta: f64| {
                    let mut t = tile.clone();
                    t.samples_mut()[o] += delta;
                    w1d_squared(&project(&t, &subset, &theta), &targets).unwrap()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - g[i][c]).abs() <= 1e-4 * g[i][c].abs().max(1e-3), "{fd} vs {}", g[i][c]);
            }
        }
    }

    #[test]
    fn single_element_batch_is_one_scatter() {
        let tile = SampleTile::init_random([8, 8, 8], 2, 2, 3).unwrap();
        let k = taa_kernel();
        let folded = FoldedKernel::new(&k, tile.dims());
        let est = estimate_gradient(&tile, &folded, 1, TargetMode::Quantile, 77, 5).unwrap();
        let draw = draw_element(&tile, &folded, TargetMode::Quantile, &mut rng::stream(77, 5, 0)).unwrap();
        let mut expected = vec![0.0; tile.samples().len()];
        scatter_element(&tile, &draw, 1.0, &mut expected).unwrap();
        for (a, b) in est.gradient.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let d = w1d(&project(&tile, &draw.subset, &draw.theta), &draw.targets).unwrap();
        assert!((est.mean_distance - d).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_bitwise_reproducible() {
        let tile = SampleTile::init_random([8, 8, 8], 1, 2, 3).unwrap();
        let folded = FoldedKernel::new(&taa_kernel(), tile.dims());
        let a = estimate_gradient(&tile, &folded, 64, TargetMode::Random, 1, 0).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| estimate_gradient(&tile, &folded, 64, TargetMode::Random, 1, 0).unwrap());
        assert_eq!(
            a.gradient.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.gradient.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.mean_distance.to_bits(), b.mean_distance.to_bits());
    }

    #[test]
    fn reflection_keeps_unit_interval() {
        for x in [-2.5, -1.0, -0.25, 0.0, 0.5, 1.0, 1.25, 2.0, 3.7, -1e-300] {
            let r = reflect_unit(x);
            assert!((0.0..1.0).contains(&r), "{x} -> {r}");
        }
        assert!((reflect_unit(-0.25) - 0.25).abs() < 1e-15);
        assert!((reflect_unit(1.25) - 0.75).abs() < 1e-15);
        assert!((reflect_unit(2.3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn reflection_preserves_uniform() {
        // Perturb uniform points by symmetric noise wide enough to cross both
        // boundaries, reflect, and compare against U(0,1).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| reflect_unit(rng.random::<f64>() + (rng.random::<f64>() - 0.5) * 0.6))
            .collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / n as f64 - v).abs().max((v - i as f64 / n as f64).abs()))
            .fold(0.0f64, f64::max);
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn zero_iterations_is_identity() {
        let tile = SampleTile::init_random([8, 8, 8], 1, 2, 3).unwrap();
        let cfg = OptimizerConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = optimize(tile.clone(), &taa_kernel(), &cfg).unwrap();
        assert_eq!(out.tile, tile);
        assert!(out.log.is_empty());
    }

    #[test]
    fn config_validation() {
        let bad = [
            OptimizerConfig { batch_size: 0, ..Default::default() },
            OptimizerConfig { learning_rate: 0.0, ..Default::default() },
            OptimizerConfig { adam_beta1: 1.0, ..Default::default() },
            OptimizerConfig { adam_beta2: -0.1, ..Default::default() },
            OptimizerConfig { lipschitz_scale: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidParameter { .. })));
        }
        assert!(OptimizerConfig::default().validate().is_ok());
    }

    #[test]
    fn kernel_larger_than_tile_is_rejected() {
        let tile = SampleTile::init_random([8, 8, 4], 1, 2, 3).unwrap();
        let cfg = OptimizerConfig { iterations: 1, batch_size: 1, ..Default::default() };
        assert!(optimize(tile, &taa_kernel(), &cfg).is_err());
        assert_eq!(tile_ratio_warnings(&taa_kernel(), [128, 128, 30]).len(), 1);
        assert!(tile_ratio_warnings(&taa_kernel(), [128, 128, 80]).is_empty());
    }

    #[test]
    fn equalized_marginals_are_a_lattice_and_keep_order() {
        let before = SampleTile::init_random([6, 5, 4], 2, 3, 8).unwrap();
        let mut after = before.clone();
        equalize_marginals(&mut after);
        let n = before.sample_count();
        for c in 0..3 {
            let col = |t: &SampleTile| (0..n).map(|i| t.samples()[i * 3 + c]).collect::<Vec<_>>();
            let (b, a) = (col(&before), col(&after));
            let mut sorted = a.clone();
            sorted.sort_by(f64::total_cmp);
            for (k, v) in sorted.iter().enumerate() {
                assert!((v - (k as f64 + 0.5) / n as f64).abs() < 1e-15);
            }
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(b[i] < b[j], a[i] < a[j]);
                }
            }
        }
        let mut again = after.clone();
        equalize_marginals(&mut again);
        assert_eq!(again, after);
    }

    #[test]
    fn zero_iterations_skip_equalization() {
        let tile = SampleTile::init_random([8, 8, 8], 1, 2, 3).unwrap();
        let cfg = OptimizerConfig { iterations: 0, ..Default::default() };
        assert_eq!(optimize(tile.clone(), &taa_kernel(), &cfg).unwrap().tile, tile);
    }

    #[test]
    fn lipschitz_scale_only_scales_the_log() {
        let tile = SampleTile::init_random([8, 8, 8], 1, 2, 3).unwrap();
        let cfg = OptimizerConfig { iterations: 20, batch_size: 16, seed: 5, ..Default::default() };
        let a = optimize(tile.clone(), &taa_kernel(), &cfg).unwrap();
        let b = optimize(tile, &taa_kernel(), &OptimizerConfig { lipschitz_scale: 2.0, ..cfg }).unwrap();
        assert_eq!(a.tile, b.tile);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(2.0 * x.objective, y.objective);
        }
    }
}
