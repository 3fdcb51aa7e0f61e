//! Analytic test scenes, a renderer that consumes sample tiles, and the
//! a posteriori "vertical" candidate-selection optimizer.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpatialKernel;
use crate::percept::PerceptualModel;
use crate::rng;
use crate::sequence::{pairwise_sum, FrameSequence};
use crate::tile::{CellIndex, SampleTile};

const RAMP_BASE: f64 = 0.2;
const RAMP_DX: f64 = 1.0 / 256.0;
const RAMP_DT: f64 = 1.0 / 4096.0;
const RAMP_AMPLITUDE: f64 = 0.4;

const BLOB_BACKGROUND: f64 = 0.1;
const BLOB_PEAK: f64 = 0.8;
const BLOB_START: [f64; 2] = [20.0, 32.0];
const BLOB_VELOCITY: f64 = 0.02;
const BLOB_SIGMA: f64 = 12.0;

const STEP_AMPLITUDE: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Integrand ignores the payload.
    Constant,
    /// Mean linear in `x` and `t`; integrand linear in the payload.
    Ramp,
    /// Gaussian bump moving along `x`; integrand smooth in the payload.
    Blob,
    /// Integrand jumps at a per-pixel payload threshold.
    Step,
}

/// An integrand over `(pixel x, pixel y, frame t, payload u)` with a known payload average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestScene {
    pub name: String,
    pub kind: SceneKind,
    /// Lipschitz bound in the payload; infinite for discontinuous scenes.
    pub lipschitz_bound: f64,
}

pub fn builtin_scenes() -> Vec<TestScene> {
    [SceneKind::Constant, SceneKind::Ramp, SceneKind::Blob, SceneKind::Step]
        .into_iter()
        .map(TestScene::new)
        .collect()
}

pub fn scene_by_name(name: &str) -> Result<TestScene> {
    builtin_scenes()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown scene `{name}`; available: constant, ramp, blob, step"
            ))
        })
}

fn ramp_coefficient(i: usize) -> f64 {
    0.5f64.powi(i as i32)
}

fn blob_factor(i: usize, u: f64) -> f64 {
    if i == 0 {
        1.5 * (1.0 - 4.0 * (u - 0.5) * (u - 0.5))
    } else {
        1.0 + (u - 0.5)
    }
}

impl TestScene {
    pub fn new(kind: SceneKind) -> Self {
        let (name, lipschitz_bound) = match kind {
            SceneKind::Constant => ("constant", 0.0),
            SceneKind::Ramp => ("ramp", RAMP_AMPLITUDE * (4.0f64 / 3.0).sqrt()),
            // |d h0/du| <= 6 at the edges, scaled by the peak.
            SceneKind::Blob => ("blob", BLOB_PEAK * 6.0 * 1.5),
            SceneKind::Step => ("step", f64::INFINITY),
        };
        Self {
            name: name.into(),
            kind,
            lipschitz_bound,
        }
    }

    fn ramp_mean(x: f64, t: f64) -> f64 {
        RAMP_BASE + RAMP_DX * x + RAMP_DT * t
    }

    fn blob_envelope(x: f64, y: f64, t: f64) -> f64 {
        let cx = BLOB_START[0] + BLOB_VELOCITY * t;
        let (dx, dy) = (x - cx, y - BLOB_START[1]);
        (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
    }

    fn step_threshold(x: f64, y: f64, t: f64) -> f64 {
        0.5 + 0.35 * (0.9 * x + 1.3 * y + 0.7 * t).sin()
    }

    pub fn integrand(&self, x: usize, y: usize, t: usize, u: &[f64]) -> f64 {
        let (xf, yf, tf) = (x as f64, y as f64, t as f64);
        match self.kind {
            SceneKind::Constant => 0.5,
            SceneKind::Ramp => {
                let payload: f64 = u
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| ramp_coefficient(i) * (v - 0.5))
                    .sum();
                Self::ramp_mean(xf, tf) + RAMP_AMPLITUDE * payload
            }
            SceneKind::Blob => {
                let h: f64 = u.iter().enumerate().map(|(i, &v)| blob_factor(i, v)).product();
                BLOB_BACKGROUND + BLOB_PEAK * Self::blob_envelope(xf, yf, tf) * h
            }
            SceneKind::Step => {
                let hit = u[0] < Self::step_threshold(xf, yf, tf);
                Self::ramp_mean(xf, tf) + if hit { STEP_AMPLITUDE } else { 0.0 }
            }
        }
    }

    /// Exact payload average of [`Self::integrand`] at a pixel-frame.
    pub fn analytic_mean(&self, x: usize, y: usize, t: usize) -> f64 {
        let (xf, yf, tf) = (x as f64, y as f64, t as f64);
        match self.kind {
            SceneKind::Constant => 0.5,
            SceneKind::Ramp => Self::ramp_mean(xf, tf),
            SceneKind::Blob => BLOB_BACKGROUND + BLOB_PEAK * Self::blob_envelope(xf, yf, tf),
            SceneKind::Step => Self::ramp_mean(xf, tf) + STEP_AMPLITUDE * Self::step_threshold(xf, yf, tf),
        }
    }

    /// Analytic means over a `width x height x frames` sequence.
    pub fn reference(&self, dims: [usize; 3]) -> Result<FrameSequence> {
        FrameSequence::from_fn(dims, |x, y, t| self.analytic_mean(x, y, t))
    }
}

/// Midpoint-rule payload average on an `n^dim` grid.
pub fn quadrature_mean(scene: &TestScene, x: usize, y: usize, t: usize, dim: usize, n: usize) -> f64 {
    let total = n.pow(dim as u32);
    let mut u = vec![0.0; dim];
    let terms: Vec<f64> = (0..total)
        .map(|mut i| {
            for c in u.iter_mut() {
                *c = ((i % n) as f64 + 0.5) / n as f64;
                i /= n;
            }
            scene.integrand(x, y, t, &u)
        })
        .collect();
    pairwise_sum(&terms) / total as f64
}

/// Renders `width x height x frames`, looking up the tile cell at
/// `(x mod X, y mod Y, t mod T)` and averaging the integrand over its samples.
pub fn render_with_tile(scene: &TestScene, tile: &SampleTile, image: [usize; 2], frames: usize) -> Result<FrameSequence> {
    let dims = [image[0], image[1], frames];
    let mut out = FrameSequence::zeros(dims)?;
    let (w, h) = (image[0], image[1]);
    out.values_mut()
        .par_chunks_mut(w * h)
        .enumerate()
        .for_each(|(t, frame)| {
            for y in 0..h {
                for x in 0..w {
                    let cell = CellIndex::new(x as i64, y as i64, t as i64);
                    let sum: f64 = tile
                        .samples_in_cell(cell)
                        .iter()
                        .map(|u| scene.integrand(x, y, t, u))
                        .sum();
                    frame[y * w + x] = sum / tile.spp() as f64;
                }
            }
        });
    Ok(out)
}

/// `m` candidate payloads per pixel-frame and the index of the chosen one.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBank {
    dims: [usize; 3],
    m: usize,
    dim: usize,
    payloads: Vec<f64>,
    chosen: Vec<usize>,
}

impl CandidateBank {
    /// I.i.d. uniform candidates; candidate 0 is chosen everywhere, so the
    /// initial bank renders as white noise.
    pub fn random(dims: [usize; 3], m: usize, dim: usize, seed: u64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::param("dims", "must be positive"));
        }
        if m == 0 {
            return Err(Error::param("m", "need at least one candidate"));
        }
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        let cells = dims[0] * dims[1] * dims[2];
        let mut r = rng::master(seed);
        let payloads = (0..cells * m * dim).map(|_| r.random::<f64>()).collect();
        Ok(Self {
            dims,
            m,
            dim,
            payloads,
            chosen: vec![0; cells],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn candidates(&self) -> usize {
        self.m
    }

    pub fn chosen(&self) -> &[usize] {
        &self.chosen
    }

    pub fn payload(&self, cell: usize, k: usize) -> &[f64] {
        let o = (cell * self.m + k) * self.dim;
        &self.payloads[o..o + self.dim]
    }

    fn coords(&self, cell: usize) -> [usize; 3] {
        let [w, h, _] = self.dims;
        [cell % w, (cell / w) % h, cell / (w * h)]
    }

    /// Integrand values of every candidate, `cell * m + k`.
    fn candidate_values(&self, scene: &TestScene) -> Vec<f64> {
        (0..self.chosen.len() * self.m)
            .into_par_iter()
            .map(|i| {
                let (cell, k) = (i / self.m, i % self.m);
                let [x, y, t] = self.coords(cell);
                scene.integrand(x, y, t, self.payload(cell, k))
            })
            .collect()
    }

    pub fn render(&self, scene: &TestScene) -> Result<FrameSequence> {
        let values: Vec<f64> = (0..self.chosen.len())
            .map(|cell| {
                let [x, y, t] = self.coords(cell);
                scene.integrand(x, y, t, self.payload(cell, self.chosen[cell]))
            })
            .collect();
        FrameSequence::from_values(self.dims, values)
    }
}

#[derive(Clone, Debug)]
pub struct VerticalResult {
    pub bank: CandidateBank,
    /// L1 perceptual error before the first sweep and after each sweep.
    pub objective: Vec<f64>,
    pub accepted_swaps: Vec<usize>,
}

/// Separable response of the perceptual model to a unit change of one raw pixel.
struct Response {
    radius: isize,
    dims: [usize; 3],
    wrap: bool,
    spatial: SpatialKernel,
    /// Reciprocal of the available spatial weight at each output pixel.
    spatial_norm: Vec<f64>,
    /// `temporal[t_out * T + t_in]`.
    temporal: Vec<f64>,
}

impl Response {
    fn new(model: &PerceptualModel, dims: [usize; 3]) -> Result<Self> {
        use crate::kernels::ApplicationPolicy as P;
        let [w, h, frames] = dims;
        let spatial = model.spatial.clone();
        let r = spatial.radius() as isize;
        let wrap = model.policy == P::Toroidal;
        let renorm = model.policy == P::CausalRenormalized;
        let full = spatial.dc_gain();
        let mut spatial_norm = vec![1.0; w * h];
        if renorm {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut used = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sx, sy) = (x + dx, y + dy);
                            if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                                used += spatial.weight(dx, dy);
                            }
                        }
                    }
                    spatial_norm[(y as usize) * w + x as usize] = full / used;
                }
            }
        }
        let temporal_model = PerceptualModel {
            spatial: SpatialKernel::delta(),
            ..model.clone()
        };
        let mut temporal = vec![0.0; frames * frames];
        for t_in in 0..frames {
            let mut impulse = FrameSequence::zeros([1, 1, frames])?;
            impulse.set(0, 0, t_in, 1.0);
            let out = temporal_model.filter(&temporal_model.displayed(&impulse));
            for t_out in 0..frames {
                temporal[t_out * frames + t_in] = out.values()[t_out];
            }
        }
        Ok(Self {
            radius: r,
            dims,
            wrap,
            spatial,
            spatial_norm,
            temporal,
        })
    }

    /// Calls `f(output index, weight)` for every output touched by input `(x, y, t)`.
    fn for_each(&self, x: usize, y: usize, t: usize, mut f: impl FnMut(usize, f64)) {
        let [w, h, frames] = self.dims;
        let r = self.radius;
        for t_out in 0..frames {
            let wt = self.temporal[t_out * frames + t];
            if wt == 0.0 {
                continue;
            }
            for oy in -r..=r {
                let yo = y as isize + oy;
                let yo = if self.wrap {
                    yo.rem_euclid(h as isize) as usize
                } else if yo < 0 || yo >= h as isize {
                    continue;
                } else {
                    yo as usize
                };
                for ox in -r..=r {
                    let xo = x as isize + ox;
                    let xo = if self.wrap {
                        xo.rem_euclid(w as isize) as usize
                    } else if xo < 0 || xo >= w as isize {
                        continue;
                    } else {
                        xo as usize
                    };
                    // Output (xo, yo) reads input (x, y) through tap (x - xo, y - yo) = (-ox, -oy).
                    let ws = self.spatial.weight(-ox, -oy) * self.spatial_norm[yo * w + xo];
                    f((t_out * h + yo) * w + xo, ws * wt);
                }
            }
        }
    }
}

/// Coordinate descent over candidate choices minimizing the L1 norm of the
/// perceptual error `model.error(render, reference)`.
///
/// Pixel-frames are visited in a seeded random order each sweep; a candidate
/// replaces the current choice only if it lowers the objective by more than a
/// round-off margin, so the logged objective never increases.
pub fn aposteriori_vertical(
    scene: &TestScene,
    bank: &CandidateBank,
    model: &PerceptualModel,
    sweeps: usize,
    seed: u64,
) -> Result<VerticalResult> {
    let dims = bank.dims;
    let reference = scene.reference(dims)?;
    let values = bank.candidate_values(scene);
    let m = bank.m;
    let mut bank = bank.clone();
    let mut objective = Vec::with_capacity(sweeps + 1);
    let mut accepted_swaps = Vec::with_capacity(sweeps);

    let l1 = |b: &CandidateBank| -> Result<(f64, Vec<f64>)> {
        let err = model.error(&b.render(scene)?, &reference)?;
        let abs: Vec<f64> = err.values().iter().map(|v| v.abs()).collect();
        Ok((pairwise_sum(&abs), err.0.into_values()))
    };
    let (obj0, mut err) = l1(&bank)?;
    objective.push(obj0);
    if m < 2 {
        return Ok(VerticalResult {
            bank,
            objective,
            accepted_swaps,
        });
    }

    let response = Response::new(model, dims)?;
    let [w, h, _] = dims;
    let margin = 1e-12 * obj0.max(1.0);
    let mut order: Vec<usize> = (0..bank.chosen.len()).collect();
    let mut touched: Vec<(usize, f64)> = Vec::new();
    for sweep in 0..sweeps {
        let mut r = rng::stream(seed, sweep as u32, 0);
        order.shuffle(&mut r);
        let mut accepted = 0;
        for &cell in &order {
            let (x, y, t) = (cell % w, (cell / w) % h, cell / (w * h));
            touched.clear();
            response.for_each(x, y, t, |i, wgt| touched.push((i, wgt)));
            let current = values[cell * m + bank.chosen[cell]];
            let mut best = (0.0, bank.chosen[cell]);
            for k in 0..m {
                if k == bank.chosen[cell] {
                    continue;
                }
                let delta = values[cell * m + k] - current;
                let change: f64 = touched
                    .iter()
                    .map(|&(i, wgt)| (err[i] + delta * wgt).abs() - err[i].abs())
                    .sum();
                if change < best.0 - margin {
                    best = (change, k);
                }
            }
            if best.1 != bank.chosen[cell] {
                let delta = values[cell * m + best.1] - current;
                for &(i, wgt) in &touched {
                    err[i] += delta * wgt;
                }
                bank.chosen[cell] = best.1;
                accepted += 1;
            }
        }
        // Recompute from scratch so the log carries no incremental drift.
        let (obj, fresh) = l1(&bank)?;
        err = fresh;
        objective.push(obj);
        accepted_swaps.push(accepted);
    }
    Ok(VerticalResult {
        bank,
        objective,
        accepted_swaps,
    })
}
