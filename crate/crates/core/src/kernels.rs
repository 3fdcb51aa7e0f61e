//! Spatial, temporal-perceptual and TAA kernels, their composition into one
//! spatio-temporal kernel, and sequence convolution under toroidal or causal
//! boundary handling.
//!
//! Offsets follow the correlation convention used throughout the crate:
//! `out[x, y, t] = sum w(dx, dy, dt) * in[x + dx, y + dy, t + dt]`.
//! A causal temporal kernel therefore has only non-positive `dt`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::FrameSequence;

/// Fraction of the peak below which the spatial Gaussian is cut off.
/// At sigma 2.1 this yields a 7x7 kernel.
pub const DEFAULT_SPATIAL_TRUNCATION: f64 = 0.2;

/// Relative raw weight below which the EMA is truncated when no length is given.
pub const DEFAULT_TAA_TRUNCATION: f64 = 1e-3;

/// Sustained-channel time constant of the built-in temporal kernel.
pub const DEFAULT_TIME_CONSTANT_MS: f64 = 150.0;

/// Duration covered by the built-in temporal kernel (8 taps at 60 Hz).
pub const PERCEPT_SUPPORT_SECONDS: f64 = 8.0 / 60.0;

const SUSTAINED_SUM_TOL: f64 = 1e-6;
const TRANSIENT_SUM_TOL: f64 = 1e-6;

/// Isotropic spatial point-spread kernel on a `(2r+1) x (2r+1)` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernel {
    radius: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl SpatialKernel {
    /// Normalized Gaussian truncated at the smallest radius `r` for which the
    /// un-normalized value at offset `r + 1` drops below `truncation * peak`.
    pub fn gaussian(sigma: f64, truncation: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
        }
        if !(truncation > 0.0 && truncation < 1.0) {
            return Err(Error::param(
                "truncation_threshold",
                format!("must lie in (0, 1), got {truncation}"),
            ));
        }
        let g = |d: f64| (-(d * d) / (2.0 * sigma * sigma)).exp();
        let mut radius = 0usize;
        while g((radius + 1) as f64) >= truncation {
            radius += 1;
        }
        let w = 2 * radius + 1;
        let r = radius as isize;
        let mut weights = Vec::with_capacity(w * w);
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push(g(dx as f64) * g(dy as f64));
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        Ok(Self {
            radius,
            sigma,
            weights,
        })
    }

    /// Identity kernel (a single unit tap).
    pub fn delta() -> Self {
        Self {
            radius: 0,
            sigma: 0.0,
            weights: vec![1.0],
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Row-major weights, `dy` slowest.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(dx, dy)`; zero outside the support.
    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.weights[((dy + r) as usize) * self.width() + (dx + r) as usize]
    }

    pub fn dc_gain(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Shape of a temporal support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalSupport {
    /// Only the current and past frames.
    Causal,
    /// Mirrored around the current frame.
    Symmetric,
}

/// A list of `(frame offset, weight)` taps, sorted by offset.
pub type Taps = Vec<(i32, f64)>;

/// Temporal perception kernel: a low-pass sustained channel plus a zero-DC
/// transient channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalPerceptKernel {
    frame_rate: f64,
    support: TemporalSupport,
    sustained: Taps,
    transient: Taps,
}

/// Where the temporal perception kernel comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum PerceptSource {
    /// Parametric default: exponential sustained channel, differenced transient channel.
    Builtin {
        time_constant_ms: f64,
        support: TemporalSupport,
    },
    /// Explicit `(offset, weight)` tables.
    TableFile(std::path::PathBuf),
}

impl Default for PerceptSource {
    fn default() -> Self {
        PerceptSource::Builtin {
            time_constant_ms: DEFAULT_TIME_CONSTANT_MS,
            support: TemporalSupport::Causal,
        }
    }
}

impl TemporalPerceptKernel {
    pub fn new(frame_rate: f64, source: &PerceptSource) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::param(
                "frame_rate",
                format!("must be positive, got {frame_rate}"),
            ));
        }
        match source {
            PerceptSource::Builtin {
                time_constant_ms,
                support,
            } => Self::builtin(frame_rate, *time_constant_ms, *support),
            PerceptSource::TableFile(path) => Self::from_table_file(path, frame_rate),
        }
    }

    fn builtin(frame_rate: f64, time_constant_ms: f64, support: TemporalSupport) -> Result<Self> {
        if !(time_constant_ms > 0.0 && time_constant_ms.is_finite()) {
            return Err(Error::param(
                "time_constant_ms",
                format!("must be positive, got {time_constant_ms}"),
            ));
        }
        let taps = ((PERCEPT_SUPPORT_SECONDS * frame_rate).round() as usize).max(1);
        let frame_ms = 1000.0 / frame_rate;
        let raw: Vec<f64> = (0..taps)
            .map(|j| (-(j as f64) * frame_ms / time_constant_ms).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let sustained: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut diff: Vec<f64> = (0..taps)
            .map(|j| sustained[j] - if j > 0 { sustained[j - 1] } else { 0.0 })
            .collect();
        remove_mean(&mut diff);

        let (sustained, transient) = match support {
            TemporalSupport::Causal => (
                sustained.iter().enumerate().map(|(j, &w)| (-(j as i32), w)).collect(),
                diff.iter().enumerate().map(|(j, &w)| (-(j as i32), w)).collect(),
            ),
            TemporalSupport::Symmetric => {
                let mut s = mirror(&sustained);
                let total: f64 = s.iter().map(|t| t.1).sum();
                s.iter_mut().for_each(|t| t.1 /= total);
                let mut d = mirror(&diff);
                let mean = d.iter().map(|t| t.1).sum::<f64>() / d.len() as f64;
                d.iter_mut().for_each(|t| t.1 -= mean);
                (s, d)
            }
        };
        Ok(Self {
            frame_rate,
            support,
            sustained,
            transient,
        })
    }

    /// Purely sustained symmetric Gaussian low-pass over frames. Used as the
    /// "Gaussian" temporal shape in kernel-shape ablations.
    pub fn symmetric_gaussian(frame_rate: f64, sigma_frames: f64, truncation: f64) -> Result<Self> {
        let g = SpatialKernel::gaussian(sigma_frames, truncation)?;
        let r = g.radius as i32;
        let raw: Vec<f64> = (-r..=r)
            .map(|o| (-(o as f64).powi(2) / (2.0 * sigma_frames * sigma_frames)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let sustained = (-r..=r).zip(raw).map(|(o, w)| (o, w / total)).collect();
        Ok(Self {
            frame_rate,
            support: TemporalSupport::Symmetric,
            sustained,
            transient: Vec::new(),
        })
    }

    pub fn from_table_file(path: &Path, frame_rate: f64) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_table_str(&text, frame_rate)
    }

    /// Parses the plain-text table format:
    ///
    /// ```text
    /// # comment
    /// channel sustained frame_rate 60
    /// 0 0.25
    /// -1 0.25
    /// channel transient frame_rate 60
    /// 0 0.5
    /// -1 -0.5
    /// ```
    ///
    /// The transient section may be omitted (zero channel).
    pub fn from_table_str(text: &str, frame_rate: f64) -> Result<Self> {
        #[derive(Clone, Copy, PartialEq)]
        enum Channel {
            Sustained,
            Transient,
        }
        let mut current: Option<Channel> = None;
        let mut sustained: Taps = Vec::new();
        let mut transient: Taps = Vec::new();
        let mut seen_sustained = false;
        let mut problems = Vec::new();

        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts[0] == "channel" {
                if parts.len() != 4 || parts[2] != "frame_rate" {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "expected `channel sustained|transient frame_rate <Hz>`".into(),
                    });
                }
                current = Some(match parts[1] {
                    "sustained" => {
                        seen_sustained = true;
                        Channel::Sustained
                    }
                    "transient" => Channel::Transient,
                    other => {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("unknown channel `{other}`"),
                        })
                    }
                });
                let rate: f64 = parts[3].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad frame rate `{}`", parts[3]),
                })?;
                if (rate - frame_rate).abs() > 1e-9 * frame_rate.max(1.0) {
                    problems.push(format!(
                        "table sampled at {rate} Hz but {frame_rate} Hz was requested"
                    ));
                }
                continue;
            }
            let Some(channel) = current else {
                return Err(Error::Parse {
                    line: line_no,
                    message: "tap before any `channel` header".into(),
                });
            };
            if parts.len() != 2 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected `offset weight`".into(),
                });
            }
            let offset: i32 = parts[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad offset `{}`", parts[0]),
            })?;
            let weight: f64 = parts[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad weight `{}`", parts[1]),
            })?;
            if !weight.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "weight is not finite".into(),
                });
            }
            match channel {
                Channel::Sustained => sustained.push((offset, weight)),
                Channel::Transient => transient.push((offset, weight)),
            }
        }
        if !seen_sustained || sustained.is_empty() {
            problems.push("sustained channel is missing or empty".into());
        }
        sustained.sort_by_key(|t| t.0);
        transient.sort_by_key(|t| t.0);
        let support = validate_channels(&sustained, &transient, &mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            frame_rate,
            support,
            sustained,
            transient,
        })
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn support(&self) -> TemporalSupport {
        self.support
    }

    pub fn sustained(&self) -> &[(i32, f64)] {
        &self.sustained
    }

    pub fn transient(&self) -> &[(i32, f64)] {
        &self.transient
    }

    /// Sustained plus transient, summed per offset.
    pub fn combined(&self) -> Taps {
        let mut out: Taps = Vec::new();
        for &(o, w) in self.sustained.iter().chain(&self.transient) {
            match out.iter_mut().find(|t| t.0 == o) {
                Some(t) => t.1 += w,
                None => out.push((o, w)),
            }
        }
        out.sort_by_key(|t| t.0);
        out
    }

    pub fn support_len(&self) -> usize {
        let c = self.combined();
        (c.last().unwrap().0 - c[0].0 + 1) as usize
    }

    pub fn dc_gain(&self) -> f64 {
        self.sustained.iter().chain(&self.transient).map(|t| t.1).sum()
    }
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn mirror(causal: &[f64]) -> Taps {
    let n = causal.len() as i32;
    (-(n - 1)..n).map(|o| (o, causal[o.unsigned_abs() as usize])).collect()
}

fn validate_channels(sustained: &Taps, transient: &Taps, problems: &mut Vec<String>) -> TemporalSupport {
    for (name, taps) in [("sustained", sustained), ("transient", transient)] {
        if taps.windows(2).any(|w| w[0].0 == w[1].0) {
            problems.push(format!("{name} channel repeats an offset"));
        }
    }
    if sustained.iter().any(|t| t.1 < 0.0) {
        problems.push("sustained weights must be non-negative".into());
    }
    let s: f64 = sustained.iter().map(|t| t.1).sum();
    if !sustained.is_empty() && (s - 1.0).abs() > SUSTAINED_SUM_TOL {
        problems.push(format!("sustained weights sum to {s}, expected 1"));
    }
    let tr: f64 = transient.iter().map(|t| t.1).sum();
    if tr.abs() > TRANSIENT_SUM_TOL {
        problems.push(format!("transient weights sum to {tr}, expected 0"));
    }
    let all = sustained.iter().chain(transient);
    if all.clone().all(|t| t.0 <= 0) {
        return TemporalSupport::Causal;
    }
    let lo = all.clone().map(|t| t.0).min().unwrap_or(0);
    let hi = all.map(|t| t.0).max().unwrap_or(0);
    if lo != -hi {
        problems.push(format!(
            "offsets span [{lo}, {hi}], which is neither causal nor symmetric"
        ));
    }
    TemporalSupport::Symmetric
}

/// Exponential-moving-average TAA kernel over past frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaaKernel {
    alpha: f64,
    weights: Vec<f64>,
}

impl TaaKernel {
    /// Weights `alpha * (1 - alpha)^j` for `j < length`, renormalized. Without an
    /// explicit length the kernel stops at the first `j` whose raw weight falls
    /// below `DEFAULT_TAA_TRUNCATION * alpha`.
    pub fn new(alpha: f64, length: Option<usize>) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        let length = match length {
            Some(0) => return Err(Error::param("length", "must be at least 1")),
            Some(n) => n,
            None => {
                let mut j = 0usize;
                while (1.0 - alpha).powi(j as i32) >= DEFAULT_TAA_TRUNCATION {
                    j += 1;
                }
                j.max(1)
            }
        };
        let raw: Vec<f64> = Self::raw_weights(alpha, length);
        let total: f64 = raw.iter().sum();
        Ok(Self {
            alpha,
            weights: raw.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Un-normalized EMA weights `alpha * (1 - alpha)^j`.
    pub fn raw_weights(alpha: f64, length: usize) -> Vec<f64> {
        (0..length)
            .map(|j| alpha * (1.0 - alpha).powi(j as i32))
            .collect()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight `j` applies to the frame `j` steps in the past.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn taps(&self) -> Taps {
        self.weights
            .iter()
            .enumerate()
            .map(|(j, &w)| (-(j as i32), w))
            .collect()
    }
}

/// Boundary handling when applying a kernel to a finite sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplicationPolicy {
    /// Wrap all three axes.
    Toroidal,
    /// Drop taps outside the sequence and renormalize the normalized factors
    /// (spatial, sustained, TAA) over what remains. Transient taps are dropped
    /// without renormalization.
    CausalRenormalized,
    /// Drop taps outside the sequence without renormalizing anything.
    CausalZeroPad,
}

/// Dense `g = Ks * Kt * Ka`, together with the factors it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalKernel {
    spatial: SpatialKernel,
    percept: Option<TemporalPerceptKernel>,
    taa: Option<TaaKernel>,
    policy: ApplicationPolicy,
    t_min: i32,
    temporal: Vec<f64>,
    weights: Vec<f64>,
    max_weight: f64,
    dc_gain: f64,
}

impl SpatioTemporalKernel {
    /// Full discrete convolution of the factors; absent temporal factors act as
    /// identity.
    pub fn compose(
        spatial: &SpatialKernel,
        percept: Option<&TemporalPerceptKernel>,
        taa: Option<&TaaKernel>,
        policy: ApplicationPolicy,
    ) -> Self {
        let identity: Taps = vec![(0, 1.0)];
        let kt = percept.map(|k| k.combined()).unwrap_or_else(|| identity.clone());
        let ka = taa.map(|k| k.taps()).unwrap_or(identity);
        let (t_min, temporal) = convolve_taps(&kt, &ka);

        let sw = spatial.weights();
        let mut weights = Vec::with_capacity(temporal.len() * sw.len());
        for &wt in &temporal {
            weights.extend(sw.iter().map(|&ws| ws * wt));
        }
        let max_weight = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let dc_gain = spatial.dc_gain()
            * percept.map_or(1.0, |k| k.dc_gain())
            * taa.map_or(1.0, |k| k.weights().iter().sum());
        Self {
            spatial: spatial.clone(),
            percept: percept.cloned(),
            taa: taa.cloned(),
            policy,
            t_min,
            temporal,
            weights,
            max_weight,
            dc_gain,
        }
    }

    pub fn spatial(&self) -> &SpatialKernel {
        &self.spatial
    }

    pub fn percept(&self) -> Option<&TemporalPerceptKernel> {
        self.percept.as_ref()
    }

    pub fn taa(&self) -> Option<&TaaKernel> {
        self.taa.as_ref()
    }

    pub fn policy(&self) -> ApplicationPolicy {
        self.policy
    }

    pub fn with_policy(mut self, policy: ApplicationPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// `(kx, ky, kt)`.
    pub fn extent(&self) -> [usize; 3] {
        let w = self.spatial.width();
        [w, w, self.temporal.len()]
    }

    /// Smallest temporal offset (most negative for causal kernels).
    pub fn t_min(&self) -> i32 {
        self.t_min
    }

    pub fn t_max(&self) -> i32 {
        self.t_min + self.temporal.len() as i32 - 1
    }

    /// Composed temporal taps, starting at offset `t_min`.
    pub fn temporal(&self) -> &[f64] {
        &self.temporal
    }

    /// Dense weights, `dt` slowest then `dy`, `dx` fastest.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest absolute weight.
    pub fn max_weight(&self) -> f64 {
        self.max_weight
    }

    /// Analytic DC gain: product of the factors' weight sums.
    pub fn dc_gain(&self) -> f64 {
        self.dc_gain
    }

    pub fn weight(&self, dx: isize, dy: isize, dt: i32) -> f64 {
        let r = self.spatial.radius() as isize;
        if dx.abs() > r || dy.abs() > r || dt < self.t_min || dt > self.t_max() {
            return 0.0;
        }
        let w = self.spatial.width();
        let ti = (dt - self.t_min) as usize;
        self.weights[(ti * w + (dy + r) as usize) * w + (dx + r) as usize]
    }

    /// All taps with non-zero weight as `(dx, dy, dt, weight)`.
    pub fn taps(&self) -> Vec<(isize, isize, i32, f64)> {
        let r = self.spatial.radius() as isize;
        let w = self.spatial.width();
        let mut out = Vec::new();
        for (ti, chunk) in self.weights.chunks(w * w).enumerate() {
            let dt = self.t_min + ti as i32;
            for (i, &v) in chunk.iter().enumerate() {
                if v != 0.0 {
                    out.push(((i % w) as isize - r, (i / w) as isize - r, dt, v));
                }
            }
        }
        out
    }

    /// Squared-weight sum; the variance gain for white input under toroidal application.
    pub fn energy(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// Full 1D convolution of two tap lists under the offset convention.
/// Returns `(first offset, dense weights)`.
pub fn convolve_taps(a: &[(i32, f64)], b: &[(i32, f64)]) -> (i32, Vec<f64>) {
    let lo = a.iter().map(|t| t.0).min().unwrap_or(0) + b.iter().map(|t| t.0).min().unwrap_or(0);
    let hi = a.iter().map(|t| t.0).max().unwrap_or(0) + b.iter().map(|t| t.0).max().unwrap_or(0);
    let mut out = vec![0.0; (hi - lo + 1) as usize];
    for &(oa, wa) in a {
        for &(ob, wb) in b {
            out[(oa + ob - lo) as usize] += wa * wb;
        }
    }
    (lo, out)
}

#[inline]
pub(crate) fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// What to do with taps that fall outside a finite axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Wrap,
    /// Drop and renormalize the remaining taps to the full kernel sum.
    Renormalize,
    /// Drop.
    Truncate,
}

/// Applies temporal taps along the frame axis.
pub fn temporal_pass(seq: &FrameSequence, taps: &[(i32, f64)], edge: Edge) -> FrameSequence {
    let [w, h, frames] = seq.dims();
    let plane = w * h;
    let full: f64 = taps.iter().map(|t| t.1).sum();
    let mut out = vec![0.0; seq.values().len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(t, dst)| {
        let mut used = 0.0;
        for &(o, wt) in taps {
            let src = t as isize + o as isize;
            let src = match edge {
                Edge::Wrap => wrap(src, frames),
                _ if src < 0 || src >= frames as isize => continue,
                _ => src as usize,
            };
            used += wt;
            for (d, s) in dst.iter_mut().zip(seq.frame(src)) {
                *d += wt * s;
            }
        }
        if edge == Edge::Renormalize && used != 0.0 && used != full {
            let scale = full / used;
            dst.iter_mut().for_each(|d| *d *= scale);
        }
    });
    FrameSequence::from_values(seq.dims(), out).expect("dims preserved")
}

/// Applies a spatial kernel to every frame.
pub fn spatial_pass(seq: &FrameSequence, kernel: &SpatialKernel, edge: Edge) -> FrameSequence {
    let [w, h, _] = seq.dims();
    let r = kernel.radius() as isize;
    let full = kernel.dc_gain();
    let mut out = vec![0.0; seq.values().len()];
    out.par_chunks_mut(w * h).enumerate().for_each(|(t, dst)| {
        let src = seq.frame(t);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut used = 0.0;
                for dy in -r..=r {
                    let sy = y as isize + dy;
                    let sy = match edge {
                        Edge::Wrap => wrap(sy, h),
                        _ if sy < 0 || sy >= h as isize => continue,
                        _ => sy as usize,
                    };
                    for dx in -r..=r {
                        let sx = x as isize + dx;
                        let sx = match edge {
                            Edge::Wrap => wrap(sx, w),
                            _ if sx < 0 || sx >= w as isize => continue,
                            _ => sx as usize,
                        };
                        let k = kernel.weight(dx, dy);
                        used += k;
                        acc += k * src[sy * w + sx];
                    }
                }
                if edge == Edge::Renormalize && used != 0.0 {
                    acc *= full / used;
                }
                dst[y * w + x] = acc;
            }
        }
    });
    FrameSequence::from_values(seq.dims(), out).expect("dims preserved")
}

/// Convolves a sequence with `kernel` under the kernel's application policy.
///
/// Toroidal application uses the dense composed weights. The causal policies
/// apply the factors one after another: spatial, then TAA, then the temporal
/// perception kernel (sustained and transient channels separately).
pub fn convolve_sequence(seq: &FrameSequence, kernel: &SpatioTemporalKernel) -> Result<FrameSequence> {
    if seq.values().is_empty() {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    match kernel.policy() {
        ApplicationPolicy::Toroidal => Ok(toroidal(seq, kernel)),
        policy => {
            let edge = if policy == ApplicationPolicy::CausalRenormalized {
                Edge::Renormalize
            } else {
                Edge::Truncate
            };
            let mut cur = spatial_pass(seq, kernel.spatial(), edge);
            if let Some(taa) = kernel.taa() {
                cur = temporal_pass(&cur, &taa.taps(), edge);
            }
            if let Some(kt) = kernel.percept() {
                cur = percept_pass(&cur, kt, edge);
            }
            Ok(cur)
        }
    }
}

/// Applies a temporal perception kernel; the transient channel is never renormalized.
pub fn percept_pass(seq: &FrameSequence, kt: &TemporalPerceptKernel, edge: Edge) -> FrameSequence {
    let transient_edge = if edge == Edge::Wrap { Edge::Wrap } else { Edge::Truncate };
    let mut out = temporal_pass(seq, kt.sustained(), edge);
    if !kt.transient().is_empty() {
        let tr = temporal_pass(seq, kt.transient(), transient_edge);
        out.values_mut()
            .iter_mut()
            .zip(tr.values())
            .for_each(|(a, b)| *a += b);
    }
    out
}

fn toroidal(seq: &FrameSequence, kernel: &SpatioTemporalKernel) -> FrameSequence {
    let [w, h, frames] = seq.dims();
    let taps = kernel.taps();
    let mut out = vec![0.0; seq.values().len()];
    out.par_chunks_mut(w * h).enumerate().for_each(|(t, dst)| {
        for &(dx, dy, dt, k) in &taps {
            let src = seq.frame(wrap(t as isize + dt as isize, frames));
            for y in 0..h {
                let sy = wrap(y as isize + dy, h);
                let row = &src[sy * w..(sy + 1) * w];
                let drow = &mut dst[y * w..(y + 1) * w];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d += k * row[wrap(x as isize + dx, w)];
                }
            }
        }
    });
    FrameSequence::from_values(seq.dims(), out).expect("dims preserved")
}
