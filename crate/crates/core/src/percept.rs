//! Displayed-image formation, perceptual error, pRelMSE and DFT spectra.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    percept_pass, spatial_pass, temporal_pass, ApplicationPolicy, Edge, SpatialKernel, TaaKernel,
    TemporalPerceptKernel,
};
use crate::sequence::{pairwise_sum, ErrorSequence, FrameSequence};

/// Added to the squared reference in the pRelMSE denominator.
pub const PRELMSE_EPSILON: f64 = 0.01;

/// Rec. 709 luma weights used to reduce RGB to the scalar channel.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luma(rgb: [f64; 3]) -> f64 {
    rgb.iter().zip(LUMA_WEIGHTS).map(|(c, w)| c * w).sum()
}

/// Causal EMA over past frames; early frames renormalize over what exists.
pub fn apply_taa(raw: &FrameSequence, ka: &TaaKernel) -> FrameSequence {
    temporal_pass(raw, &ka.taps(), Edge::Renormalize)
}

/// `Kt * Ks * seq` with causal renormalized boundaries.
pub fn perceptual_filter(
    seq: &FrameSequence,
    ks: &SpatialKernel,
    kt: Option<&TemporalPerceptKernel>,
) -> FrameSequence {
    filter_with(seq, ks, kt, Edge::Renormalize)
}

fn filter_with(seq: &FrameSequence, ks: &SpatialKernel, kt: Option<&TemporalPerceptKernel>, edge: Edge) -> FrameSequence {
    let s = spatial_pass(seq, ks, edge);
    match kt {
        Some(kt) => percept_pass(&s, kt, edge),
        None => s,
    }
}

/// `Kt * Ks * (displayed - reference)`. Pass `displayed` already TAA-filtered
/// when TAA is part of the model.
pub fn error_sequence(
    displayed: &FrameSequence,
    reference: &FrameSequence,
    ks: &SpatialKernel,
    kt: Option<&TemporalPerceptKernel>,
) -> Result<ErrorSequence> {
    let diff = displayed.difference(reference)?;
    Ok(ErrorSequence(perceptual_filter(&diff, ks, kt)))
}

/// Mean over the pixels of frame `frame` (0-based) of `e^2 / (I^2 + 0.01)`,
/// where `I` is the perceptually filtered reference.
pub fn prelmse(err: &ErrorSequence, filtered_reference: &FrameSequence, frame: usize) -> Result<f64> {
    err.same_dims(filtered_reference)?;
    if frame >= err.frames() {
        return Err(Error::InvalidInput(format!(
            "frame index {frame} outside 0..{}",
            err.frames()
        )));
    }
    let terms: Vec<f64> = err
        .frame(frame)
        .iter()
        .zip(filtered_reference.frame(frame))
        .map(|(e, i)| e * e / (i * i + PRELMSE_EPSILON))
        .collect();
    Ok(pairwise_sum(&terms) / terms.len() as f64)
}

/// The full evaluation model: optional TAA on raw renders, then spatial and
/// temporal perception filtering of the displayed-minus-reference difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualModel {
    pub spatial: SpatialKernel,
    pub temporal: Option<TemporalPerceptKernel>,
    pub taa: Option<TaaKernel>,
    pub policy: ApplicationPolicy,
}

impl PerceptualModel {
    pub fn new(spatial: SpatialKernel, temporal: Option<TemporalPerceptKernel>, taa: Option<TaaKernel>) -> Self {
        Self {
            spatial,
            temporal,
            taa,
            policy: ApplicationPolicy::CausalRenormalized,
        }
    }

    fn edge(&self) -> Edge {
        match self.policy {
            ApplicationPolicy::Toroidal => Edge::Wrap,
            ApplicationPolicy::CausalRenormalized => Edge::Renormalize,
            ApplicationPolicy::CausalZeroPad => Edge::Truncate,
        }
    }

    /// Raw renders as shown on screen.
    pub fn displayed(&self, raw: &FrameSequence) -> FrameSequence {
        match &self.taa {
            Some(ka) => temporal_pass(raw, &ka.taps(), self.edge()),
            None => raw.clone(),
        }
    }

    /// Perceptual filtering (no TAA).
    pub fn filter(&self, seq: &FrameSequence) -> FrameSequence {
        filter_with(seq, &self.spatial, self.temporal.as_ref(), self.edge())
    }

    pub fn error(&self, raw: &FrameSequence, reference: &FrameSequence) -> Result<ErrorSequence> {
        let diff = self.displayed(raw).difference(reference)?;
        Ok(ErrorSequence(self.filter(&diff)))
    }

    /// pRelMSE of every frame.
    pub fn prelmse_per_frame(&self, raw: &FrameSequence, reference: &FrameSequence) -> Result<Vec<f64>> {
        let err = self.error(raw, reference)?;
        let fref = self.filter(reference);
        (0..err.frames()).map(|t| prelmse(&err, &fref, t)).collect()
    }

    pub fn prelmse_at(&self, raw: &FrameSequence, reference: &FrameSequence, frame: usize) -> Result<f64> {
        let err = self.error(raw, reference)?;
        prelmse(&err, &self.filter(reference), frame)
    }
}

/// DC-centered power spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumImage {
    pub width: usize,
    pub height: usize,
    /// Row-major; the DC bin sits at `(width / 2, height / 2)` and is zero.
    pub values: Vec<f64>,
}

impl SpectrumImage {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        pairwise_sum(&self.values)
    }

    /// Normalized radial frequency of a bin: 1 at the Nyquist rate of either axis.
    pub fn radial_frequency(&self, x: usize, y: usize) -> f64 {
        let fx = (x as f64 - (self.width / 2) as f64) / self.width as f64;
        let fy = (y as f64 - (self.height / 2) as f64) / self.height as f64;
        (fx * fx + fy * fy).sqrt() / 0.5
    }

    /// Element-wise mean of equally sized spectra.
    pub fn mean(spectra: &[SpectrumImage]) -> Result<SpectrumImage> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::InvalidInput("no spectra to average".into()))?;
        let mut values = vec![0.0; first.values.len()];
        for s in spectra {
            if s.width != first.width || s.height != first.height {
                return Err(Error::InvalidInput("spectra differ in size".into()));
            }
            values.iter_mut().zip(&s.values).for_each(|(a, b)| *a += b);
        }
        let n = spectra.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        Ok(SpectrumImage {
            width: first.width,
            height: first.height,
            values,
        })
    }

    /// Mean power in `bins` equal-width rings of radial frequency over `[0, 1]`.
    /// Rings with no bins report zero.
    pub fn radial_profile(&self, bins: usize) -> Vec<f64> {
        let mut sum = vec![0.0; bins];
        let mut count = vec![0usize; bins];
        for y in 0..self.height {
            for x in 0..self.width {
                if x == self.width / 2 && y == self.height / 2 {
                    continue;
                }
                let r = self.radial_frequency(x, y);
                if r > 1.0 {
                    continue;
                }
                let b = ((r * bins as f64) as usize).min(bins - 1);
                sum[b] += self.get(x, y);
                count[b] += 1;
            }
        }
        sum.iter()
            .zip(count)
            .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

/// `|DFT|^2 / N` of a mean-removed `width x height` slice, DC centered and zeroed.
/// With the `1/N` scaling the spectrum sums to the slice's energy.
pub fn dft_power(slice: &[f64], width: usize, height: usize) -> Result<SpectrumImage> {
    if width == 0 || height == 0 || slice.len() != width * height {
        return Err(Error::InvalidInput(format!(
            "slice of {} values is not a non-empty {width}x{height} image",
            slice.len()
        )));
    }
    let mean = pairwise_sum(slice) / slice.len() as f64;
    let mut data: Vec<Complex<f64>> = slice.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();

    let mut planner = FftPlanner::new();
    let row_fft: Arc<dyn Fft<f64>> = planner.plan_fft_forward(width);
    let col_fft: Arc<dyn Fft<f64>> = planner.plan_fft_forward(height);
    for row in data.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }

    let n = (width * height) as f64;
    let mut values = vec![0.0; width * height];
    for ky in 0..height {
        let sy = (ky + height / 2) % height;
        for kx in 0..width {
            let sx = (kx + width / 2) % width;
            values[sy * width + sx] = data[ky * width + kx].norm_sqr() / n;
        }
    }
    values[(height / 2) * width + width / 2] = 0.0;
    Ok(SpectrumImage {
        width,
        height,
        values,
    })
}

/// Share of the (DC-free) energy inside the centered disk of radius
/// `radius_fraction` times Nyquist. A fraction of 1 covers the whole
/// spectrum, corners included. An all-zero spectrum yields 0.
pub fn lowfreq_energy_ratio(spec: &SpectrumImage, radius_fraction: f64) -> Result<f64> {
    if !(radius_fraction > 0.0 && radius_fraction <= 1.0) {
        return Err(Error::param(
            "radius_fraction",
            format!("must lie in (0, 1], got {radius_fraction}"),
        ));
    }
    let total = spec.total();
    if total == 0.0 {
        return Ok(0.0);
    }
    if radius_fraction >= 1.0 {
        return Ok(1.0);
    }
    let mut inside = Vec::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            if spec.radial_frequency(x, y) <= radius_fraction {
                inside.push(spec.get(x, y));
            }
        }
    }
    Ok(pairwise_sum(&inside) / total)
}

/// Fraction of non-DC bins inside the band; the white-noise expectation.
pub fn band_area_fraction(width: usize, height: usize, radius_fraction: f64) -> f64 {
    let probe = SpectrumImage {
        width,
        height,
        values: vec![0.0; width * height],
    };
    let mut inside = 0usize;
    for y in 0..height {
        for x in 0..width {
            if (x, y) != (width / 2, height / 2) && probe.radial_frequency(x, y) <= radius_fraction {
                inside += 1;
            }
        }
    }
    if radius_fraction >= 1.0 {
        return 1.0;
    }
    inside as f64 / (width * height - 1) as f64
}
