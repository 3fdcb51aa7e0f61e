//! Flag definitions. Every flag is optional so that unset flags fall through to
//! the config file and then to the defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Dims3, KernelChoice, Policy, Support, Targets};

#[derive(Debug, Parser)]
#[command(name = "stbn", version, about = "Spatio-temporal perceptual sample-tile optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a sample tile and write it with its convergence log and sidecar.
    Optimize(OptimizeArgs),
    /// Render a scene with a tile and a white-noise baseline and report pRelMSE.
    Evaluate(EvaluateArgs),
    /// Write XY and XT error spectra and low-frequency band ratios.
    Spectrum(SpectrumArgs),
    /// Print the header and coordinate statistics of a tile file.
    Info {
        tile: PathBuf,
    },
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct KernelArgs {
    /// Spatial Gaussian standard deviation in pixels [2.1]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Spatial truncation as a fraction of the peak weight [0.2]
    #[arg(long)]
    pub spatial_truncation: Option<f64>,
    /// TAA blend factor [0.2]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// TAA taps; 0 truncates at 1e-3 of the peak [8]
    #[arg(long)]
    pub taa_len: Option<usize>,
    /// Display frame rate in Hz [60]
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// Sustained-channel time constant in ms [150]
    #[arg(long)]
    pub time_constant_ms: Option<f64>,
    /// Temporal perception support [causal]
    #[arg(long, value_enum)]
    pub percept_support: Option<Support>,
    /// Tabulated temporal perception kernel
    #[arg(long)]
    pub percept_table: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct OptimizeArgs {
    /// JSON file with flat keys named like the flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Tile dimensions XxYxT [128x128x30]
    #[arg(long)]
    pub tile: Option<Dims3>,
    /// Samples per pixel [1]
    #[arg(long)]
    pub spp: Option<usize>,
    /// Payload dimension [2]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Optimization kernel [percept+taa]
    #[arg(long, value_enum)]
    pub kernel: Option<KernelChoice>,
    #[command(flatten)]
    #[serde(flatten)]
    pub k: KernelArgs,
    /// Temporal Gaussian sigma in frames for `--kernel gaussian` [2.1]
    #[arg(long)]
    pub temporal_sigma: Option<f64>,
    /// Adam steps [10000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Batch elements per step [4000]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate [0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam beta1 [0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam beta2 [0.99]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon [1e-8]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Master seed [0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lipschitz constant scaling the logged objective [1]
    #[arg(long)]
    pub lipschitz: Option<f64>,
    /// 1D target construction [quantile]
    #[arg(long, value_enum)]
    pub targets: Option<Targets>,
    /// Rank-equalize marginals after the last step [true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub equalize: Option<bool>,
    /// Initial tile file instead of a seeded random tile
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output tile [tile.stbn]
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Convergence CSV [<out stem>.convergence.csv]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Sidecar JSON [<out stem>.meta.json]
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Worker threads; affects wall time only
    #[arg(long)]
    pub threads: Option<usize>,
    /// Suppress progress lines
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub quiet: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Tile file to evaluate
    #[arg(long)]
    pub tile: Option<PathBuf>,
    /// Scene: constant, ramp, blob or step [ramp]
    #[arg(long)]
    pub scene: Option<String>,
    /// Image width [64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Image height [64]
    #[arg(long)]
    pub height: Option<usize>,
    /// Rendered frames [32]
    #[arg(long)]
    pub frames: Option<usize>,
    /// 1-based frame for the summary line [16]
    #[arg(long)]
    pub frame: Option<usize>,
    /// Apply TAA to the raw renders [false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub taa: Option<bool>,
    /// Include the temporal perception kernel [true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub percept: Option<bool>,
    /// Boundary policy [causal-renormalized]
    #[arg(long, value_enum)]
    pub policy: Option<Policy>,
    #[command(flatten)]
    #[serde(flatten)]
    pub k: KernelArgs,
    /// Seed of the white-noise baseline tile [1]
    #[arg(long)]
    pub baseline_seed: Option<u64>,
    /// Metrics CSV [metrics.csv]
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Directory for PFM frames of the displayed renders and the reference
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SpectrumArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Tile file
    #[arg(long)]
    pub tile: Option<PathBuf>,
    /// Seeded random tile of these dimensions instead of a file
    #[arg(long)]
    pub white_noise: Option<Dims3>,
    /// Error sequence as PFM frames (repeat the flag per frame)
    #[arg(long)]
    pub error_pfm: Vec<PathBuf>,
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// 1-based frame of the XY slice [16]
    #[arg(long)]
    pub frame: Option<usize>,
    /// Image row of the XT slice [0]
    #[arg(long)]
    pub row: Option<usize>,
    /// Band radii as fractions of Nyquist [0.25,0.5]
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub radii: Vec<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub taa: Option<bool>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub taa_len: Option<usize>,
    /// Samples per pixel of the white-noise tile [1]
    #[arg(long)]
    pub spp: Option<usize>,
    /// Payload dimension of the white-noise tile [2]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Seed of the white-noise tile [1]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
}
