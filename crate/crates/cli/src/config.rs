//! Run configuration: defaults, then an optional flat JSON file, then flags.
//!
//! JSON keys are the long flag names (`"taa-len": 8`); underscores are accepted
//! in place of hyphens.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use stbn::kernels::{
    ApplicationPolicy, PerceptSource, SpatialKernel, SpatioTemporalKernel, TaaKernel, TemporalPerceptKernel,
    TemporalSupport, DEFAULT_SPATIAL_TRUNCATION,
};
use stbn::percept::PerceptualModel;
use stbn::swgd::{OptimizerConfig, TargetMode};

use crate::error::{CliError, CliResult};

/// `XxYxT` tile or image dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims3(pub [usize; 3]);

impl FromStr for Dims3 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(format!("expected XxYxT, got `{s}`"));
        }
        let mut d = [0; 3];
        for (slot, p) in d.iter_mut().zip(parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| format!("`{p}` in `{s}` is not a positive integer"))?;
            if *slot == 0 {
                return Err(format!("dimensions in `{s}` must be positive"));
            }
        }
        Ok(Dims3(d))
    }
}

impl fmt::Display for Dims3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

impl Serialize for Dims3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Dims3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which kernel the optimizer targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
pub enum KernelChoice {
    /// Spatial Gaussian times a symmetric temporal Gaussian.
    #[serde(rename = "gaussian")]
    Gaussian,
    /// Spatial Gaussian times the TAA EMA.
    #[serde(rename = "taa")]
    Taa,
    /// Spatial Gaussian, temporal perception and TAA.
    #[serde(rename = "percept+taa")]
    #[value(name = "percept+taa")]
    PerceptTaa,
    /// Spatial Gaussian and temporal perception.
    #[serde(rename = "percept")]
    Percept,
    /// Spatial Gaussian only; frames are optimized independently.
    #[serde(rename = "spatial")]
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    Causal,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Toroidal,
    CausalRenormalized,
    CausalZeroPad,
}

impl From<Policy> for ApplicationPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Toroidal => ApplicationPolicy::Toroidal,
            Policy::CausalRenormalized => ApplicationPolicy::CausalRenormalized,
            Policy::CausalZeroPad => ApplicationPolicy::CausalZeroPad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    Quantile,
    Random,
}

impl From<Targets> for TargetMode {
    fn from(t: Targets) -> Self {
        match t {
            Targets::Quantile => TargetMode::Quantile,
            Targets::Random => TargetMode::Random,
        }
    }
}

/// Kernel parameters shared by all subcommands.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub sigma: f64,
    pub spatial_truncation: f64,
    pub alpha: f64,
    /// 0 truncates the EMA at a negligible weight instead.
    pub taa_len: usize,
    pub frame_rate: f64,
    pub time_constant_ms: f64,
    pub percept_support: Support,
    pub percept_table: Option<PathBuf>,
}

impl KernelParams {
    pub fn spatial(&self) -> CliResult<SpatialKernel> {
        Ok(SpatialKernel::gaussian(self.sigma, self.spatial_truncation)?)
    }

    pub fn taa(&self) -> CliResult<TaaKernel> {
        let len = (self.taa_len > 0).then_some(self.taa_len);
        Ok(TaaKernel::new(self.alpha, len)?)
    }

    pub fn percept(&self) -> CliResult<TemporalPerceptKernel> {
        let source = match &self.percept_table {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::io(p, "percept table not found"));
                }
                PerceptSource::TableFile(p.clone())
            }
            None => PerceptSource::Builtin {
                time_constant_ms: self.time_constant_ms,
                support: match self.percept_support {
                    Support::Causal => TemporalSupport::Causal,
                    Support::Symmetric => TemporalSupport::Symmetric,
                },
            },
        };
        Ok(TemporalPerceptKernel::new(self.frame_rate, &source)?)
    }
}

fn d_tile() -> Dims3 {
    Dims3([128, 128, 30])
}
fn d_one() -> usize {
    1
}
fn d_two() -> usize {
    2
}
fn d_sigma() -> f64 {
    2.1
}
fn d_trunc() -> f64 {
    DEFAULT_SPATIAL_TRUNCATION
}
fn d_alpha() -> f64 {
    0.2
}
fn d_taa_len() -> usize {
    8
}
fn d_rate() -> f64 {
    60.0
}
fn d_tau() -> f64 {
    150.0
}
fn d_support() -> Support {
    Support::Causal
}
fn d_true() -> bool {
    true
}

/// Effective settings of `optimize`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct OptimizeConfig {
    #[serde(default = "d_tile")]
    pub tile: Dims3,
    #[serde(default = "d_one")]
    pub spp: usize,
    #[serde(default = "d_two")]
    pub dim: usize,
    #[serde(default = "d_kernel")]
    pub kernel: KernelChoice,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_trunc")]
    pub spatial_truncation: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_taa_len")]
    pub taa_len: usize,
    #[serde(default = "d_rate")]
    pub frame_rate: f64,
    #[serde(default = "d_tau")]
    pub time_constant_ms: f64,
    #[serde(default = "d_support")]
    pub percept_support: Support,
    #[serde(default)]
    pub percept_table: Option<PathBuf>,
    /// Frames; width of the temporal Gaussian in the `gaussian` kernel.
    #[serde(default = "d_sigma")]
    pub temporal_sigma: f64,
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_lipschitz")]
    pub lipschitz: f64,
    #[serde(default = "d_targets")]
    pub targets: Targets,
    #[serde(default = "d_true")]
    pub equalize: bool,
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub meta: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub quiet: bool,
}

fn d_kernel() -> KernelChoice {
    KernelChoice::PerceptTaa
}
fn d_iters() -> usize {
    10_000
}
fn d_batch() -> usize {
    4_000
}
fn d_lr() -> f64 {
    1e-2
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.99
}
fn d_eps() -> f64 {
    1e-8
}
fn d_lipschitz() -> f64 {
    1.0
}
fn d_targets() -> Targets {
    Targets::Quantile
}
fn d_out() -> PathBuf {
    PathBuf::from("tile.stbn")
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("defaults deserialize")
    }
}

impl OptimizeConfig {
    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            sigma: self.sigma,
            spatial_truncation: self.spatial_truncation,
            alpha: self.alpha,
            taa_len: self.taa_len,
            frame_rate: self.frame_rate,
            time_constant_ms: self.time_constant_ms,
            percept_support: self.percept_support,
            percept_table: self.percept_table.clone(),
        }
    }

    /// The optimization target, always wrapped toroidally.
    pub fn build_kernel(&self) -> CliResult<SpatioTemporalKernel> {
        let p = self.kernel_params();
        let ks = p.spatial()?;
        let policy = ApplicationPolicy::Toroidal;
        Ok(match self.kernel {
            KernelChoice::Gaussian => {
                let kg = TemporalPerceptKernel::symmetric_gaussian(self.frame_rate, self.temporal_sigma, 1e-3)?;
                SpatioTemporalKernel::compose(&ks, Some(&kg), None, policy)
            }
            KernelChoice::Taa => SpatioTemporalKernel::compose(&ks, None, Some(&p.taa()?), policy),
            KernelChoice::PerceptTaa => {
                SpatioTemporalKernel::compose(&ks, Some(&p.percept()?), Some(&p.taa()?), policy)
            }
            KernelChoice::Percept => SpatioTemporalKernel::compose(&ks, Some(&p.percept()?), None, policy),
            KernelChoice::Spatial => SpatioTemporalKernel::compose(&ks, None, None, policy),
        })
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            iterations: self.iters,
            batch_size: self.batch,
            learning_rate: self.lr,
            adam_beta1: self.beta1,
            adam_beta2: self.beta2,
            adam_epsilon: self.epsilon,
            seed: self.seed,
            lipschitz_scale: self.lipschitz,
            targets: self.targets.into(),
            equalize_marginals: self.equalize,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log
            .clone()
            .unwrap_or_else(|| sibling(&self.out, "convergence.csv"))
    }

    pub fn meta_path(&self) -> PathBuf {
        self.meta.clone().unwrap_or_else(|| sibling(&self.out, "meta.json"))
    }
}

/// `dir/stem.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tile".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn d_scene() -> String {
    "ramp".into()
}
fn d_image() -> usize {
    64
}
fn d_frames() -> usize {
    32
}
fn d_frame() -> usize {
    16
}
fn d_policy() -> Policy {
    Policy::CausalRenormalized
}
fn d_metrics() -> PathBuf {
    PathBuf::from("metrics.csv")
}

/// Effective settings of `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default)]
    pub tile: Option<PathBuf>,
    #[serde(default = "d_scene")]
    pub scene: String,
    #[serde(default = "d_image")]
    pub width: usize,
    #[serde(default = "d_image")]
    pub height: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    /// 1-based frame reported in the summary.
    #[serde(default = "d_frame")]
    pub frame: usize,
    #[serde(default)]
    pub taa: bool,
    #[serde(default = "d_true")]
    pub percept: bool,
    #[serde(default = "d_policy")]
    pub policy: Policy,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_trunc")]
    pub spatial_truncation: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_taa_len")]
    pub taa_len: usize,
    #[serde(default = "d_rate")]
    pub frame_rate: f64,
    #[serde(default = "d_tau")]
    pub time_constant_ms: f64,
    #[serde(default = "d_support")]
    pub percept_support: Support,
    #[serde(default)]
    pub percept_table: Option<PathBuf>,
    #[serde(default = "d_one_u64")]
    pub baseline_seed: u64,
    #[serde(default = "d_metrics")]
    pub out: PathBuf,
    #[serde(default)]
    pub export_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn d_one_u64() -> u64 {
    1
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("defaults deserialize")
    }
}

impl EvaluateConfig {
    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            sigma: self.sigma,
            spatial_truncation: self.spatial_truncation,
            alpha: self.alpha,
            taa_len: self.taa_len,
            frame_rate: self.frame_rate,
            time_constant_ms: self.time_constant_ms,
            percept_support: self.percept_support,
            percept_table: self.percept_table.clone(),
        }
    }

    pub fn model(&self) -> CliResult<PerceptualModel> {
        let p = self.kernel_params();
        let mut model = PerceptualModel::new(
            p.spatial()?,
            if self.percept { Some(p.percept()?) } else { None },
            if self.taa { Some(p.taa()?) } else { None },
        );
        model.policy = self.policy.into();
        Ok(model)
    }
}

fn d_radii() -> Vec<f64> {
    vec![0.25, 0.5]
}
fn d_out_dir() -> PathBuf {
    PathBuf::from(".")
}
fn d_prefix() -> String {
    "spectrum".into()
}

/// Effective settings of `spectrum`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default)]
    pub tile: Option<PathBuf>,
    /// Use a seeded random tile of these dimensions instead of a tile file.
    #[serde(default)]
    pub white_noise: Option<Dims3>,
    /// A precomputed error sequence, one PFM per frame.
    #[serde(default)]
    pub error_pfm: Vec<PathBuf>,
    #[serde(default = "d_scene")]
    pub scene: String,
    #[serde(default = "d_image")]
    pub width: usize,
    #[serde(default = "d_image")]
    pub height: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    /// 1-based frame of the XY slice.
    #[serde(default = "d_frame")]
    pub frame: usize,
    /// Image row of the XT slice.
    #[serde(default)]
    pub row: usize,
    #[serde(default = "d_radii")]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub taa: bool,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_taa_len")]
    pub taa_len: usize,
    #[serde(default = "d_one")]
    pub spp: usize,
    #[serde(default = "d_two")]
    pub dim: usize,
    #[serde(default = "d_one_u64")]
    pub seed: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "d_prefix")]
    pub prefix: String,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("defaults deserialize")
    }
}

/// Merges defaults, the JSON file at `file` and the non-null entries of
/// `flags`, in that order of increasing precedence.
pub fn resolve<C: DeserializeOwned>(file: Option<&Path>, flags: &impl Serialize) -> CliResult<C> {
    let mut merged = Map::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        };
        for (k, v) in map {
            merged.insert(k.replace('_', "-"), v);
        }
    }
    let flags = serde_json::to_value(flags).map_err(|e| CliError::Config(e.to_string()))?;
    if let Value::Object(map) = flags {
        for (k, v) in map {
            let empty_list = matches!(&v, Value::Array(a) if a.is_empty());
            if !v.is_null() && !empty_list {
                merged.insert(k, v);
            }
        }
    }
    serde_path_to_error::deserialize(Value::Object(merged)).map_err(|e| {
        let key = e.path().to_string();
        CliError::Config(format!("key `{key}`: {}", e.into_inner()))
    })
}
