//! The four subcommands as library functions returning structured reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use stbn::io::{write_pfm_file, write_spectrum_png, GrayImage};
use stbn::percept::{band_area_fraction, dft_power, lowfreq_energy_ratio, SpectrumImage};
use stbn::swgd::{optimize_with, LogEntry};
use stbn::synth::{render_with_tile, scene_by_name};
use stbn::{FrameSequence, SampleTile};

use crate::config::{EvaluateConfig, OptimizeConfig, SpectrumConfig};
use crate::error::{CliError, CliResult};

/// Runs `f` on a dedicated pool when a thread count is given.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Config("key `threads`: must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("key `threads`: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Prints the effective configuration as one JSON line on stderr.
pub fn echo_config(command: &str, config: &impl Serialize) {
    let json = serde_json::to_string(config).unwrap_or_default();
    eprintln!("[{command}] effective config: {json}");
}

pub fn read_tile(path: &Path) -> CliResult<SampleTile> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    SampleTile::read_from(std::io::BufReader::new(file)).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::io(path, m),
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_tile(path: &Path, tile: &SampleTile) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    tile.write_to(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelSummary {
    pub extent: [usize; 3],
    pub t_min: i32,
    pub max_weight: f64,
    pub dc_gain: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeReport {
    pub tile: PathBuf,
    pub log: PathBuf,
    pub meta: PathBuf,
    pub kernel: KernelSummary,
    pub final_objective: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Meta<'a> {
    format: &'static str,
    version: &'static str,
    config: &'a OptimizeConfig,
    kernel: &'a KernelSummary,
    iterations: usize,
    final_objective: Option<f64>,
    warnings: &'a [String],
}

pub fn cmd_optimize(config: &OptimizeConfig) -> CliResult<OptimizeReport> {
    with_threads(config.threads, || optimize_inner(config))?
}

fn optimize_inner(config: &OptimizeConfig) -> CliResult<OptimizeReport> {
    let kernel = config.build_kernel()?;
    let opt = config.optimizer();
    opt.validate()?;
    let tile = match &config.init {
        Some(path) => {
            let t = read_tile(path)?;
            if (t.dims(), t.spp(), t.dim()) != (config.tile.0, config.spp, config.dim) {
                return Err(CliError::Validation(format!(
                    "initial tile {} is {:?} with spp {} and dim {}, config asks for {} with spp {} and dim {}",
                    path.display(),
                    t.dims(),
                    t.spp(),
                    t.dim(),
                    config.tile,
                    config.spp,
                    config.dim
                )));
            }
            t
        }
        None => SampleTile::init_random(config.tile.0, config.spp, config.dim, config.seed)?,
    };
    let summary = KernelSummary {
        extent: kernel.extent(),
        t_min: kernel.t_min(),
        max_weight: kernel.max_weight(),
        dc_gain: kernel.dc_gain(),
    };
    let every = (config.iters / 10).max(1);
    let quiet = config.quiet;
    let result = optimize_with(tile, &kernel, &opt, |e: &LogEntry| {
        if !quiet && (e.iteration + 1).is_multiple_of(every) {
            eprintln!(
                "[optimize] iteration {} objective {:.6} empty {} ({:.0} ms)",
                e.iteration + 1,
                e.objective,
                e.empty_subset_count,
                e.wall_ms
            );
        }
    })?;
    for w in result.warnings.iter().filter(|_| !quiet) {
        eprintln!("warning: {w}");
    }

    write_tile(&config.out, &result.tile)?;
    let log_path = config.log_path();
    let mut csv = csv::Writer::from_path(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    csv.write_record(["iteration", "objective", "empty_subset_count", "wall_ms"])?;
    for e in &result.log {
        csv.write_record([
            e.iteration.to_string(),
            e.objective.to_string(),
            e.empty_subset_count.to_string(),
            format!("{:.3}", e.wall_ms),
        ])?;
    }
    csv.flush().map_err(|e| CliError::io(&log_path, e))?;

    let final_objective = result.log.last().map(|e| e.objective);
    let meta_path = config.meta_path();
    let meta = Meta {
        format: "stbn-tile",
        version: env!("CARGO_PKG_VERSION"),
        config,
        kernel: &summary,
        iterations: result.log.len(),
        final_objective,
        warnings: &result.warnings,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&meta_path, json + "\n").map_err(|e| CliError::io(&meta_path, e))?;

    Ok(OptimizeReport {
        tile: config.out.clone(),
        log: log_path,
        meta: meta_path,
        kernel: summary,
        final_objective,
        warnings: result.warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    /// 1-based.
    pub frame: usize,
    pub prelmse_tile: f64,
    pub prelmse_white: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateReport {
    pub per_frame: Vec<FrameMetrics>,
    pub selected: FrameMetrics,
    pub out: PathBuf,
}

fn check_frame(frame: usize, frames: usize) -> CliResult<usize> {
    if frame == 0 || frame > frames {
        return Err(CliError::Config(format!(
            "key `frame`: frame {frame} is outside the valid range 1..={frames}"
        )));
    }
    Ok(frame - 1)
}

fn check_image(width: usize, height: usize, frames: usize) -> CliResult<()> {
    for (k, v) in [("width", width), ("height", height), ("frames", frames)] {
        if v == 0 {
            return Err(CliError::Config(format!("key `{k}`: must be positive")));
        }
    }
    Ok(())
}

pub fn cmd_evaluate(config: &EvaluateConfig) -> CliResult<EvaluateReport> {
    with_threads(config.threads, || evaluate_inner(config))?
}

fn evaluate_inner(config: &EvaluateConfig) -> CliResult<EvaluateReport> {
    check_image(config.width, config.height, config.frames)?;
    let selected = check_frame(config.frame, config.frames)?;
    let path = config
        .tile
        .as_ref()
        .ok_or_else(|| CliError::Config("key `tile`: a tile file is required".into()))?;
    let scene = scene_by_name(&config.scene).map_err(|e| CliError::Config(format!("key `scene`: {e}")))?;
    let model = config.model()?;
    let tile = read_tile(path)?;
    let white = SampleTile::init_random(tile.dims(), tile.spp(), tile.dim(), config.baseline_seed)?;

    let image = [config.width, config.height];
    let reference = scene.reference([config.width, config.height, config.frames])?;
    let rendered = render_with_tile(&scene, &tile, image, config.frames)?;
    let baseline = render_with_tile(&scene, &white, image, config.frames)?;
    let p_tile = model.prelmse_per_frame(&rendered, &reference)?;
    let p_white = model.prelmse_per_frame(&baseline, &reference)?;

    let per_frame: Vec<FrameMetrics> = p_tile
        .iter()
        .zip(&p_white)
        .enumerate()
        .map(|(i, (&a, &b))| FrameMetrics {
            frame: i + 1,
            prelmse_tile: a,
            prelmse_white: b,
            ratio: if b > 0.0 { a / b } else { f64::NAN },
        })
        .collect();

    let mut csv = csv::Writer::from_path(&config.out).map_err(|e| CliError::io(&config.out, e))?;
    csv.write_record(["frame", "prelmse_tile", "prelmse_white", "ratio"])?;
    for m in &per_frame {
        csv.write_record([
            m.frame.to_string(),
            m.prelmse_tile.to_string(),
            m.prelmse_white.to_string(),
            m.ratio.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| CliError::io(&config.out, e))?;

    if let Some(dir) = &config.export_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (name, seq) in [
            ("tile", model.displayed(&rendered)),
            ("white", model.displayed(&baseline)),
            ("reference", reference.clone()),
        ] {
            export_frames(dir, name, &seq)?;
        }
    }

    let selected = per_frame[selected].clone();
    Ok(EvaluateReport {
        per_frame,
        selected,
        out: config.out.clone(),
    })
}

fn export_frames(dir: &Path, name: &str, seq: &FrameSequence) -> CliResult<()> {
    for t in 0..seq.frames() {
        let path = dir.join(format!("{name}_{:04}.pfm", t + 1));
        let img = GrayImage::new(seq.width(), seq.height(), seq.frame(t).to_vec())?;
        write_pfm_file(&path, &img).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandRow {
    pub slice: &'static str,
    pub radius: f64,
    pub ratio: f64,
    pub area_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    pub bands: Vec<BandRow>,
    pub xy_png: PathBuf,
    pub xt_png: PathBuf,
    pub csv: PathBuf,
}

impl SpectrumReport {
    pub fn ratio(&self, slice: &str, radius: f64) -> Option<f64> {
        self.bands
            .iter()
            .find(|b| b.slice == slice && b.radius == radius)
            .map(|b| b.ratio)
    }
}

/// Displayed-minus-reference error of the configured source, before any perceptual filtering.
pub fn spectrum_error(config: &SpectrumConfig) -> CliResult<FrameSequence> {
    if !config.error_pfm.is_empty() {
        return Ok(stbn::io::read_pfm_sequence(&config.error_pfm)?);
    }
    check_image(config.width, config.height, config.frames)?;
    let tile = match (&config.tile, config.white_noise) {
        (Some(path), None) => read_tile(path)?,
        (None, Some(d)) => SampleTile::init_random(d.0, config.spp, config.dim, config.seed)?,
        (Some(_), Some(_)) => {
            return Err(CliError::Config("keys `tile` and `white-noise` are mutually exclusive".into()))
        }
        (None, None) => {
            return Err(CliError::Config(
                "one of `tile`, `white-noise` or `error-pfm` is required".into(),
            ))
        }
    };
    let scene = scene_by_name(&config.scene).map_err(|e| CliError::Config(format!("key `scene`: {e}")))?;
    let reference = scene.reference([config.width, config.height, config.frames])?;
    let mut rendered = render_with_tile(&scene, &tile, [config.width, config.height], config.frames)?;
    if config.taa {
        let len = (config.taa_len > 0).then_some(config.taa_len);
        let ka = stbn::TaaKernel::new(config.alpha, len)?;
        rendered = stbn::percept::apply_taa(&rendered, &ka);
    }
    Ok(rendered.difference(&reference)?)
}

/// XY slice at a 0-based frame and XT slice at a row, as power spectra.
pub fn slice_spectra(err: &FrameSequence, frame: usize, row: usize) -> CliResult<(SpectrumImage, SpectrumImage)> {
    if row >= err.height() {
        return Err(CliError::Config(format!(
            "key `row`: row {row} is outside the valid range 0..{}",
            err.height()
        )));
    }
    let xy = dft_power(err.frame(frame), err.width(), err.height())?;
    let xt = dft_power(&err.xt_slice(row), err.width(), err.frames())?;
    Ok((xy, xt))
}

pub fn cmd_spectrum(config: &SpectrumConfig) -> CliResult<SpectrumReport> {
    with_threads(config.threads, || spectrum_inner(config))?
}

fn spectrum_inner(config: &SpectrumConfig) -> CliResult<SpectrumReport> {
    for &r in &config.radii {
        if !(r > 0.0 && r <= 1.0) {
            return Err(CliError::Config(format!("key `radii`: {r} is outside (0, 1]")));
        }
    }
    let err = spectrum_error(config)?;
    let frame = check_frame(config.frame, err.frames())?;
    let (xy, xt) = slice_spectra(&err, frame, config.row)?;

    fs::create_dir_all(&config.out_dir).map_err(|e| CliError::io(&config.out_dir, e))?;
    let xy_png = config.out_dir.join(format!("{}_xy.png", config.prefix));
    let xt_png = config.out_dir.join(format!("{}_xt.png", config.prefix));
    let csv_path = config.out_dir.join(format!("{}_bands.csv", config.prefix));
    write_spectrum_png(&xy_png, &xy).map_err(|e| CliError::io(&xy_png, e))?;
    write_spectrum_png(&xt_png, &xt).map_err(|e| CliError::io(&xt_png, e))?;

    let mut bands = Vec::new();
    for (name, spec) in [("xy", &xy), ("xt", &xt)] {
        for &r in &config.radii {
            bands.push(BandRow {
                slice: name,
                radius: r,
                ratio: lowfreq_energy_ratio(spec, r)?,
                area_fraction: band_area_fraction(spec.width, spec.height, r),
            });
        }
    }
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    csv.write_record(["slice", "radius", "ratio", "area_fraction"])?;
    for b in &bands {
        csv.write_record([
            b.slice.to_string(),
            b.radius.to_string(),
            b.ratio.to_string(),
            b.area_fraction.to_string(),
        ])?;
    }
    csv.flush().map_err(|e| CliError::io(&csv_path, e))?;
    Ok(SpectrumReport {
        bands,
        xy_png,
        xt_png,
        csv: csv_path,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TileInfo {
    pub path: PathBuf,
    pub dims: [usize; 3],
    pub spp: usize,
    pub dim: usize,
    pub seed: u64,
    pub file_bytes: usize,
    pub component_mean: Vec<f64>,
    pub component_min: Vec<f64>,
    pub component_max: Vec<f64>,
}

pub fn cmd_info(path: &Path) -> CliResult<TileInfo> {
    let tile = read_tile(path)?;
    let dim = tile.dim();
    let n = tile.sample_count() as f64;
    let mut mean = vec![0.0; dim];
    let mut min = vec![f64::INFINITY; dim];
    let mut max = vec![f64::NEG_INFINITY; dim];
    for p in tile.samples().chunks(dim) {
        for c in 0..dim {
            mean[c] += p[c] / n;
            min[c] = min[c].min(p[c]);
            max[c] = max[c].max(p[c]);
        }
    }
    Ok(TileInfo {
        path: path.to_path_buf(),
        dims: tile.dims(),
        spp: tile.spp(),
        dim,
        seed: tile.seed(),
        file_bytes: tile.file_len(),
        component_mean: mean,
        component_min: min,
        component_max: max,
    })
}
