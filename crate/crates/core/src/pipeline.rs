//! Config-driven stages shared by the command line and the tests.
//!
//! Each stage derives its random streams from `ulam.seed`, so every result is
//! a function of the configuration alone.

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::fiber::detect::{detect_from_operator, DetectError, MultiscaleReport};
use crate::fiber::{extract_fiber, validate_fiber, FiberError, FiberValidityReport};
use crate::io::IoError;
use crate::models::{ModelError, SystemModel};
use crate::reduce::{
    estimate_reduced_model, rank_reparameterize, select_k, simulate_reduced, LillieforsCurve, ReduceError,
    ReducedModel, ReducedRun, SlowCoordinate,
};
use crate::rng::RngStream;
use crate::spectral::{
    flow_time_sweep, invariant_density, leading_spectrum_with, DensityResult, KrylovOptions, SpectralError,
    SpectrumResult, SweepReport,
};
use crate::stats::{summarize_with, SeriesSummary, StatsError, TimeSeries};
use crate::ulam::{build_ulam, TransitionMatrix, UlamError};

const VALIDATE_SALT: u64 = 0x7A11_D000;
const LILLIEFORS_SALT: u64 = 0x1111_EF00;
const REDUCE_SALT: u64 = 0x0ED0_CE00;
const FULL_SERIES_SALT: u64 = 0x5E21_E500;
const REDUCED_SERIES_SALT: u64 = 0x5E21_E501;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("operator: {0}")]
    Operator(#[from] UlamError),
    #[error("spectrum: {0}")]
    Spectrum(#[from] SpectralError),
    #[error("detect: {0}")]
    Detect(#[from] DetectError),
    #[error("fiber: {0}")]
    Fiber(#[from] FiberError),
    #[error("reduce: {0}")]
    Reduce(#[from] ReduceError),
    #[error("simulation: {0}")]
    Model(#[from] ModelError),
    #[error("statistics: {0}")]
    Stats(#[from] StatsError),
    #[error("second eigenfunction is complex ({0}); no slow coordinate")]
    ComplexEigenfunction(num_complex::Complex64),
    #[error("stored input does not match the config: {0}")]
    Mismatch(String),
}

impl PipelineError {
    /// Process exit code of the failing stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io(_) | PipelineError::Mismatch(_) => 3,
            PipelineError::Operator(_) => 4,
            PipelineError::Spectrum(_) | PipelineError::ComplexEigenfunction(_) => 5,
            PipelineError::Detect(_) | PipelineError::Fiber(_) => 6,
            PipelineError::Reduce(_) => 7,
            PipelineError::Model(_) | PipelineError::Stats(_) => 8,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub struct Operator {
    pub matrix: TransitionMatrix,
    pub sweep: Option<SweepReport>,
}

/// Builds the full operator, at the swept flow time when a sweep is configured.
pub fn build_operator(cfg: &ExperimentConfig) -> Result<Operator> {
    let model = cfg.system()?;
    let grid = cfg.grid_partition()?;
    let u = &cfg.ulam;
    if let Some(taus) = &u.sweep {
        let sweep = flow_time_sweep(&model, &grid, u.samples, taus, u.seed, u.sweep_tolerance)?;
        let matrix = sweep.entries[sweep.chosen].matrix.clone();
        return Ok(Operator {
            matrix,
            sweep: Some(sweep),
        });
    }
    let matrix = build_ulam(&model, &grid, u.samples, cfg.ulam_steps()?, u.seed)?;
    Ok(Operator { matrix, sweep: None })
}

/// Checks that a stored operator lives on the configured grid.
pub fn check_operator(cfg: &ExperimentConfig, p: &TransitionMatrix) -> Result<()> {
    let grid = cfg.grid_partition()?;
    match p.grid() {
        Some(g) if *g == grid => Ok(()),
        _ => Err(PipelineError::Mismatch("matrix grid differs from [grid]".into())),
    }
}

pub fn spectrum(cfg: &ExperimentConfig, p: &TransitionMatrix) -> Result<SpectrumResult> {
    let opts = KrylovOptions {
        tol: cfg.spectral.tol,
        ..KrylovOptions::default()
    };
    Ok(leading_spectrum_with(p, cfg.spectral.count, &opts)?)
}

pub fn density(p: &TransitionMatrix) -> Result<DensityResult> {
    Ok(invariant_density(p)?)
}

pub struct Detection {
    pub report: MultiscaleReport,
    pub validity: FiberValidityReport,
}

/// Multiscale test at `fiber.level` plus the fiber validity check.
pub fn detect(cfg: &ExperimentConfig, p: &TransitionMatrix, density: &DensityResult) -> Result<Detection> {
    detect_at(cfg, p, density, cfg.fiber.level)
}

pub fn detect_at(cfg: &ExperimentConfig, p: &TransitionMatrix, density: &DensityResult, level: f64) -> Result<Detection> {
    let model = cfg.system()?;
    let mut dc = cfg.detect_config()?;
    dc.level = level;
    let report = detect_from_operator(&model, p, &dc)?;
    let phi = report
        .full
        .eigenfunction(1)
        .ok_or(PipelineError::ComplexEigenfunction(report.full.eigenvalues[1]))?;
    let validity = validate_fiber(
        &model,
        &phi,
        &report.curve,
        &density.density,
        cfg.fiber.validate_q,
        cfg.ulam.seed ^ VALIDATE_SALT,
    )?;
    Ok(Detection { report, validity })
}

pub fn slow_coordinate(spectrum: &SpectrumResult) -> Result<SlowCoordinate> {
    let phi = spectrum
        .eigenfunction(1)
        .ok_or(PipelineError::ComplexEigenfunction(spectrum.eigenvalues[1]))?;
    Ok(rank_reparameterize(&phi))
}

/// Lilliefors statistic over `reduce.k_grid`, if one is configured.
pub fn lilliefors(
    cfg: &ExperimentConfig,
    model: &SystemModel,
    theta: &SlowCoordinate,
    density: &DensityResult,
) -> Result<Option<LillieforsCurve>> {
    let Some(grid) = &cfg.reduce.k_grid else {
        return Ok(None);
    };
    let fiber = extract_fiber(theta.field(), cfg.reduce.k_level)?;
    let curve = select_k(
        model,
        theta,
        &fiber,
        &density.density,
        cfg.reduce.k_q,
        grid,
        cfg.ulam.seed ^ LILLIEFORS_SALT,
    )?;
    Ok(Some(curve))
}

/// The configured `k`, or the minimizer of the Lilliefors curve.
pub fn chosen_k(cfg: &ExperimentConfig, curve: Option<&LillieforsCurve>) -> usize {
    cfg.reduce
        .k
        .or(curve.map(|c| c.best_k))
        .expect("validated config has k or k_grid")
}

pub fn reduced_model(
    cfg: &ExperimentConfig,
    model: &SystemModel,
    theta: &SlowCoordinate,
    density: &DensityResult,
    k: usize,
) -> Result<ReducedModel> {
    let r = &cfg.reduce;
    Ok(estimate_reduced_model(
        model,
        theta,
        &density.density,
        k,
        r.q,
        r.n_fibers,
        cfg.ulam.seed ^ REDUCE_SALT,
    )?)
}

/// First coordinate of one long trajectory, sampled every `stats.interval`.
pub fn full_series(cfg: &ExperimentConfig) -> Result<TimeSeries> {
    let model = cfg.system()?;
    let mut rng = RngStream::new(cfg.ulam.seed ^ FULL_SERIES_SALT, 0);
    let path = model.sample_path(cfg.stats.start, cfg.series_stride()?, cfg.stats.series_length, &mut rng)?;
    Ok(TimeSeries::new(path.iter().map(|p| p[0]).collect(), cfg.stats.interval)?)
}

pub fn reduced_run(cfg: &ExperimentConfig, rm: &ReducedModel) -> Result<ReducedRun> {
    let r = &cfg.reduce;
    Ok(simulate_reduced(
        rm,
        r.v0,
        r.dt,
        cfg.reduced_steps(),
        r.record_every,
        cfg.ulam.seed ^ REDUCED_SERIES_SALT,
    )?)
}

pub fn summary(cfg: &ExperimentConfig, series: &TimeSeries) -> Result<SeriesSummary> {
    Ok(summarize_with(series, cfg.stats.lower_pct, cfg.stats.upper_pct)?)
}
