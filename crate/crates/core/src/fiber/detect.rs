//! The eigenvalue-ratio test comparing full and fiber dynamics.

use thiserror::Error;

use crate::field::GridPartition;
use crate::models::SystemModel;
use crate::spectral::{leading_spectrum, SpectralError, SpectrumResult};
use crate::ulam::{build_fiber_ulam, build_ulam, TransitionMatrix, UlamError};

use super::{extract_fiber, FiberCurve, FiberError};

/// Which connected component of the level set to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComponentChoice {
    #[default]
    Longest,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Test points per box for the full operator.
    pub samples: usize,
    /// Elementary steps per full flow time.
    pub steps: usize,
    /// Elementary steps per fiber flow time.
    pub fiber_steps: usize,
    pub fiber_samples: usize,
    pub nbins: usize,
    pub level: f64,
    pub component: ComponentChoice,
    /// Eigenvalues computed on each operator.
    pub count: usize,
    /// Geometric-mean ratio above which the system is called multiscale.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            steps: 20_000,
            fiber_steps: 20,
            fiber_samples: 1000,
            nbins: 100,
            level: 0.8,
            component: ComponentChoice::Longest,
            count: 10,
            threshold: 100.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("full operator: {0}")]
    Operator(#[source] UlamError),
    #[error("full spectrum: {0}")]
    Spectrum(#[source] SpectralError),
    #[error("second eigenfunction is not real (eigenvalue {0})")]
    ComplexEigenfunction(num_complex::Complex64),
    #[error("fiber extraction: {0}")]
    Fiber(#[source] FiberError),
    #[error("fiber operator: {0}")]
    FiberOperator(#[source] UlamError),
    #[error("fiber spectrum: {0}")]
    FiberSpectrum(#[source] SpectralError),
}

impl DetectError {
    pub fn stage(&self) -> &'static str {
        match self {
            DetectError::Operator(_) => "operator",
            DetectError::Spectrum(_) | DetectError::ComplexEigenfunction(_) => "spectrum",
            DetectError::Fiber(_) => "fiber",
            DetectError::FiberOperator(_) => "fiber-operator",
            DetectError::FiberSpectrum(_) => "fiber-spectrum",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiscaleReport {
    pub full: SpectrumResult,
    pub fiber: SpectrumResult,
    pub curve: FiberCurve,
    /// `χ̂ᵢ / χᵢ` for `i = 2..=count` (index 0 holds `i = 2`).
    pub ratios: Vec<f64>,
    pub geometric_mean: f64,
    pub threshold: f64,
    pub multiscale: bool,
    pub fiber_outside_mass: f64,
}

impl MultiscaleReport {
    pub fn full_rates(&self) -> &[f64] {
        &self.full.rates
    }

    pub fn fiber_rates(&self) -> &[f64] {
        &self.fiber.rates
    }
}

/// Builds the full operator and runs the test on it.
pub fn detect_multiscale(
    model: &SystemModel,
    grid: &GridPartition,
    config: &DetectConfig,
) -> Result<MultiscaleReport, DetectError> {
    let p = build_ulam(model, grid, config.samples, config.steps, config.seed).map_err(DetectError::Operator)?;
    detect_from_operator(model, &p, config)
}

/// Runs the test on a previously built full operator.
pub fn detect_from_operator(
    model: &SystemModel,
    p: &TransitionMatrix,
    config: &DetectConfig,
) -> Result<MultiscaleReport, DetectError> {
    let full = leading_spectrum(p, config.count).map_err(DetectError::Spectrum)?;
    let phi = full
        .eigenfunction(1)
        .ok_or(DetectError::ComplexEigenfunction(full.eigenvalues[1]))?;
    let fiber = extract_fiber(&phi, config.level).map_err(DetectError::Fiber)?;
    let curve = match config.component {
        ComponentChoice::Longest => fiber.into_longest(),
        ComponentChoice::Index(i) => fiber.component(i).map_err(DetectError::Fiber)?.clone(),
    };
    let q = build_fiber_ulam(
        model,
        &phi,
        &curve,
        config.nbins,
        config.fiber_samples,
        config.fiber_steps,
        config.seed ^ 0xF1BE_F1BE,
    )
    .map_err(DetectError::FiberOperator)?;
    let fib = leading_spectrum(&q, config.count.min(config.nbins)).map_err(DetectError::FiberSpectrum)?;
    Ok(assemble(full, fib, curve, config.threshold, q.outside_total()))
}

pub(crate) fn assemble(
    full: SpectrumResult,
    fiber: SpectrumResult,
    curve: FiberCurve,
    threshold: f64,
    fiber_outside_mass: f64,
) -> MultiscaleReport {
    let n = full.rates.len().min(fiber.rates.len());
    let ratios: Vec<f64> = (1..n).map(|i| fiber.rates[i] / full.rates[i]).collect();
    let head = &ratios[..ratios.len().min(9)];
    let geometric_mean = if head.is_empty() {
        f64::NAN
    } else {
        (head.iter().map(|r| r.ln()).sum::<f64>() / head.len() as f64).exp()
    };
    MultiscaleReport {
        full,
        fiber,
        curve,
        multiscale: geometric_mean > threshold,
        ratios,
        geometric_mean,
        threshold,
        fiber_outside_mass,
    }
}
