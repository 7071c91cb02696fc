//! Leading eigenpairs of Ulam matrices, generator rates and the flow-time
//! convergence sweep.

mod krylov;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use thiserror::Error;

pub use krylov::KrylovOptions;

use crate::field::{l1_distance, FieldError, GridPartition, ScalarField};
use crate::models::SystemModel;
use crate::ulam::{build_ulam, Domain, TransitionMatrix, UlamError};

/// `|λ₂ − λ₃|` below this flags a repeated second eigenvalue.
pub const MULTIPLICITY_GAP: f64 = 1e-4;

/// Tolerance on negative entries of the dominant density vector, relative to its max.
pub const DENSITY_SIGN_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("cannot compute {count} eigenpairs of a {dim}-dimensional operator")]
    InvalidCount { count: usize, dim: usize },
    #[error("dense Schur decomposition of the projected matrix failed")]
    SchurFailed,
    #[error("eigensolver did not converge within {restarts} restarts")]
    NotConverged { restarts: usize },
    #[error("dominant eigenvector has mixed signs (min {min}, max {max})")]
    MixedSigns { min: f64, max: f64 },
    #[error("operation needs a matrix built on a grid")]
    NotAGrid,
    #[error("flow time {tau} is not a multiple of dt = {dt}")]
    NotAMultiple { tau: f64, dt: f64 },
    #[error("flow times must be strictly increasing")]
    NotIncreasing,
    #[error(transparent)]
    Ulam(#[from] UlamError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Eigenvalues of the Koopman matrix `Pᵀ` in descending magnitude, with
/// real eigenvectors scaled to unit max-abs and positive at the argmax.
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<C64>,
    /// `None` for members of complex conjugate pairs.
    pub vectors: Vec<Option<Vec<f64>>>,
    pub rates: Vec<f64>,
    pub tau: f64,
    /// `‖Pᵀv − λv‖∞ / ‖v‖∞` per pair.
    pub residuals: Vec<f64>,
    /// Set when `|λ₂ − λ₃| < MULTIPLICITY_GAP`.
    pub repeated_second: bool,
    pub domain: Domain,
    pub outside_mass: f64,
}

impl SpectrumResult {
    pub fn is_real(&self, i: usize) -> bool {
        self.vectors.get(i).is_some_and(|v| v.is_some())
    }

    /// The `i`-th (0-based) eigenfunction as a field, if real and grid-based.
    pub fn eigenfunction(&self, i: usize) -> Option<ScalarField> {
        let Domain::Grid(g) = &self.domain else {
            return None;
        };
        let v = self.vectors.get(i)?.as_ref()?;
        ScalarField::new(g.clone(), v.clone()).ok()
    }
}

fn complex_apply(n: usize, f: impl Fn(&[f64], &mut [f64]) + Sync) -> impl Fn(&[C64], &mut [C64]) + Sync {
    move |x: &[C64], y: &mut [C64]| {
        let re: Vec<f64> = x.iter().map(|c| c.re).collect();
        let im: Vec<f64> = x.iter().map(|c| c.im).collect();
        let (mut yr, mut yi) = (vec![0.0; n], vec![0.0; n]);
        f(&re, &mut yr);
        if im.iter().any(|&v| v != 0.0) {
            f(&im, &mut yi);
        }
        for (k, out) in y.iter_mut().enumerate() {
            *out = C64::new(yr[k], yi[k]);
        }
    }
}

/// Rotates `x` so its largest entry is real and positive, then returns the
/// real part scaled to unit max-abs.
fn realify(x: &[C64]) -> Vec<f64> {
    let k = (0..x.len())
        .max_by(|&a, &b| x[a].norm().total_cmp(&x[b].norm()))
        .unwrap_or(0);
    let pk = x[k];
    let phase = if pk.norm() > 0.0 { pk.conj() / pk.norm() } else { C64::new(1.0, 0.0) };
    let mut v: Vec<f64> = x.iter().map(|c| (c * phase).re).collect();
    let m = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|a| *a /= m);
    }
    v
}

/// Snaps near-real eigenvalues onto the real axis and makes complex pairs
/// exact conjugates of each other.
fn tidy_values(values: &mut [C64]) {
    for l in values.iter_mut() {
        if l.im.abs() <= 1e-10 * l.norm().max(1e-300) {
            l.im = 0.0;
        }
    }
    let mut i = 0;
    while i + 1 < values.len() {
        let (a, b) = (values[i], values[i + 1]);
        if a.im != 0.0 && (a - b.conj()).norm() <= 1e-6 * a.norm() {
            let m = C64::new(0.5 * (a.re + b.re), 0.5 * (a.im.abs() + b.im.abs()));
            values[i] = m;
            values[i + 1] = m.conj();
            i += 2;
        } else {
            i += 1;
        }
    }
}

pub fn leading_spectrum(p: &TransitionMatrix, count: usize) -> Result<SpectrumResult, SpectralError> {
    leading_spectrum_with(p, count, &KrylovOptions::default())
}

pub fn leading_spectrum_with(
    p: &TransitionMatrix,
    count: usize,
    opts: &KrylovOptions,
) -> Result<SpectrumResult, SpectralError> {
    let n = p.dim();
    let op = complex_apply(n, |x, y| p.apply_transpose(x, y));
    let ritz = krylov::krylov_schur(n, count, &op, opts)?;
    let mut values = ritz.values;
    tidy_values(&mut values);

    let mut vectors = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    for (l, x) in values.iter().zip(&ritz.vectors) {
        if l.im == 0.0 {
            let v = realify(x);
            let mut w = vec![0.0; n];
            p.apply_transpose(&v, &mut w);
            let r = w.iter().zip(&v).map(|(a, b)| (a - l.re * b).abs()).fold(0.0, f64::max);
            let vn = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            residuals.push(r / vn);
            vectors.push(Some(v));
        } else {
            let mut w = vec![C64::new(0.0, 0.0); n];
            op(x, &mut w);
            let r = w.iter().zip(x).map(|(a, b)| (a - l * b).norm()).fold(0.0, f64::max);
            let vn = x.iter().fold(0.0f64, |a, b| a.max(b.norm()));
            residuals.push(r / vn);
            vectors.push(None);
        }
    }
    let repeated_second = values.len() >= 3 && (values[1] - values[2]).norm() < MULTIPLICITY_GAP;
    Ok(SpectrumResult {
        rates: generator_rates(&values, p.tau()),
        eigenvalues: values,
        vectors,
        tau: p.tau(),
        residuals,
        repeated_second,
        domain: p.domain().clone(),
        outside_mass: p.outside_total(),
    })
}

/// Eigenvalues of `P` itself (the transfer operator), for cross-checks.
pub fn transfer_spectrum(p: &TransitionMatrix, count: usize) -> Result<Vec<C64>, SpectralError> {
    let op = complex_apply(p.dim(), |x, y| p.apply(x, y));
    let mut values = krylov::krylov_schur(p.dim(), count, &op, &KrylovOptions::default())?.values;
    tidy_values(&mut values);
    Ok(values)
}

#[derive(Debug, Clone)]
pub struct DensityResult {
    /// Unit-L¹ density (per-box mass divided by box area).
    pub density: ScalarField,
    pub eigenvalue: C64,
    /// Set when the two leading eigenvalues of `P` are closer than `MULTIPLICITY_GAP`.
    pub degenerate: bool,
}

pub fn invariant_density(p: &TransitionMatrix) -> Result<DensityResult, SpectralError> {
    let grid = p.grid().ok_or(SpectralError::NotAGrid)?.clone();
    let n = p.dim();
    let nev = n.min(2);
    let op = complex_apply(n, |x, y| p.apply(x, y));
    let ritz = krylov::krylov_schur(n, nev, &op, &KrylovOptions::default())?;
    let gap = if nev == 2 { (ritz.values[0] - ritz.values[1]).norm() } else { f64::INFINITY };
    let degenerate = gap < MULTIPLICITY_GAP;
    let uniform = || ScalarField::constant(grid.clone(), 1.0 / grid.area());
    if gap < 1e-10 {
        return Ok(DensityResult {
            density: uniform(),
            eigenvalue: ritz.values[0],
            degenerate,
        });
    }
    let mut v = realify(&ritz.vectors[0]);
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    let (min, max) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    if min < -DENSITY_SIGN_TOL * max.abs() {
        return Err(SpectralError::MixedSigns { min, max });
    }
    v.iter_mut().for_each(|a| *a = a.max(0.0));
    let total: f64 = v.iter().sum();
    let scale = 1.0 / (total * grid.box_area());
    v.iter_mut().for_each(|a| *a *= scale);
    Ok(DensityResult {
        density: ScalarField::new(grid, v)?,
        eigenvalue: ritz.values[0],
        degenerate,
    })
}

/// `χᵢ = −ln|λᵢ| / τ`, infinite for `λ = 0` and zero for `|λ|` within rounding of one.
pub fn generator_rates(eigenvalues: &[C64], tau: f64) -> Vec<f64> {
    eigenvalues
        .iter()
        .map(|l| {
            let m = l.norm();
            if m == 0.0 {
                f64::INFINITY
            } else if (1.0 - m).abs() <= 1e-12 {
                0.0
            } else {
                (-m.ln() / tau).max(0.0)
            }
        })
        .collect()
}

/// The `count` smallest values of `m + n/ε²` over `m, n ≥ 0`, with multiplicity.
pub fn ou_reference_spectrum(epsilon: f64, count: usize) -> Vec<f64> {
    let inv = 1.0 / epsilon;
    let fast = inv * inv;
    let mut out = Vec::with_capacity(count * count.min(64));
    for n in 0..count {
        let base = n as f64 * fast;
        if out.len() >= count && base > *out.iter().max_by(|a: &&f64, b| a.total_cmp(b)).unwrap() {
            break;
        }
        for m in 0..count {
            out.push(m as f64 + base);
        }
    }
    out.sort_by(f64::total_cmp);
    out.truncate(count);
    out
}

/// Number of elementary steps making up flow time `tau`.
pub fn steps_for(tau: f64, dt: f64) -> Result<usize, SpectralError> {
    let k = (tau / dt).round();
    if k < 1.0 || ((tau / dt) - k).abs() > 1e-6 * k.max(1.0) {
        return Err(SpectralError::NotAMultiple { tau, dt });
    }
    Ok(k as usize)
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub tau: f64,
    pub steps: usize,
    pub eigenvalues: Vec<C64>,
    pub density: ScalarField,
    /// Second Koopman eigenfunction, if real.
    pub phi2: Option<ScalarField>,
    pub matrix: TransitionMatrix,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// `(density distance, φ₂ distance)` for each consecutive pair.
    pub differences: Vec<(f64, Option<f64>)>,
    /// Index into `entries` of the selected flow time.
    pub chosen: usize,
}

impl SweepReport {
    pub fn chosen_tau(&self) -> f64 {
        self.entries[self.chosen].tau
    }
}

/// Unit-L¹ copy of `f` (unchanged if `f` vanishes).
fn unit_l1(f: &ScalarField) -> ScalarField {
    let n = f.l1_norm();
    if n > 0.0 {
        f.map(|v| v / n)
    } else {
        f.clone()
    }
}

/// L¹ distance between unit-normalized, sign-aligned copies of two eigenfunctions.
pub fn eigenfunction_distance(a: &ScalarField, b: &ScalarField) -> Result<f64, FieldError> {
    let (a, mut b) = (unit_l1(a), unit_l1(b));
    let overlap: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    if overlap < 0.0 {
        b = b.map(|v| -v);
    }
    l1_distance(&a, &b)
}

/// Builds operators for increasing flow times and reports how the invariant
/// density and second eigenfunction change between neighbours.
///
/// The chosen flow time is the later member of the first consecutive pair
/// whose eigenfunction distance is at most `tolerance`, or the last one.
pub fn flow_time_sweep(
    model: &SystemModel,
    grid: &GridPartition,
    samples: usize,
    taus: &[f64],
    seed: u64,
    tolerance: f64,
) -> Result<SweepReport, SpectralError> {
    if taus.windows(2).any(|w| w[1] <= w[0]) || taus.is_empty() {
        return Err(SpectralError::NotIncreasing);
    }
    let steps: Vec<usize> = taus.iter().map(|&t| steps_for(t, model.dt())).collect::<Result<_, _>>()?;
    let entries: Vec<SweepEntry> = steps
        .par_iter()
        .zip(taus)
        .map(|(&k, &tau)| {
            let p = build_ulam(model, grid, samples, k, seed)?;
            let spec = leading_spectrum(&p, 3.min(p.dim()))?;
            let density = invariant_density(&p)?.density;
            Ok(SweepEntry {
                tau,
                steps: k,
                phi2: spec.eigenfunction(1),
                eigenvalues: spec.eigenvalues,
                density,
                matrix: p,
            })
        })
        .collect::<Result<_, SpectralError>>()?;
    let mut differences = Vec::new();
    for w in entries.windows(2) {
        let d = l1_distance(&unit_l1(&w[0].density), &unit_l1(&w[1].density))?;
        let e = match (&w[0].phi2, &w[1].phi2) {
            (Some(a), Some(b)) => Some(eigenfunction_distance(a, b)?),
            _ => None,
        };
        differences.push((d, e));
    }
    let chosen = differences
        .iter()
        .position(|(_, e)| e.is_some_and(|e| e <= tolerance))
        .map(|i| i + 1)
        .unwrap_or(entries.len() - 1);
    Ok(SweepReport {
        entries,
        differences,
        chosen,
    })
}
