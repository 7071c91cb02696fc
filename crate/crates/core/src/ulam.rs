//! Monte Carlo Ulam matrices for the annealed transfer operator.
//!
//! `P[i][j]` is the fraction of test points started uniformly in box `j`
//! that land in box `i` after the flow time. Columns are stored compressed.
//! Mass that leaves the domain goes to an absorbing outside state kept in a
//! separate per-column vector, so every column of `[P; outside]` sums to one.

use rayon::prelude::*;
use thiserror::Error;

use crate::fiber::{project_pi, FiberCurve, FiberError};
use crate::field::GridPartition;
use crate::models::{ModelError, Point, SystemModel};
use crate::rng::{pair_stream, RngStream};

const LANES: usize = 8;

#[derive(Debug, Error)]
pub enum UlamError {
    #[error("invalid Ulam parameters: {0}")]
    InvalidParameter(String),
    #[error("divergence in box {cell}, sample {sample}: {source}")]
    Divergence {
        cell: usize,
        sample: usize,
        #[source]
        source: ModelError,
    },
    #[error("{failed} of {total} fiber samples failed to project (limit 1%)")]
    ProjectionFailures { failed: usize, total: usize },
    #[error("fiber sample in bin {bin}, sample {sample}: {source}")]
    Fiber {
        bin: usize,
        sample: usize,
        #[source]
        source: FiberError,
    },
    #[error("matrix is malformed: {0}")]
    Malformed(String),
}

/// State space of a transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Grid(GridPartition),
    /// Equal arc-length bins along a fiber of the given length.
    FiberBins { nbins: usize, length: f64 },
    /// Abstract states with no geometry.
    Abstract(usize),
}

impl Domain {
    pub fn len(&self) -> usize {
        match self {
            Domain::Grid(g) => g.len(),
            Domain::FiberBins { nbins, .. } => *nbins,
            Domain::Abstract(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Column-stochastic sparse matrix with an absorbing outside state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    domain: Domain,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    values: Vec<f64>,
    outside: Vec<f64>,
    samples: usize,
    steps: usize,
    tau: f64,
    seed: u64,
}

impl TransitionMatrix {
    /// Assembles from per-column `(row, value)` lists. Rows inside a column
    /// may come in any order; duplicates are summed.
    pub fn from_columns(
        domain: Domain,
        columns: Vec<Vec<(usize, f64)>>,
        outside: Vec<f64>,
        samples: usize,
        steps: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self, UlamError> {
        let n = domain.len();
        if columns.len() != n || outside.len() != n {
            return Err(UlamError::Malformed(format!(
                "expected {n} columns, got {} (outside {})",
                columns.len(),
                outside.len()
            )));
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut rows = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|&(r, _)| r);
            for (r, v) in col {
                if r >= n {
                    return Err(UlamError::Malformed(format!("row {r} out of range {n}")));
                }
                if !(0.0..=1.0 + 1e-12).contains(&v) {
                    return Err(UlamError::Malformed(format!("entry {v} outside [0, 1]")));
                }
                if rows.len() > *col_ptr.last().unwrap() && *rows.last().unwrap() as usize == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    rows.push(r as u32);
                    values.push(v);
                }
            }
            col_ptr.push(rows.len());
        }
        Ok(Self {
            domain,
            col_ptr,
            rows,
            values,
            outside,
            samples,
            steps,
            tau,
            seed,
        })
    }

    /// Dense column-major input; convenient for small hand-built matrices.
    pub fn from_dense(n: usize, entries: &[f64]) -> Result<Self, UlamError> {
        if entries.len() != n * n {
            return Err(UlamError::Malformed("dense input must be n*n".into()));
        }
        let mut cols = vec![Vec::new(); n];
        let mut outside = vec![0.0; n];
        for (j, col) in cols.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                let v = entries[i + n * j];
                if v != 0.0 {
                    col.push((i, v));
                    s += v;
                }
            }
            outside[j] = (1.0 - s).max(0.0);
        }
        Self::from_columns(Domain::Abstract(n), cols, outside, 0, 1, 1.0, 0)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn grid(&self) -> Option<&GridPartition> {
        match &self.domain {
            Domain::Grid(g) => Some(g),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn samples_per_box(&self) -> usize {
        self.samples
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fraction of each column's mass that left the domain.
    pub fn outside(&self) -> &[f64] {
        &self.outside
    }

    pub fn outside_total(&self) -> f64 {
        self.outside.iter().sum()
    }

    pub fn column(&self, j: usize) -> (&[u32], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.rows[r.clone()], &self.values[r])
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.column(j);
        match rows.binary_search(&(i as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Column sums including the outside state.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| self.column(j).1.iter().sum::<f64>() + self.outside[j])
            .collect()
    }

    /// Iterates `(row, col, value)` in column-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim()).flat_map(move |j| {
            let (rows, vals) = self.column(j);
            rows.iter().zip(vals).map(move |(&i, &v)| (i as usize, j, v))
        })
    }

    /// `y = P x` (pushes densities forward).
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                y[i as usize] += v * xj;
            }
        }
    }

    /// `y = Pᵀ x` (the Koopman matrix acting on observables).
    pub fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let work = |(j, out): (usize, &mut f64)| {
            let (rows, vals) = self.column(j);
            *out = rows.iter().zip(vals).map(|(&i, &v)| v * x[i as usize]).sum();
        };
        if self.nnz() > 1 << 16 {
            y.par_iter_mut().enumerate().for_each(work);
        } else {
            y.iter_mut().enumerate().for_each(work);
        }
    }
}

/// Assembles the Ulam matrix of `model` on `grid` for `steps` elementary steps.
///
/// Sample `k` of box `j` draws its initial position and all of its noise from
/// the stream `(seed, pair_stream(j, k))`, so the result does not depend on
/// the number of worker threads.
pub fn build_ulam(
    model: &SystemModel,
    grid: &GridPartition,
    samples: usize,
    steps: usize,
    seed: u64,
) -> Result<TransitionMatrix, UlamError> {
    if samples == 0 || steps == 0 {
        return Err(UlamError::InvalidParameter(format!(
            "need samples >= 1 and steps >= 1, got {samples} and {steps}"
        )));
    }
    if model.dim() != 2 {
        return Err(UlamError::InvalidParameter("grid Ulam needs a 2-D model".into()));
    }
    let n = grid.len();
    let (w, h) = (grid.width(), grid.height());
    let inv = 1.0 / samples as f64;

    let columns: Vec<(Vec<(usize, f64)>, f64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let lo = grid.box_lo(j);
            let mut hits: Vec<u32> = Vec::with_capacity(samples);
            let mut out = 0usize;
            let mut start = 0;
            while start < samples {
                let live = (samples - start).min(LANES);
                let mut rngs: [RngStream; LANES] =
                    std::array::from_fn(|l| RngStream::new(seed, pair_stream(j as u64, (start + l.min(live - 1)) as u64)));
                let mut z: [Point; LANES] = std::array::from_fn(|l| {
                    let r = &mut rngs[l];
                    [lo[0] + w * r.uniform(), lo[1] + h * r.uniform()]
                });
                model.flow_lanes(&mut z, steps, &mut rngs).map_err(|(lane, source)| UlamError::Divergence {
                    cell: j,
                    sample: start + lane.min(live - 1),
                    source,
                })?;
                for p in &z[..live] {
                    match grid.box_index(*p) {
                        Some(i) => hits.push(i as u32),
                        None => out += 1,
                    }
                }
                start += live;
            }
            Ok((run_lengths(&mut hits, inv), out as f64 * inv))
        })
        .collect::<Result<_, UlamError>>()?;

    let (cols, outside): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
    TransitionMatrix::from_columns(
        Domain::Grid(grid.clone()),
        cols,
        outside,
        samples,
        steps,
        steps as f64 * model.dt(),
        seed,
    )
}

fn run_lengths(hits: &mut [u32], inv: f64) -> Vec<(usize, f64)> {
    hits.sort_unstable();
    let mut col = Vec::new();
    let mut k = 0;
    while k < hits.len() {
        let r = hits[k];
        let mut c = 0;
        while k < hits.len() && hits[k] == r {
            c += 1;
            k += 1;
        }
        col.push((r as usize, c as f64 * inv));
    }
    col
}

/// Ulam matrix of the projected dynamics on `nbins` equal arc-length bins.
///
/// Each sample starts uniform in arc length inside its bin, takes `steps`
/// elementary steps each followed by the projection, and is binned by its
/// final arc position. Failed projections count as outside mass.
pub fn build_fiber_ulam(
    model: &SystemModel,
    field: &crate::field::ScalarField,
    curve: &FiberCurve,
    nbins: usize,
    samples: usize,
    steps: usize,
    seed: u64,
) -> Result<TransitionMatrix, UlamError> {
    if samples == 0 || steps == 0 || nbins == 0 {
        return Err(UlamError::InvalidParameter(format!(
            "need nbins, samples, steps >= 1, got {nbins}, {samples}, {steps}"
        )));
    }
    let length = curve.length();
    if !(length > 0.0) {
        return Err(UlamError::InvalidParameter("fiber has zero length".into()));
    }
    let bin_w = length / nbins as f64;
    let inv = 1.0 / samples as f64;

    let columns: Vec<(Vec<(usize, f64)>, usize)> = (0..nbins)
        .into_par_iter()
        .map(|b| {
            let mut hits: Vec<u32> = Vec::with_capacity(samples);
            let mut failed = 0;
            'sample: for k in 0..samples {
                let mut rng = RngStream::new(seed, pair_stream(b as u64, k as u64));
                let s0 = (b as f64 + rng.uniform()) * bin_w;
                let mut z = curve.point_at(s0);
                let mut s = s0;
                for _ in 0..steps {
                    let tz = model.em_step(z, &mut rng).map_err(|source| UlamError::Divergence {
                        cell: b,
                        sample: k,
                        source,
                    })?;
                    match project_pi(tz, field, curve) {
                        Ok(p) => {
                            z = p.point;
                            s = p.arc;
                        }
                        Err(FiberError::ProjectionFailed(_)) | Err(FiberError::DegenerateGradient(_)) => {
                            failed += 1;
                            continue 'sample;
                        }
                        Err(source) => return Err(UlamError::Fiber { bin: b, sample: k, source }),
                    }
                }
                let bin = ((s / bin_w) as usize).min(nbins - 1);
                hits.push(bin as u32);
            }
            Ok((run_lengths(&mut hits, inv), failed))
        })
        .collect::<Result<_, UlamError>>()?;

    let failed: usize = columns.iter().map(|c| c.1).sum();
    let total = samples * nbins;
    if failed * 100 > total {
        return Err(UlamError::ProjectionFailures { failed, total });
    }
    let (cols, outside): (Vec<_>, Vec<_>) = columns
        .into_iter()
        .map(|(c, f)| (c, f as f64 * inv))
        .unzip();
    TransitionMatrix::from_columns(
        Domain::FiberBins { nbins, length },
        cols,
        outside,
        samples,
        steps,
        steps as f64 * model.dt(),
        seed,
    )
}

/// One-dimensional Ulam matrix on equal bins of `[lo, hi]` for a 1-D model.
pub fn build_interval_ulam(
    model: &SystemModel,
    lo: f64,
    hi: f64,
    nbins: usize,
    samples: usize,
    steps: usize,
    seed: u64,
) -> Result<TransitionMatrix, UlamError> {
    if samples == 0 || steps == 0 || nbins == 0 || !(lo < hi) {
        return Err(UlamError::InvalidParameter("bad interval Ulam parameters".into()));
    }
    let w = (hi - lo) / nbins as f64;
    let inv = 1.0 / samples as f64;
    let columns: Vec<(Vec<(usize, f64)>, f64)> = (0..nbins)
        .into_par_iter()
        .map(|b| {
            let mut hits = Vec::with_capacity(samples);
            let mut out = 0usize;
            for k in 0..samples {
                let mut rng = RngStream::new(seed, pair_stream(b as u64, k as u64));
                let x0 = lo + (b as f64 + rng.uniform()) * w;
                let x = model.flow([x0, 0.0], steps, &mut rng).map_err(|source| UlamError::Divergence {
                    cell: b,
                    sample: k,
                    source,
                })?[0];
                if (lo..=hi).contains(&x) {
                    hits.push((((x - lo) / w) as usize).min(nbins - 1) as u32);
                } else {
                    out += 1;
                }
            }
            Ok((run_lengths(&mut hits, inv), out as f64 * inv))
        })
        .collect::<Result<_, UlamError>>()?;
    let (cols, outside): (Vec<_>, Vec<_>) = columns.into_iter().unzip();
    TransitionMatrix::from_columns(
        Domain::FiberBins { nbins, length: hi - lo },
        cols,
        outside,
        samples,
        steps,
        steps as f64 * model.dt(),
        seed,
    )
}
