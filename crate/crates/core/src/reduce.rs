//! Reduced one-dimensional drift-diffusion models in a slow coordinate.
//!
//! The slow coordinate `θ` is the rank order of the second Koopman
//! eigenfunction rescaled to `[−4, 4]`. For each level `v`, an ensemble on
//! the level set `θ = v` is run `k` elementary steps; the mean and variance
//! of `θ(T^k z) − v` give the drift and diffusion tables `α_k`, `β_k`.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::fiber::{extract_fiber, sample_level_set, Fiber, FiberError};
use crate::field::ScalarField;
use crate::models::{ModelError, Point, SystemModel};
use crate::rng::{pair_stream, RngStream};
use crate::stats::TimeSeries;

pub const THETA_RANGE: f64 = 4.0;

/// Reduced trajectories leaving `[−6, 6]` are reported as divergent.
pub const REDUCED_BOUND: f64 = 6.0;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("sample needs at least 4 values, got {0}")]
    SampleTooSmall(usize),
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("particle {particle} diverged: {source}")]
    Divergence {
        particle: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Fiber(#[from] FiberError),
    #[error("only {0} fiber levels survived; need at least 2")]
    TooFewKnots(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("reduced trajectory left [-6, 6] at step {step} (value {value})")]
    ReducedDivergence { step: usize, value: f64 },
}

/// Rank-based reparameterization of an eigenfunction.
#[derive(Debug, Clone)]
pub struct SlowCoordinate {
    theta: ScalarField,
}

impl SlowCoordinate {
    /// Uses `theta` as given, without rank transformation.
    pub fn from_field(theta: ScalarField) -> Self {
        Self { theta }
    }

    pub fn field(&self) -> &ScalarField {
        &self.theta
    }

    pub fn eval(&self, z: Point) -> f64 {
        self.theta.interp_clamped(z)
    }
}

/// Ranks of the box values (ties broken by box index) mapped affinely onto
/// `[−4, 4]`.
pub fn rank_reparameterize(phi: &ScalarField) -> SlowCoordinate {
    let v = phi.values();
    let m = v.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut theta = vec![0.0; m];
    let span = (m - 1).max(1) as f64;
    for (r, &i) in order.iter().enumerate() {
        theta[i] = -THETA_RANGE + 2.0 * THETA_RANGE * r as f64 / span;
    }
    SlowCoordinate {
        theta: ScalarField::new(phi.grid().clone(), theta).expect("same grid, finite values"),
    }
}

/// Kolmogorov–Smirnov distance between the sample and the normal law with
/// the sample's own mean and standard deviation (`n − 1` normalization).
pub fn lilliefors_statistic(sample: &[f64]) -> Result<f64, ReduceError> {
    let n = sample.len();
    if n < 4 {
        return Err(ReduceError::SampleTooSmall(n));
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(ReduceError::ZeroVariance);
    }
    let mut z: Vec<f64> = sample.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let nf = n as f64;
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &zi)| {
            let f = normal.cdf(zi);
            ((i + 1) as f64 / nf - f).max(f - i as f64 / nf)
        })
        .fold(0.0, f64::max);
    Ok(d)
}

const LANES: usize = 8;

/// Advances every particle `steps` elementary steps with its own stream.
fn advance(model: &SystemModel, points: &mut [Point], rngs: &mut [RngStream], steps: usize) -> Result<(), ReduceError> {
    if steps == 0 {
        return Ok(());
    }
    points
        .par_chunks_mut(LANES)
        .zip(rngs.par_chunks_mut(LANES))
        .enumerate()
        .try_for_each(|(c, (pts, rs))| {
            if pts.len() == LANES {
                let mut z: [Point; LANES] = pts.try_into().unwrap();
                let mut r: [RngStream; LANES] = std::array::from_fn(|l| rs[l].clone());
                model
                    .flow_lanes(&mut z, steps, &mut r)
                    .map_err(|(lane, source)| ReduceError::Divergence {
                        particle: c * LANES + lane,
                        source,
                    })?;
                pts.copy_from_slice(&z);
                rs.clone_from_slice(&r);
            } else {
                for (l, (p, r)) in pts.iter_mut().zip(rs.iter_mut()).enumerate() {
                    *p = model.flow(*p, steps, r).map_err(|source| ReduceError::Divergence {
                        particle: c * LANES + l,
                        source,
                    })?;
                }
            }
            Ok(())
        })
}

fn ensemble(
    fiber: &Fiber,
    density: &ScalarField,
    q: usize,
    seed: u64,
    group: u64,
) -> (Vec<Point>, Vec<RngStream>) {
    let mut pick = RngStream::new(seed, pair_stream(group, u32::MAX as u64));
    let points = sample_level_set(fiber, density, q, &mut pick);
    let rngs = (0..q).map(|i| RngStream::new(seed, pair_stream(group, i as u64))).collect();
    (points, rngs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LillieforsCurve {
    /// `(k, statistic)`; `None` where the statistic is undefined.
    pub points: Vec<(usize, Option<f64>)>,
    pub best_k: usize,
    pub best_statistic: f64,
}

/// Propagates one density-weighted ensemble on `fiber` through the
/// ascending `k_grid` and records the Lilliefors statistic of `θ(T^k z)`.
pub fn select_k(
    model: &SystemModel,
    theta: &SlowCoordinate,
    fiber: &Fiber,
    density: &ScalarField,
    q: usize,
    k_grid: &[usize],
    seed: u64,
) -> Result<LillieforsCurve, ReduceError> {
    if k_grid.windows(2).any(|w| w[1] <= w[0]) || k_grid.is_empty() {
        return Err(ReduceError::InvalidParameter("k grid must be strictly ascending".into()));
    }
    let (mut pts, mut rngs) = ensemble(fiber, density, q, seed, 0);
    let mut done = 0;
    let mut points = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        advance(model, &mut pts, &mut rngs, k - done)?;
        done = k;
        let vals: Vec<f64> = pts.iter().map(|&p| theta.eval(p)).collect();
        let stat = if k == 0 {
            None
        } else {
            match lilliefors_statistic(&vals) {
                Ok(d) => Some(d),
                Err(ReduceError::ZeroVariance) => None,
                Err(e) => return Err(e),
            }
        };
        points.push((k, stat));
    }
    let (best_k, best_statistic) = points
        .iter()
        .filter_map(|&(k, s)| s.map(|s| (k, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(ReduceError::ZeroVariance)?;
    Ok(LillieforsCurve {
        points,
        best_k,
        best_statistic,
    })
}

/// Tabulated drift and diffusion in the slow coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    knots: Vec<f64>,
    alpha_k: Vec<f64>,
    beta_k: Vec<f64>,
    k: usize,
    dt: f64,
    /// Ensemble size and seed used for estimation (zero if built by hand).
    pub q: usize,
    pub seed: u64,
    /// Levels whose fiber could not be extracted.
    pub skipped: Vec<f64>,
}

impl ReducedModel {
    /// Tables of `α_k`, `β_k` for `k` elementary steps of length `dt`.
    pub fn new(knots: Vec<f64>, alpha_k: Vec<f64>, beta_k: Vec<f64>, k: usize, dt: f64) -> Result<Self, ReduceError> {
        let n = knots.len();
        if n < 2 || alpha_k.len() != n || beta_k.len() != n {
            return Err(ReduceError::InvalidParameter("need at least 2 knots and matching tables".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ReduceError::InvalidParameter("knots must be strictly increasing".into()));
        }
        if alpha_k.iter().chain(&beta_k).any(|v| !v.is_finite()) || beta_k.iter().any(|&b| b < 0.0) {
            return Err(ReduceError::InvalidParameter("tables must be finite with beta >= 0".into()));
        }
        if k == 0 || !(dt > 0.0) {
            return Err(ReduceError::InvalidParameter("k and dt must be positive".into()));
        }
        Ok(Self {
            knots,
            alpha_k,
            beta_k,
            k,
            dt,
            q: 0,
            seed: 0,
            skipped: Vec::new(),
        })
    }

    /// Model with the given rate functions sampled at `knots` (`k Δt = 1`).
    pub fn from_rates(knots: Vec<f64>, alpha: impl Fn(f64) -> f64, beta: impl Fn(f64) -> f64) -> Result<Self, ReduceError> {
        let a = knots.iter().map(|&v| alpha(v)).collect();
        let b = knots.iter().map(|&v| beta(v)).collect();
        Self::new(knots, a, b, 1, 1.0)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn alpha_k(&self) -> &[f64] {
        &self.alpha_k
    }

    pub fn beta_k(&self) -> &[f64] {
        &self.beta_k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `k Δt`, the model time spanned by one ensemble propagation.
    pub fn horizon(&self) -> f64 {
        self.k as f64 * self.dt
    }

    fn lookup(&self, table: &[f64], v: f64) -> f64 {
        let n = self.knots.len();
        if v <= self.knots[0] {
            return table[0];
        }
        if v >= self.knots[n - 1] {
            return table[n - 1];
        }
        let i = self.knots.partition_point(|&x| x <= v) - 1;
        let t = (v - self.knots[i]) / (self.knots[i + 1] - self.knots[i]);
        table[i] + t * (table[i + 1] - table[i])
    }

    /// Drift rate `α(v) = α_k(v) / (k Δt)`.
    pub fn alpha(&self, v: f64) -> f64 {
        self.lookup(&self.alpha_k, v) / self.horizon()
    }

    /// Diffusion rate `β(v) = β_k(v) / (k Δt)` before clamping.
    pub fn beta(&self, v: f64) -> f64 {
        self.lookup(&self.beta_k, v) / self.horizon()
    }
}

/// Estimates `α_k`, `β_k` on `n_fibers` equally spaced levels of `θ`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_reduced_model(
    model: &SystemModel,
    theta: &SlowCoordinate,
    density: &ScalarField,
    k: usize,
    q: usize,
    n_fibers: usize,
    seed: u64,
) -> Result<ReducedModel, ReduceError> {
    if n_fibers < 2 || q < 2 || k == 0 {
        return Err(ReduceError::InvalidParameter(format!(
            "need n_fibers >= 2, q >= 2, k >= 1; got {n_fibers}, {q}, {k}"
        )));
    }
    let levels: Vec<f64> = (0..n_fibers)
        .map(|j| -THETA_RANGE + 2.0 * THETA_RANGE * j as f64 / (n_fibers - 1) as f64)
        .collect();
    let rows: Vec<Result<Option<(f64, f64, f64)>, ReduceError>> = levels
        .par_iter()
        .enumerate()
        .map(|(j, &v)| {
            let fiber = match extract_fiber(theta.field(), v) {
                Ok(f) => f,
                Err(FiberError::LevelOutOfRange { .. }) | Err(FiberError::EmptyContour(_)) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let (mut pts, mut rngs) = ensemble(&fiber, density, q, seed, j as u64);
            advance(model, &mut pts, &mut rngs, k)?;
            let d: Vec<f64> = pts.iter().map(|&p| theta.eval(p) - v).collect();
            let mean = d.iter().sum::<f64>() / q as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / q as f64;
            Ok(Some((v, mean, var)))
        })
        .collect();
    let mut knots = Vec::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut skipped = Vec::new();
    for (row, &v) in rows.into_iter().zip(&levels) {
        match row? {
            Some((v, m, s)) => {
                knots.push(v);
                a.push(m);
                b.push(s);
            }
            None => skipped.push(v),
        }
    }
    if knots.len() < 2 {
        return Err(ReduceError::TooFewKnots(knots.len()));
    }
    let mut rm = ReducedModel::new(knots, a, b, k, model.dt())?;
    rm.q = q;
    rm.seed = seed;
    rm.skipped = skipped;
    Ok(rm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRun {
    /// Starting value followed by every `record_every`-th state.
    pub series: TimeSeries,
    pub final_state: f64,
    /// Steps at which the interpolated diffusion was negative and clamped.
    pub clamped: usize,
}

/// Euler–Maruyama for `dv = α(v) dt + √β(v) dW`.
pub fn simulate_reduced(
    rm: &ReducedModel,
    v0: f64,
    dt: f64,
    steps: usize,
    record_every: usize,
    seed: u64,
) -> Result<ReducedRun, ReduceError> {
    if !(dt > 0.0) || record_every == 0 {
        return Err(ReduceError::InvalidParameter("dt and record_every must be positive".into()));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut v = v0;
    let mut values = Vec::with_capacity(steps / record_every + 1);
    values.push(v);
    let mut clamped = 0;
    for n in 1..=steps {
        let a = rm.alpha(v);
        let mut b = rm.beta(v);
        if b < 0.0 {
            b = 0.0;
            clamped += 1;
        }
        v += a * dt + (b * dt).sqrt() * rng.gaussian();
        if !(v.abs() <= REDUCED_BOUND) {
            return Err(ReduceError::ReducedDivergence { step: n, value: v });
        }
        if n % record_every == 0 {
            values.push(v);
        }
    }
    Ok(ReducedRun {
        series: TimeSeries::new(values, dt * record_every as f64).expect("finite values"),
        final_state: v,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridPartition;
    use proptest::prelude::*;

    #[test]
    fn rank_example() {
        let g = GridPartition::new([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap();
        let phi = ScalarField::new(g, vec![0.1, 0.5, 0.3, 0.2]).unwrap();
        let th = rank_reparameterize(&phi);
        let want = [-4.0, 4.0, 4.0 / 3.0, -4.0 / 3.0];
        for (a, b) in th.field().values().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_values_rescale_affinely() {
        let g = GridPartition::new([0.0, 0.0], [1.0, 1.0], 5, 4).unwrap();
        let phi = ScalarField::new(g, (0..20).map(|i| 0.5 * i as f64 - 3.0).collect()).unwrap();
        let th = rank_reparameterize(&phi);
        for (i, t) in th.field().values().iter().enumerate() {
            assert!((t - (-4.0 + 8.0 * i as f64 / 19.0)).abs() < 1e-12);
        }
    }

    /// Empirical CDF distance computed by direct counting.
    fn ks_by_counting(sample: &[f64]) -> f64 {
        let n = sample.len() as f64;
        let mean = sample.iter().sum::<f64>() / n;
        let sd = (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let normal = Normal::new(mean, sd).unwrap();
        let mut d: f64 = 0.0;
        for &x in sample {
            let below = sample.iter().filter(|&&y| y < x).count() as f64 / n;
            let at_most = sample.iter().filter(|&&y| y <= x).count() as f64 / n;
            let f = normal.cdf(x);
            d = d.max((at_most - f).abs()).max((f - below).abs());
        }
        d
    }

    #[test]
    fn lilliefors_on_normal_draws() {
        let mut r = RngStream::new(11, 0);
        let s: Vec<f64> = (0..100_000).map(|_| r.gaussian()).collect();
        let d = lilliefors_statistic(&s).unwrap();
        assert!(d < 0.005, "D = {d}");
        let small: Vec<f64> = s[..2000].to_vec();
        assert!((lilliefors_statistic(&small).unwrap() - ks_by_counting(&small)).abs() < 1e-12);
    }

    #[test]
    fn lilliefors_two_point() {
        let s: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let d = lilliefors_statistic(&s).unwrap();
        // sd = sqrt(n/(n-1)), so the atoms sit just inside ±1 standard deviation.
        let sd = (1000.0f64 / 999.0).sqrt();
        let expected = 0.5 - Normal::standard().cdf(-1.0 / sd);
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 0.34).abs() < 0.01);
        assert!(matches!(lilliefors_statistic(&[2.0; 10]), Err(ReduceError::ZeroVariance)));
    }

    #[test]
    fn deterministic_reduced_step() {
        let rm = ReducedModel::from_rates(vec![-4.0, 4.0], |v| -v, |_| 0.0).unwrap();
        let run = simulate_reduced(&rm, 1.0, 0.1, 1, 1, 0).unwrap();
        assert!((run.final_state - 0.9).abs() < 1e-15);
        assert_eq!(run.series.values(), &[1.0, run.final_state]);
    }

    #[test]
    fn reduced_ou_stationary_variance() {
        let rm = ReducedModel::from_rates(vec![-4.0, 0.0, 4.0], |v| -v, |_| 1.0).unwrap();
        let run = simulate_reduced(&rm, 0.0, 0.01, 1_000_000, 1, 5).unwrap();
        let v = run.series.values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((var - 0.5).abs() < 0.025, "var = {var}");
    }

    #[test]
    fn tables_extend_constantly() {
        let rm = ReducedModel::new(vec![-1.0, 1.0], vec![0.2, -0.2], vec![0.1, 0.3], 10, 0.01).unwrap();
        assert!((rm.alpha(-3.0) - 2.0).abs() < 1e-12);
        assert!((rm.alpha(0.0)).abs() < 1e-12);
        assert!((rm.beta(5.0) - 3.0).abs() < 1e-12);
        assert!(ReducedModel::new(vec![0.0, 0.0], vec![0.0; 2], vec![0.0; 2], 1, 1.0).is_err());
    }

    #[test]
    fn reduced_divergence_is_reported() {
        let rm = ReducedModel::from_rates(vec![-4.0, 4.0], |_| 50.0, |_| 0.0).unwrap();
        assert!(matches!(
            simulate_reduced(&rm, 0.0, 0.1, 100, 1, 0),
            Err(ReduceError::ReducedDivergence { .. })
        ));
    }

    proptest! {
        #[test]
        fn theta_is_strictly_monotone(v in prop::collection::vec(-5.0f64..5.0, 16)) {
            let g = GridPartition::new([0.0, 0.0], [1.0, 1.0], 4, 4).unwrap();
            let phi = ScalarField::new(g, v.clone()).unwrap();
            let th = rank_reparameterize(&phi);
            let t = th.field().values();
            for i in 0..16 {
                for j in 0..16 {
                    if v[i] < v[j] {
                        prop_assert!(t[i] < t[j]);
                    }
                }
            }
            let mut sorted = t.to_vec();
            sorted.sort_by(f64::total_cmp);
            for (r, s) in sorted.iter().enumerate() {
                prop_assert_eq!(*s, -4.0 + 8.0 * r as f64 / 15.0);
            }
        }
    }
}
