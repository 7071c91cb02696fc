//! Black-box stochastic systems advanced by Euler–Maruyama.
//!
//! A [`SystemModel`] is only ever queried through [`SystemModel::em_step`] and
//! [`SystemModel::flow`]; the analysis code never looks at the drift directly.
//! States are stored as `[f64; 2]`; one-dimensional models simply leave the
//! second coordinate at zero.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::rng::RngStream;

/// A point of the (at most two-dimensional) state space.
pub type Point = [f64; 2];

/// Coordinates beyond this magnitude are treated as a blown-up integration.
pub const DIVERGENCE_LIMIT: f64 = 1.0e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("integration diverged after {step} steps at state ({:e}, {:e})", state[0], state[1])]
    Divergence { state: Point, step: usize },
}

/// Vector fields understood by the integrator.
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// Constant velocity.
    Constant(Point),
    /// `-rates ⊙ x`, independent linear relaxation per coordinate.
    Linear { rates: Point },
    /// `(x - x³ + (a/ε) y, (y - y³)/ε²)`.
    Skew { epsilon: f64, a: f64 },
    Custom(Arc<dyn Fn(Point) -> Point + Send + Sync>),
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Zero => write!(f, "Zero"),
            Drift::Constant(c) => write!(f, "Constant({c:?})"),
            Drift::Linear { rates } => write!(f, "Linear {{ rates: {rates:?} }}"),
            Drift::Skew { epsilon, a } => write!(f, "Skew {{ epsilon: {epsilon}, a: {a} }}"),
            Drift::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Drift {
    pub fn eval(&self, u: Point) -> Point {
        struct Eval(Point);
        impl DriftKernel for Eval {
            type Out = Point;
            fn run<F: Fn(Point) -> Point>(self, f: F) -> Point {
                f(self.0)
            }
        }
        dispatch(self, Eval(u))
    }
}

/// Something that wants to run with a concrete, inlinable drift closure.
trait DriftKernel {
    type Out;
    fn run<F: Fn(Point) -> Point>(self, f: F) -> Self::Out;
}

fn dispatch<K: DriftKernel>(drift: &Drift, kernel: K) -> K::Out {
    match drift {
        Drift::Zero => kernel.run(|_| [0.0, 0.0]),
        Drift::Constant(c) => {
            let c = *c;
            kernel.run(move |_| c)
        }
        Drift::Linear { rates } => {
            let r = *rates;
            kernel.run(move |u: Point| [-r[0] * u[0], -r[1] * u[1]])
        }
        Drift::Skew { epsilon, a } => {
            let coupling = a / epsilon;
            let fast = 1.0 / (epsilon * epsilon);
            kernel.run(move |u: Point| {
                let (x, y) = (u[0], u[1]);
                [x - x * x * x + coupling * y, (y - y * y * y) * fast]
            })
        }
        Drift::Custom(f) => kernel.run(|u| f(u)),
    }
}

/// The diffeomorphism `g = h ∘ R` with `h(x, y) = (x + b y², y)` and `R` a
/// clockwise rotation by `angle` radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distortion {
    pub angle: f64,
    pub bend: f64,
}

impl Distortion {
    pub fn new(angle: f64, bend: f64) -> Self {
        Self { angle, bend }
    }

    /// One radian clockwise, then `x + 0.3 y²`.
    pub fn standard() -> Self {
        Self::new(1.0, 0.3)
    }

    pub fn rotate(&self, z: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        [z[0] * c + z[1] * s, -z[0] * s + z[1] * c]
    }

    pub fn unrotate(&self, z: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        [z[0] * c - z[1] * s, z[0] * s + z[1] * c]
    }

    pub fn bend(&self, z: Point) -> Point {
        [z[0] + self.bend * z[1] * z[1], z[1]]
    }

    pub fn unbend(&self, z: Point) -> Point {
        [z[0] - self.bend * z[1] * z[1], z[1]]
    }

    pub fn forward(&self, z: Point) -> Point {
        self.bend(self.rotate(z))
    }

    pub fn inverse(&self, z: Point) -> Point {
        self.unrotate(self.unbend(z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Periodic {
    lo: f64,
    hi: f64,
}

/// A stochastic system `dz = drift(z) dt + noise ⊙ dW`, optionally observed
/// through a coordinate change.
#[derive(Clone, Debug)]
pub struct SystemModel {
    dim: usize,
    dt: f64,
    drift: Drift,
    noise: Point,
    transform: Option<Distortion>,
    periodic: [Option<Periodic>; 2],
}

impl SystemModel {
    pub fn new(dim: usize, dt: f64, drift: Drift, noise: Point) -> Result<Self, ModelError> {
        if !(1..=2).contains(&dim) {
            return Err(ModelError::InvalidParameter(format!(
                "dimension must be 1 or 2, got {dim}"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if noise.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(ModelError::InvalidParameter(format!(
                "noise amplitudes must be finite and non-negative, got {noise:?}"
            )));
        }
        let mut noise = noise;
        if dim == 1 {
            noise[1] = 0.0;
        }
        Ok(Self {
            dim,
            dt,
            drift,
            noise,
            transform: None,
            periodic: [None, None],
        })
    }

    /// Two independent Ornstein–Uhlenbeck processes, the second `ε⁻²` times faster.
    pub fn ou_pair(epsilon: f64, dt: f64) -> Result<Self, ModelError> {
        check_epsilon(epsilon)?;
        Self::new(
            2,
            dt,
            Drift::Linear {
                rates: [1.0, 1.0 / (epsilon * epsilon)],
            },
            [1.0, 1.0 / epsilon],
        )
    }

    /// `dx = -x dt + dW` in one dimension.
    pub fn ou_1d(dt: f64) -> Result<Self, ModelError> {
        Self::new(1, dt, Drift::Linear { rates: [1.0, 0.0] }, [1.0, 0.0])
    }

    /// The skew-product double-well system with noise only in the fast coordinate.
    pub fn skew(epsilon: f64, a: f64, sigma: f64, dt: f64) -> Result<Self, ModelError> {
        check_epsilon(epsilon)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        Self::new(2, dt, Drift::Skew { epsilon, a }, [0.0, sigma / epsilon])
    }

    /// Zero drift and zero noise.
    pub fn identity(dim: usize, dt: f64) -> Result<Self, ModelError> {
        Self::new(dim, dt, Drift::Zero, [0.0, 0.0])
    }

    pub fn with_transform(mut self, g: Distortion) -> Self {
        self.transform = Some(g);
        self
    }

    /// Wraps coordinate `axis` periodically onto `[lo, hi)` after each step.
    pub fn with_periodic(mut self, axis: usize, lo: f64, hi: f64) -> Result<Self, ModelError> {
        if axis >= self.dim || !(lo < hi) {
            return Err(ModelError::InvalidParameter(format!(
                "bad periodic axis {axis} on [{lo}, {hi})"
            )));
        }
        self.periodic[axis] = Some(Periodic { lo, hi });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn noise(&self) -> Point {
        self.noise
    }

    pub fn transform(&self) -> Option<&Distortion> {
        self.transform.as_ref()
    }

    /// Maps observed coordinates back to the coordinates the drift is written in.
    pub fn to_raw(&self, z: Point) -> Point {
        match &self.transform {
            Some(g) => g.inverse(z),
            None => z,
        }
    }

    pub fn from_raw(&self, u: Point) -> Point {
        match &self.transform {
            Some(g) => g.forward(u),
            None => u,
        }
    }

    /// One Euler–Maruyama step. With a transform `g` this is `g ∘ step ∘ g⁻¹`.
    ///
    /// A standard normal is drawn only for coordinates with non-zero noise
    /// amplitude, in coordinate order.
    pub fn em_step(&self, z: Point, rng: &mut RngStream) -> Result<Point, ModelError> {
        self.flow(z, 1, rng)
    }

    /// `steps` consecutive Euler–Maruyama steps.
    ///
    /// The coordinate change is applied once around the whole run, which equals
    /// per-step conjugation up to rounding of `g⁻¹ ∘ g`.
    pub fn flow(&self, z: Point, steps: usize, rng: &mut RngStream) -> Result<Point, ModelError> {
        let mut u = [self.to_raw(z)];
        let mut rngs = [rng.clone()];
        let res = self.flow_raw_lanes(&mut u, steps, &mut rngs);
        *rng = rngs[0].clone();
        res.map_err(|(_, e)| e)?;
        Ok(self.from_raw(u[0]))
    }

    /// `count` states spaced `stride` elementary steps apart, starting after
    /// the first stride from `z0`.
    pub fn sample_path(&self, z0: Point, stride: usize, count: usize, rng: &mut RngStream) -> Result<Vec<Point>, ModelError> {
        let mut u = [self.to_raw(z0)];
        let mut rngs = [rng.clone()];
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            self.flow_raw_lanes(&mut u, stride, &mut rngs).map_err(|(_, e)| e)?;
            out.push(self.from_raw(u[0]));
        }
        *rng = rngs[0].clone();
        Ok(out)
    }

    /// Advances `L` independent states in lockstep; each lane uses its own
    /// stream and produces bit-identical results to [`SystemModel::flow`].
    /// On divergence returns the failing lane.
    pub fn flow_lanes<const L: usize>(
        &self,
        z: &mut [Point; L],
        steps: usize,
        rngs: &mut [RngStream; L],
    ) -> Result<(), (usize, ModelError)> {
        for p in z.iter_mut() {
            *p = self.to_raw(*p);
        }
        self.flow_raw_lanes(z, steps, rngs)?;
        for p in z.iter_mut() {
            *p = self.from_raw(*p);
        }
        Ok(())
    }

    fn flow_raw_lanes<const L: usize>(
        &self,
        u: &mut [Point; L],
        steps: usize,
        rngs: &mut [RngStream; L],
    ) -> Result<(), (usize, ModelError)> {
        struct Lanes<'a, const L: usize> {
            model: &'a SystemModel,
            u: &'a mut [Point; L],
            steps: usize,
            rngs: &'a mut [RngStream; L],
        }
        impl<const L: usize> DriftKernel for Lanes<'_, L> {
            type Out = Result<(), (usize, ModelError)>;
            fn run<F: Fn(Point) -> Point>(self, f: F) -> Self::Out {
                let Lanes {
                    model,
                    u,
                    steps,
                    rngs,
                } = self;
                let wrap = model.periodic.iter().any(Option::is_some);
                match (model.noise[0] != 0.0, model.noise[1] != 0.0, wrap) {
                    (true, true, false) => lockstep::<L, true, true, false>(model, &f, u, steps, rngs),
                    (false, true, false) => lockstep::<L, false, true, false>(model, &f, u, steps, rngs),
                    (true, false, false) => lockstep::<L, true, false, false>(model, &f, u, steps, rngs),
                    (false, false, false) => lockstep::<L, false, false, false>(model, &f, u, steps, rngs),
                    (a, b, _) => match (a, b) {
                        (true, true) => lockstep::<L, true, true, true>(model, &f, u, steps, rngs),
                        (false, true) => lockstep::<L, false, true, true>(model, &f, u, steps, rngs),
                        (true, false) => lockstep::<L, true, false, true>(model, &f, u, steps, rngs),
                        (false, false) => lockstep::<L, false, false, true>(model, &f, u, steps, rngs),
                    },
                }
            }
        }
        dispatch(
            &self.drift,
            Lanes {
                model: self,
                u,
                steps,
                rngs,
            },
        )
    }
}

#[inline(always)]
fn lockstep<const L: usize, const NX: bool, const NY: bool, const WRAP: bool>(
    model: &SystemModel,
    f: &impl Fn(Point) -> Point,
    u: &mut [Point; L],
    steps: usize,
    rngs: &mut [RngStream; L],
) -> Result<(), (usize, ModelError)> {
    let dt = model.dt;
    let sd = [model.noise[0] * dt.sqrt(), model.noise[1] * dt.sqrt()];
    let wrap = model.periodic;
    let bounded = |n: &Point| n[0].abs() <= DIVERGENCE_LIMIT && n[1].abs() <= DIVERGENCE_LIMIT;
    for step in 0..steps {
        let mut ok = true;
        for lane in 0..L {
            let p = u[lane];
            let d = f(p);
            let mut n = [p[0] + d[0] * dt, p[1] + d[1] * dt];
            if NX {
                n[0] += sd[0] * rngs[lane].gaussian();
            }
            if NY {
                n[1] += sd[1] * rngs[lane].gaussian();
            }
            if WRAP {
                for (axis, w) in wrap.iter().enumerate() {
                    if let Some(w) = w {
                        n[axis] = w.lo + (n[axis] - w.lo).rem_euclid(w.hi - w.lo);
                    }
                }
            }
            ok &= bounded(&n);
            u[lane] = n;
        }
        if !ok {
            let lane = u.iter().position(|n| !bounded(n)).unwrap_or(0);
            return Err((
                lane,
                ModelError::Divergence {
                    state: u[lane],
                    step: step + 1,
                },
            ));
        }
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<(), ModelError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ModelError::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn deterministic_euler_step() {
        let m = SystemModel::new(1, 0.1, Drift::Linear { rates: [1.0, 0.0] }, [0.0, 0.0]).unwrap();
        let mut rng = RngStream::new(0, 0);
        let z = m.em_step([1.0, 0.0], &mut rng).unwrap();
        assert_abs_diff_eq!(z[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn skew_step_without_noise() {
        let dt = 2e-6;
        let m = SystemModel::skew(0.01, 0.02, 0.0, dt).unwrap();
        let d = m.drift().eval([1.0, 1.0]);
        assert_abs_diff_eq!(d[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-12);
        let mut rng = RngStream::new(0, 0);
        let z = m.em_step([1.0, 1.0], &mut rng).unwrap();
        assert_abs_diff_eq!(z[0], 1.0 + 2.0 * dt, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn skew_parameters() {
        let m = SystemModel::skew(0.01, 0.02, 0.113f64.sqrt(), 2e-6).unwrap();
        assert_abs_diff_eq!(m.noise()[1], 0.113f64.sqrt() / 0.01, epsilon = 1e-12);
        assert_eq!(m.noise()[0], 0.0);
        let slow = SystemModel::skew(1.0, 5.0, 0.113f64.sqrt(), 2e-4).unwrap();
        let d = slow.drift().eval([0.0, 1.0]);
        assert_abs_diff_eq!(d[0], 5.0, epsilon = 1e-12);
        assert!(SystemModel::skew(0.0, 1.0, 1.0, 1e-3).is_err());
        assert!(SystemModel::skew(-1.0, 1.0, 1.0, 1e-3).is_err());
    }

    #[test]
    fn ou_pair_construction() {
        let m = SystemModel::ou_pair(0.1, 1e-3).unwrap();
        assert_abs_diff_eq!(m.noise()[1], 10.0, epsilon = 1e-12);
        assert_eq!(m.drift().eval([0.0, 0.0]), [0.0, 0.0]);
        let d = m.drift().eval([1.0, 1.0]);
        assert_abs_diff_eq!(d[1], -100.0, epsilon = 1e-9);
        let same = SystemModel::ou_pair(1.0, 1e-3).unwrap();
        let d = same.drift().eval([0.7, 0.7]);
        assert_eq!(d[0], d[1]);
        assert_eq!(same.noise()[0], same.noise()[1]);
        assert!(SystemModel::ou_pair(0.0, 1e-3).is_err());
    }

    #[test]
    fn distortion_pieces() {
        let g = Distortion::standard();
        assert_abs_diff_eq!(g.bend([0.0, 1.0])[0], 0.3, epsilon = 1e-15);
        let r = g.rotate([1.0, 0.0]);
        assert_abs_diff_eq!(r[0], 1f64.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], -(1f64.sin()), epsilon = 1e-15);
        let mut rng = RngStream::new(1, 2);
        for _ in 0..1000 {
            let z = [rng.uniform_in(-4.0, 4.0), rng.uniform_in(-4.0, 4.0)];
            let back = g.forward(g.inverse(z));
            assert_abs_diff_eq!(back[0], z[0], epsilon = 1e-12);
            assert_abs_diff_eq!(back[1], z[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn conjugated_step_matches_definition() {
        let g = Distortion::standard();
        let raw = SystemModel::skew(0.01, 0.02, 0.113f64.sqrt(), 2e-6).unwrap();
        let dist = raw.clone().with_transform(g);
        let z = [0.4, -0.9];
        let mut a = RngStream::new(5, 5);
        let mut b = RngStream::new(5, 5);
        let lhs = dist.em_step(z, &mut a).unwrap();
        let rhs = g.forward(raw.em_step(g.inverse(z), &mut b).unwrap());
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn divergence_is_reported() {
        let m = SystemModel::skew(0.01, 0.02, 0.0, 1e-2).unwrap();
        let mut rng = RngStream::new(0, 0);
        let err = m.flow([3.0, 3.0], 100, &mut rng).unwrap_err();
        assert!(matches!(err, ModelError::Divergence { .. }), "{err}");
    }

    #[test]
    fn lanes_match_single_flow() {
        let m = SystemModel::ou_pair(0.3, 1e-3)
            .unwrap()
            .with_transform(Distortion::standard());
        let starts = [[0.1, 0.2], [-1.0, 0.5], [2.0, -2.0], [0.0, 0.0]];
        let mut lanes = starts;
        let mut rngs: [RngStream; 4] = std::array::from_fn(|i| RngStream::new(9, i as u64));
        m.flow_lanes(&mut lanes, 50, &mut rngs).unwrap();
        for (i, s) in starts.iter().enumerate() {
            let mut r = RngStream::new(9, i as u64);
            let single = m.flow(*s, 50, &mut r).unwrap();
            assert_eq!(single, lanes[i]);
        }
    }

    #[test]
    fn sample_path_continues_one_run() {
        let m = SystemModel::skew(0.1, 0.02, 0.3, 1e-4).unwrap();
        let path = m.sample_path([1.0, 1.0], 30, 5, &mut RngStream::new(4, 0)).unwrap();
        assert_eq!(path.len(), 5);
        let end = m.flow([1.0, 1.0], 150, &mut RngStream::new(4, 0)).unwrap();
        assert_eq!(path[4], end);
    }

    #[test]
    fn periodic_wrap() {
        let m = SystemModel::new(2, 1.0, Drift::Constant([0.5, 0.0]), [0.0, 0.0])
            .unwrap()
            .with_periodic(0, -1.0, 1.0)
            .unwrap();
        let mut rng = RngStream::new(0, 0);
        let z = m.em_step([0.75, 0.0], &mut rng).unwrap();
        assert_abs_diff_eq!(z[0], -0.75, epsilon = 1e-15);
    }

    #[test]
    fn ou_ensemble_moments() {
        // Analytic OU moments at t = 1 from x0 = 1.
        let dt = 1e-3;
        let m = SystemModel::ou_1d(dt).unwrap();
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for k in 0..n {
            let mut rng = RngStream::new(42, k);
            let x = m.flow([1.0, 0.0], 1000, &mut rng).unwrap()[0];
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let exact_mean = (-1.0f64).exp();
        let exact_var = (1.0 - (-2.0f64).exp()) / 2.0;
        let se_mean = (exact_var / n as f64).sqrt();
        let se_var = exact_var * (2.0 / n as f64).sqrt();
        assert!((mean - exact_mean).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - exact_var).abs() < 3.0 * se_var, "var {var}");
    }
}
