//! Level sets of eigenfunctions, the gradient-line projection onto them and
//! the projected fiber dynamics `π ∘ T`.

mod contour;
pub mod detect;

use std::collections::HashMap;

use thiserror::Error;

use crate::field::ScalarField;
use crate::models::{ModelError, Point, SystemModel};
use crate::rng::{pair_stream, RngStream};

pub use detect::{detect_multiscale, ComponentChoice, DetectConfig, DetectError, MultiscaleReport};

/// Gradients at or below this norm are treated as degenerate.
pub const MIN_GRADIENT: f64 = 1e-8;

/// Default projection search radius in cell diagonals.
pub const DEFAULT_SEARCH_DIAGONALS: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiberError {
    #[error("level {level} is not strictly inside the field range [{min}, {max}]")]
    LevelOutOfRange { level: f64, min: f64, max: f64 },
    #[error("level set at {0} has no component with at least 3 vertices")]
    EmptyContour(f64),
    #[error("fiber component {index} requested but only {available} exist")]
    NoSuchComponent { index: usize, available: usize },
    #[error("gradient vanishes at ({}, {})", .0[0], .0[1])]
    DegenerateGradient(Point),
    #[error("gradient line through ({}, {}) misses the fiber within the search radius", .0[0], .0[1])]
    ProjectionFailed(Point),
    #[error("too few valid samples: {valid} of {requested}")]
    TooFewSamples { valid: usize, requested: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One connected polyline of a level set, arc-length parameterized.
#[derive(Debug, Clone)]
pub struct FiberCurve {
    level: f64,
    vertices: Vec<Point>,
    arc: Vec<f64>,
    closed: bool,
    origin: Point,
    cell: [f64; 2],
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl FiberCurve {
    fn new(level: f64, mut vertices: Vec<Point>, closed: bool, field: &ScalarField) -> Self {
        if closed && vertices.len() > 1 {
            // Store the closing vertex explicitly so segment k is (k, k+1).
            let first = vertices[0];
            let last = *vertices.last().unwrap();
            if first != last {
                vertices.push(first);
            }
        }
        let mut arc = Vec::with_capacity(vertices.len());
        let mut s = 0.0;
        arc.push(0.0);
        for w in vertices.windows(2) {
            s += dist(w[0], w[1]);
            arc.push(s);
        }
        let g = field.grid();
        let origin = g.center_of(0, 0);
        let cell = [g.width(), g.height()];
        let mut curve = Self {
            level,
            vertices,
            arc,
            closed,
            origin,
            cell,
            cells: HashMap::new(),
        };
        for k in 0..curve.segments() {
            let (a, b) = (curve.vertices[k], curve.vertices[k + 1]);
            let key = curve.cell_of([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
            curve.cells.entry(key).or_default().push(k as u32);
        }
        curve
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// Vertices in traversal order. A closed curve repeats its first vertex at the end.
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Cumulative arc length at each vertex.
    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap_or(&0.0)
    }

    pub fn segments(&self) -> usize {
        self.vertices.len().saturating_sub(1)
    }

    /// Point at arc position `s`, clamped to `[0, length]` (wrapped if closed).
    pub fn point_at(&self, s: f64) -> Point {
        let len = self.length();
        let s = if self.closed && len > 0.0 {
            s.rem_euclid(len)
        } else {
            s.clamp(0.0, len)
        };
        let k = match self.arc.partition_point(|&a| a <= s) {
            0 => 0,
            i => (i - 1).min(self.segments() - 1),
        };
        let (a, b) = (self.vertices[k], self.vertices[k + 1]);
        let seg = self.arc[k + 1] - self.arc[k];
        let t = if seg > 0.0 { (s - self.arc[k]) / seg } else { 0.0 };
        lerp(a, b, t.clamp(0.0, 1.0))
    }

    fn cell_of(&self, p: Point) -> (i64, i64) {
        (
            ((p[0] - self.origin[0]) / self.cell[0]).floor() as i64,
            ((p[1] - self.origin[1]) / self.cell[1]).floor() as i64,
        )
    }

    /// Nearest intersection (smallest `|t|`) of `z + t d` with the polyline,
    /// searching rings of cells out to `radius`.
    fn intersect_line(&self, z: Point, d: Point, radius: f64) -> Option<Projected> {
        let dn = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let step = self.cell[0].min(self.cell[1]);
        let (ci, cj) = self.cell_of(z);
        let max_ring = (radius / step).ceil() as i64 + 1;
        let mut best: Option<(f64, Projected)> = None;
        for r in 0..=max_ring {
            for (i, j) in ring(ci, cj, r) {
                let Some(segs) = self.cells.get(&(i, j)) else {
                    continue;
                };
                for &k in segs {
                    let k = k as usize;
                    if let Some((t, s)) = line_segment(z, d, self.vertices[k], self.vertices[k + 1]) {
                        let dist = t.abs() * dn;
                        if dist <= radius && best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                            let p = lerp(self.vertices[k], self.vertices[k + 1], s);
                            let arc = self.arc[k] + s * (self.arc[k + 1] - self.arc[k]);
                            best = Some((dist, Projected { point: p, arc }));
                        }
                    }
                }
            }
            // Every intersection closer than r cell widths lies in rings 0..=r.
            if let Some((bd, _)) = &best {
                if *bd <= r as f64 * step {
                    break;
                }
            }
        }
        best.map(|(_, p)| p)
    }
}

/// All components of one level set.
#[derive(Debug, Clone)]
pub struct Fiber {
    level: f64,
    components: Vec<FiberCurve>,
}

impl Fiber {
    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn components(&self) -> &[FiberCurve] {
        &self.components
    }

    pub fn component(&self, index: usize) -> Result<&FiberCurve, FiberError> {
        self.components.get(index).ok_or(FiberError::NoSuchComponent {
            index,
            available: self.components.len(),
        })
    }

    pub fn longest(&self) -> &FiberCurve {
        self.components
            .iter()
            .max_by(|a, b| a.length().total_cmp(&b.length()))
            .expect("a fiber always has a component")
    }

    pub fn into_longest(self) -> FiberCurve {
        let i = (0..self.components.len())
            .max_by(|&a, &b| self.components[a].length().total_cmp(&self.components[b].length()))
            .expect("a fiber always has a component");
        self.components.into_iter().nth(i).unwrap()
    }
}

/// A projected point and its arc position on the curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub point: Point,
    pub arc: f64,
}

/// Marching-squares extraction of `{field = level}`.
pub fn extract_fiber(field: &ScalarField, level: f64) -> Result<Fiber, FiberError> {
    let (min, max) = field.min_max();
    if !(level > min && level < max) {
        return Err(FiberError::LevelOutOfRange { level, min, max });
    }
    let components: Vec<FiberCurve> = contour::trace_level_set(field, level)
        .into_iter()
        .filter(|(v, closed)| v.len() >= 3 + usize::from(*closed))
        .map(|(v, closed)| {
            let mut v = v;
            if closed {
                v.pop();
            }
            FiberCurve::new(level, v, closed, field)
        })
        .filter(|c| c.length() > 0.0)
        .collect();
    if components.is_empty() {
        return Err(FiberError::EmptyContour(level));
    }
    Ok(Fiber { level, components })
}

/// `π(z)`: intersection of `z + ℝ ∇φ(z)` with the curve nearest to `z`.
pub fn project_pi(z: Point, field: &ScalarField, curve: &FiberCurve) -> Result<Projected, FiberError> {
    let radius = DEFAULT_SEARCH_DIAGONALS * field.grid().cell_diagonal();
    project_pi_within(z, field, curve, radius)
}

pub fn project_pi_within(
    z: Point,
    field: &ScalarField,
    curve: &FiberCurve,
    radius: f64,
) -> Result<Projected, FiberError> {
    // Points past the center hull are first clamped onto it.
    let zc = field.grid().clamp_to_hull(z);
    let g = field.grad_clamped(zc);
    if norm(g) <= MIN_GRADIENT {
        return Err(FiberError::DegenerateGradient(z));
    }
    curve
        .intersect_line(zc, g, radius)
        .ok_or(FiberError::ProjectionFailed(z))
}

/// One elementary step of the fiber dynamics `π(T(z))`.
pub fn fiber_step(
    model: &SystemModel,
    field: &ScalarField,
    curve: &FiberCurve,
    z: Point,
    rng: &mut RngStream,
) -> Result<Projected, FiberError> {
    let tz = model.em_step(z, rng)?;
    project_pi(tz, field, curve)
}

/// Cumulative weights of the segments: length times the density at the midpoint.
fn segment_cdf(curve: &FiberCurve, density: &ScalarField) -> Vec<f64> {
    let mut total = 0.0;
    (0..curve.segments())
        .map(|k| {
            let (a, b) = (curve.vertices[k], curve.vertices[k + 1]);
            let rho = density.interp_clamped(lerp(a, b, 0.5)).max(0.0);
            total += rho * (curve.arc[k + 1] - curve.arc[k]);
            total
        })
        .collect()
}

fn draw_on_curve(curve: &FiberCurve, cdf: &[f64], rng: &mut RngStream) -> Projected {
    let total = *cdf.last().unwrap_or(&0.0);
    let s = if total <= 0.0 {
        rng.uniform() * curve.length()
    } else {
        let u = rng.uniform() * total;
        let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let lo = if k == 0 { 0.0 } else { cdf[k - 1] };
        let w = cdf[k] - lo;
        let frac = if w > 0.0 { (u - lo) / w } else { 0.5 };
        curve.arc[k] + frac * (curve.arc[k + 1] - curve.arc[k])
    };
    Projected {
        point: curve.point_at(s),
        arc: s,
    }
}

/// Draws `q` points on the curve with probability proportional to
/// segment length times the density at the segment midpoint.
pub fn sample_weighted(curve: &FiberCurve, density: &ScalarField, q: usize, rng: &mut RngStream) -> Vec<Projected> {
    let cdf = segment_cdf(curve, density);
    (0..q).map(|_| draw_on_curve(curve, &cdf, rng)).collect()
}

/// Density-weighted sample over every component of a level set.
pub fn sample_level_set(fiber: &Fiber, density: &ScalarField, q: usize, rng: &mut RngStream) -> Vec<Point> {
    let cdfs: Vec<Vec<f64>> = fiber.components.iter().map(|c| segment_cdf(c, density)).collect();
    let mut acc = 0.0;
    let mut weights: Vec<f64> = cdfs.iter().map(|c| *c.last().unwrap_or(&0.0)).collect();
    if weights.iter().all(|&w| w <= 0.0) {
        weights = fiber.components.iter().map(|c| c.length()).collect();
    }
    let comp_cdf: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    (0..q)
        .map(|_| {
            let u = rng.uniform() * acc;
            let i = comp_cdf.partition_point(|&c| c <= u).min(comp_cdf.len() - 1);
            draw_on_curve(&fiber.components[i], &cdfs[i], rng).point
        })
        .collect()
}

/// Residual statistics of the projected dynamics against the full step.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberValidityReport {
    pub mean_step: f64,
    pub mean_residual: f64,
    pub max_residual: f64,
    pub q: usize,
    /// Samples whose projection failed; excluded from the means.
    pub failures: usize,
    /// Largest `residual / bound` over samples where the local bound is finite.
    pub max_bound_ratio: f64,
}

impl FiberValidityReport {
    pub fn residual_ratio(&self) -> f64 {
        self.mean_residual / self.mean_step
    }
}

/// Upper bound on `‖π(y) − y‖` from the change of the interpolant between
/// `y` and `π(y)`, using the smallest directional derivative along the
/// traversed segment. The polyline is a chord of the bilinear contour, so the
/// interpolant at `π(y)` is used in place of the level itself.
fn residual_bound(field: &ScalarField, y: Point, py: Point) -> f64 {
    let g0 = field.grad_clamped(y);
    let n0 = norm(g0);
    let dir = [g0[0] / n0, g0[1] / n0];
    let mut c_loc = f64::INFINITY;
    for i in 0..=8 {
        let p = lerp(y, py, i as f64 / 8.0);
        let g = field.grad_clamped(p);
        c_loc = c_loc.min((g[0] * dir[0] + g[1] * dir[1]).abs());
    }
    if c_loc <= MIN_GRADIENT {
        return f64::INFINITY;
    }
    (field.interp_clamped(py) - field.interp_clamped(y)).abs() / c_loc
}

pub fn validate_fiber(
    model: &SystemModel,
    field: &ScalarField,
    curve: &FiberCurve,
    density: &ScalarField,
    q: usize,
    seed: u64,
) -> Result<FiberValidityReport, FiberError> {
    let mut pick = RngStream::new(seed, u64::MAX);
    let points = sample_weighted(curve, density, q, &mut pick);
    let (mut step_sum, mut res_sum, mut res_max) = (0.0, 0.0, 0.0f64);
    let mut failures = 0;
    let mut max_bound_ratio = 0.0f64;
    for (i, p) in points.iter().enumerate() {
        let mut rng = RngStream::new(seed, pair_stream(1, i as u64));
        let tz = model.em_step(p.point, &mut rng)?;
        let proj = match project_pi(tz, field, curve) {
            Ok(pr) => pr,
            Err(FiberError::ProjectionFailed(_)) | Err(FiberError::DegenerateGradient(_)) => {
                failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let res = dist(proj.point, tz);
        step_sum += dist(tz, p.point);
        res_sum += res;
        res_max = res_max.max(res);
        // Outside the center hull the projection starts from the clamped
        // point, so the bound does not apply.
        let bound = if field.grid().in_hull(tz) {
            residual_bound(field, tz, proj.point)
        } else {
            f64::INFINITY
        };
        if bound.is_finite() && res > 0.0 {
            max_bound_ratio = max_bound_ratio.max(if bound > 0.0 { res / bound } else { f64::INFINITY });
        }
    }
    let valid = q - failures;
    if valid == 0 {
        return Err(FiberError::TooFewSamples { valid, requested: q });
    }
    Ok(FiberValidityReport {
        mean_step: step_sum / valid as f64,
        mean_residual: res_sum / valid as f64,
        max_residual: res_max,
        q,
        failures,
        max_bound_ratio,
    })
}

fn ring(ci: i64, cj: i64, r: i64) -> impl Iterator<Item = (i64, i64)> {
    let cells: Vec<(i64, i64)> = if r == 0 {
        vec![(ci, cj)]
    } else {
        let mut v = Vec::with_capacity(8 * r as usize);
        for d in -r..=r {
            v.push((ci + d, cj - r));
            v.push((ci + d, cj + r));
        }
        for d in -r + 1..r {
            v.push((ci - r, cj + d));
            v.push((ci + r, cj + d));
        }
        v
    };
    cells.into_iter()
}

/// Solves `z + t d = a + s (b - a)` for `s ∈ [0, 1]`.
fn line_segment(z: Point, d: Point, a: Point, b: Point) -> Option<(f64, f64)> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = cross(d, e);
    if denom.abs() <= 1e-300 {
        return None;
    }
    let w = [a[0] - z[0], a[1] - z[1]];
    let t = cross(w, e) / denom;
    let s = cross(w, d) / denom;
    const SLACK: f64 = 1e-12;
    if (-SLACK..=1.0 + SLACK).contains(&s) {
        Some((t, s.clamp(0.0, 1.0)))
    } else {
        None
    }
}

#[inline]
fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

#[inline]
fn dist(a: Point, b: Point) -> f64 {
    norm([a[0] - b[0], a[1] - b[1]])
}

#[inline]
fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}
