//! Uniform box partitions of a rectangle and scalar fields on their centers.

use thiserror::Error;

use crate::models::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point ({}, {}) lies outside the hull of box centers", .0[0], .0[1])]
    Extrapolation(Point),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("expected {expected} values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("field contains non-finite values")]
    NonFinite,
}

/// `nx × ny` equal boxes tiling `[lo.x, hi.x] × [lo.y, hi.y]`.
///
/// Box `ix + nx·iy` covers `[x_ix, x_ix + w) × [y_iy, y_iy + h)`; the upper
/// domain edges belong to the last row/column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPartition {
    lo: Point,
    hi: Point,
    nx: usize,
    ny: usize,
}

impl GridPartition {
    pub fn new(lo: Point, hi: Point, nx: usize, ny: usize) -> Result<Self, FieldError> {
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(FieldError::InvalidGrid(format!(
                "lower corner {lo:?} must be below upper corner {hi:?}"
            )));
        }
        if nx < 2 || ny < 2 {
            return Err(FieldError::InvalidGrid(format!(
                "need at least 2 boxes per axis, got {nx}×{ny}"
            )));
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Err(FieldError::InvalidGrid("non-finite corner".into()));
        }
        Ok(Self { lo, hi, nx, ny })
    }

    /// The `n × n` grid on `[-half, half]²`.
    pub fn square(half: f64, n: usize) -> Result<Self, FieldError> {
        Self::new([-half, -half], [half, half], n, n)
    }

    pub fn lo(&self) -> Point {
        self.lo
    }

    pub fn hi(&self) -> Point {
        self.hi
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> f64 {
        (self.hi[0] - self.lo[0]) / self.nx as f64
    }

    pub fn height(&self) -> f64 {
        (self.hi[1] - self.lo[1]) / self.ny as f64
    }

    pub fn box_area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix + self.nx * iy
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn center(&self, idx: usize) -> Point {
        let (ix, iy) = self.coords(idx);
        self.center_of(ix, iy)
    }

    #[inline]
    pub fn center_of(&self, ix: usize, iy: usize) -> Point {
        [
            self.lo[0] + (ix as f64 + 0.5) * self.width(),
            self.lo[1] + (iy as f64 + 0.5) * self.height(),
        ]
    }

    /// Lower-left corner of box `idx`.
    pub fn box_lo(&self, idx: usize) -> Point {
        let (ix, iy) = self.coords(idx);
        [
            self.lo[0] + ix as f64 * self.width(),
            self.lo[1] + iy as f64 * self.height(),
        ]
    }

    #[inline]
    fn axis_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
        if !(v >= lo && v <= hi) {
            return None;
        }
        let i = ((v - lo) / (hi - lo) * n as f64) as usize;
        Some(i.min(n - 1))
    }

    /// Containing box, or `None` off the domain.
    #[inline]
    pub fn box_index(&self, p: Point) -> Option<usize> {
        let ix = Self::axis_index(p[0], self.lo[0], self.hi[0], self.nx)?;
        let iy = Self::axis_index(p[1], self.lo[1], self.hi[1], self.ny)?;
        Some(self.index(ix, iy))
    }

    /// Lower-left and upper-right box centers.
    pub fn center_hull(&self) -> (Point, Point) {
        (self.center_of(0, 0), self.center_of(self.nx - 1, self.ny - 1))
    }

    pub fn clamp_to_hull(&self, p: Point) -> Point {
        let (a, b) = self.center_hull();
        [p[0].clamp(a[0], b[0]), p[1].clamp(a[1], b[1])]
    }

    pub fn in_hull(&self, p: Point) -> bool {
        let (a, b) = self.center_hull();
        p[0] >= a[0] && p[0] <= b[0] && p[1] >= a[1] && p[1] <= b[1]
    }

    /// Bilinear patch containing `p` (in center coordinates) and the local
    /// coordinates within it. `p` must lie in the center hull.
    #[inline]
    fn patch(&self, p: Point) -> (usize, usize, f64, f64) {
        let (w, h) = (self.width(), self.height());
        let sx = (p[0] - self.lo[0]) / w - 0.5;
        let sy = (p[1] - self.lo[1]) / h - 0.5;
        let i = (sx.floor().max(0.0) as usize).min(self.nx - 2);
        let j = (sy.floor().max(0.0) as usize).min(self.ny - 2);
        (i, j, sx - i as f64, sy - j as f64)
    }
}

/// One real value per box, attached to the box center.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: GridPartition,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridPartition, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::WrongLength {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite);
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: GridPartition, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f` at every box center.
    pub fn from_fn(grid: GridPartition, f: impl Fn(Point) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.center(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridPartition {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.index(ix, iy)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            })
    }

    pub fn range(&self) -> f64 {
        let (a, b) = self.min_max();
        b - a
    }

    /// Bilinear interpolation of the center values.
    pub fn interp(&self, p: Point) -> Result<f64, FieldError> {
        if !self.grid.in_hull(p) {
            return Err(FieldError::Extrapolation(p));
        }
        Ok(self.interp_unchecked(p))
    }

    /// Interpolation with `p` clamped onto the center hull first.
    pub fn interp_clamped(&self, p: Point) -> f64 {
        self.interp_unchecked(self.grid.clamp_to_hull(p))
    }

    #[inline]
    fn corners(&self, i: usize, j: usize) -> [f64; 4] {
        let nx = self.grid.nx;
        let base = i + nx * j;
        [
            self.values[base],
            self.values[base + 1],
            self.values[base + nx],
            self.values[base + nx + 1],
        ]
    }

    #[inline]
    fn interp_unchecked(&self, p: Point) -> f64 {
        let (i, j, tx, ty) = self.grid.patch(p);
        let [f00, f10, f01, f11] = self.corners(i, j);
        let bottom = f00 + (f10 - f00) * tx;
        let top = f01 + (f11 - f01) * tx;
        bottom + (top - bottom) * ty
    }

    /// Gradient of the bilinear patch containing `p`.
    pub fn grad(&self, p: Point) -> Result<Point, FieldError> {
        if !self.grid.in_hull(p) {
            return Err(FieldError::Extrapolation(p));
        }
        Ok(self.grad_unchecked(p))
    }

    pub fn grad_clamped(&self, p: Point) -> Point {
        self.grad_unchecked(self.grid.clamp_to_hull(p))
    }

    #[inline]
    fn grad_unchecked(&self, p: Point) -> Point {
        let (i, j, tx, ty) = self.grid.patch(p);
        let [f00, f10, f01, f11] = self.corners(i, j);
        let dx = ((f10 - f00) * (1.0 - ty) + (f11 - f01) * ty) / self.grid.width();
        let dy = ((f01 - f00) * (1.0 - tx) + (f11 - f10) * tx) / self.grid.height();
        [dx, dy]
    }

    /// `∫ |f|` treating the field as piecewise constant on boxes.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.box_area()
    }

    /// `∫ f` treating the field as piecewise constant on boxes.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.box_area()
    }

    /// Copy scaled to unit L¹ norm; a zero field is returned unchanged.
    pub fn normalized_l1(&self) -> Self {
        let n = self.l1_norm();
        if n == 0.0 {
            return self.clone();
        }
        self.map(|v| v / n)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `Σ |fᵢ - gᵢ| · area(Bᵢ)`.
pub fn l1_distance(f: &ScalarField, g: &ScalarField) -> Result<f64, FieldError> {
    if f.grid != g.grid {
        return Err(FieldError::GridMismatch);
    }
    let s: f64 = f
        .values
        .iter()
        .zip(&g.values)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s * f.grid.box_area())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fine_grid() -> GridPartition {
        GridPartition::square(4.0, 200).unwrap()
    }

    #[test]
    fn box_index_edges() {
        let g = fine_grid();
        assert_eq!(g.box_index([-4.0, -4.0]), Some(0));
        assert_eq!(g.box_index([4.0, 4.0]), Some(39_999));
        assert_eq!(g.box_index([5.0, 0.0]), None);
        assert_eq!(g.box_index([0.0, f64::NAN]), None);
        // Half-open interior boundary: x = -4 + w belongs to box 1.
        let w = g.width();
        assert_eq!(g.box_index([-4.0 + w, -4.0]), Some(1));
    }

    #[test]
    fn invalid_grids() {
        assert!(GridPartition::new([0.0, 0.0], [1.0, 1.0], 1, 5).is_err());
        assert!(GridPartition::new([1.0, 0.0], [0.0, 1.0], 5, 5).is_err());
    }

    #[test]
    fn interp_nodes_and_midpoints() {
        let g = GridPartition::new([0.0, 0.0], [4.0, 2.0], 4, 2).unwrap();
        let mut vals = vec![0.0; 8];
        vals[0] = 1.0;
        vals[1] = 3.0;
        let f = ScalarField::new(g, vals).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(f.interp(g.center(i)).unwrap(), f.values()[i], epsilon = 1e-15);
        }
        let mid = [(g.center(0)[0] + g.center(1)[0]) / 2.0, g.center(0)[1]];
        assert_abs_diff_eq!(f.interp(mid).unwrap(), 2.0, epsilon = 1e-15);
        assert!(matches!(f.interp([0.1, 0.1]), Err(FieldError::Extrapolation(_))));
        assert_abs_diff_eq!(f.interp_clamped([0.1, 0.1]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gradients_of_simple_fields() {
        let g = fine_grid();
        let c = ScalarField::constant(g, 3.0);
        assert_eq!(c.grad([0.3, 0.1]).unwrap(), [0.0, 0.0]);
        let fx = ScalarField::from_fn(g, |p| p[0]);
        let d = fx.grad([1.234, -2.0]).unwrap();
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn l1_examples() {
        let g = GridPartition::square(4.0, 50).unwrap();
        let f = ScalarField::from_fn(g, |p| p[0].sin());
        assert_eq!(l1_distance(&f, &f).unwrap(), 0.0);
        let h = f.map(|v| v + 1.0);
        assert_abs_diff_eq!(l1_distance(&h, &f).unwrap(), 64.0, epsilon = 1e-9);
        let other = ScalarField::constant(GridPartition::square(4.0, 10).unwrap(), 0.0);
        assert_eq!(l1_distance(&f, &other), Err(FieldError::GridMismatch));
    }

    proptest! {
        #[test]
        fn bilinear_reproduces_xy(x in -3.97f64..3.97, y in -3.97f64..3.97) {
            let g = GridPartition::square(4.0, 37).unwrap();
            let f = ScalarField::from_fn(g, |p| p[0] * p[1]);
            let p = g.clamp_to_hull([x, y]);
            prop_assert!((f.interp(p).unwrap() - p[0] * p[1]).abs() < 1e-9);
            let d = f.grad(p).unwrap();
            prop_assert!((d[0] - p[1]).abs() < 1e-9);
            prop_assert!((d[1] - p[0]).abs() < 1e-9);
        }

        #[test]
        fn gradient_matches_finite_differences(
            seed in 0u64..1000, ix in 1usize..18, iy in 1usize..18,
            tx in 0.2f64..0.8, ty in 0.2f64..0.8,
        ) {
            let g = GridPartition::square(2.0, 20).unwrap();
            let mut r = crate::rng::RngStream::new(seed, 0);
            let f = ScalarField::new(g, (0..g.len()).map(|_| r.uniform_in(-1.0, 1.0)).collect()).unwrap();
            let c = g.center_of(ix, iy);
            let p = [c[0] + tx * g.width(), c[1] + ty * g.height()];
            let h = 1e-6 * g.width();
            let fd = [
                (f.interp([p[0] + h, p[1]]).unwrap() - f.interp([p[0] - h, p[1]]).unwrap()) / (2.0 * h),
                (f.interp([p[0], p[1] + h]).unwrap() - f.interp([p[0], p[1] - h]).unwrap()) / (2.0 * h),
            ];
            let d = f.grad(p).unwrap();
            let scale = d[0].hypot(d[1]).max(1e-3);
            prop_assert!(((d[0] - fd[0]).hypot(d[1] - fd[1])) / scale < 1e-6);
        }

        #[test]
        fn interp_is_continuous_across_patches(seed in 0u64..500, ix in 0usize..8, y in -0.9f64..0.9) {
            let g = GridPartition::square(1.0, 10).unwrap();
            let mut r = crate::rng::RngStream::new(seed, 1);
            let f = ScalarField::new(g, (0..g.len()).map(|_| r.uniform()).collect()).unwrap();
            let edge = g.center_of(ix + 1, 0)[0];
            let a = f.interp([edge - 1e-12, y]).unwrap();
            let b = f.interp([edge + 1e-12, y]).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn l1_is_a_metric(seed in 0u64..500) {
            let g = GridPartition::square(1.0, 6).unwrap();
            let mut r = crate::rng::RngStream::new(seed, 2);
            let mut rand_field = || ScalarField::new(g, (0..g.len()).map(|_| r.uniform_in(-1.0, 1.0)).collect()).unwrap();
            let (a, b, c) = (rand_field(), rand_field(), rand_field());
            let ab = l1_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, l1_distance(&b, &a).unwrap());
            prop_assert!(ab <= l1_distance(&a, &c).unwrap() + l1_distance(&c, &b).unwrap() + 1e-12);
            prop_assert!(ab > 0.0);
            prop_assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        }
    }
}
