//! Restarted Krylov–Schur iteration for the largest-magnitude eigenvalues of
//! a real operator, carried out in complex arithmetic.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64 as C64;

use crate::rng::RngStream;

use super::SpectralError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOptions {
    /// Relative residual tolerance on the Ritz pairs.
    pub tol: f64,
    pub max_restarts: usize,
    /// Krylov subspace size; defaults to `max(2 nev + 20, 40)` capped by the dimension.
    pub subspace: Option<usize>,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_restarts: 2000,
            subspace: None,
        }
    }
}

pub(crate) struct RitzPairs {
    pub values: Vec<C64>,
    pub vectors: Vec<Vec<C64>>,
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn scale(a: &mut [C64], s: f64) {
    a.iter_mut().for_each(|x| *x *= s);
}

/// Two passes of classical Gram–Schmidt against `basis`; returns the
/// accumulated coefficients.
fn orthogonalize(basis: &[Vec<C64>], w: &mut [C64]) -> Vec<C64> {
    let mut h = vec![C64::new(0.0, 0.0); basis.len()];
    for _ in 0..2 {
        let c: Vec<C64> = basis.iter().map(|v| dot(v, w)).collect();
        for (v, &ci) in basis.iter().zip(&c) {
            for (wk, vk) in w.iter_mut().zip(v) {
                *wk -= ci * vk;
            }
        }
        for (hi, ci) in h.iter_mut().zip(c) {
            *hi += ci;
        }
    }
    h
}

/// Descending magnitude, ties (to rounding) broken by larger real part then
/// larger imaginary part.
fn before(a: C64, b: C64) -> bool {
    let (ma, mb) = (a.norm(), b.norm());
    let tie = 1e-12 * ma.max(mb).max(1e-300);
    if (ma - mb).abs() > tie {
        return ma > mb;
    }
    if (a.re - b.re).abs() > tie {
        return a.re > b.re;
    }
    a.im > b.im + tie
}

/// Swaps the adjacent diagonal entries `k, k+1` of the upper triangular `t`
/// with a Givens rotation, updating the Schur vectors `q`.
fn swap_adjacent(t: &mut DMatrix<C64>, q: &mut DMatrix<C64>, k: usize) {
    let m = t.nrows();
    let (a, b) = (t[(k, k)], t[(k + 1, k + 1)]);
    let f = t[(k, k + 1)];
    let g = b - a;
    // Rotation G = [[c, s], [-conj(s), c]] with G^H-applied columns so that
    // the new leading eigenvector (f, g) of the 2x2 block moves to e1.
    let r = (f.norm_sqr() + g.norm_sqr()).sqrt();
    if r == 0.0 {
        return;
    }
    let c = f.norm() / r;
    let s = if f.norm() == 0.0 {
        C64::new(1.0, 0.0) * (g.conj() / g.norm())
    } else {
        (f / f.norm()) * g.conj() / r
    };
    // Rows k, k+1: T <- G T.
    for j in k..m {
        let (x, y) = (t[(k, j)], t[(k + 1, j)]);
        t[(k, j)] = c * x + s * y;
        t[(k + 1, j)] = -s.conj() * x + c * y;
    }
    // Columns k, k+1: T <- T G^H, Q <- Q G^H.
    for i in 0..=k + 1 {
        let (x, y) = (t[(i, k)], t[(i, k + 1)]);
        t[(i, k)] = c * x + s.conj() * y;
        t[(i, k + 1)] = -s * x + c * y;
    }
    for i in 0..q.nrows() {
        let (x, y) = (q[(i, k)], q[(i, k + 1)]);
        q[(i, k)] = c * x + s.conj() * y;
        q[(i, k + 1)] = -s * x + c * y;
    }
    t[(k + 1, k)] = C64::new(0.0, 0.0);
    t[(k, k)] = b;
    t[(k + 1, k + 1)] = a;
}

fn sort_schur(t: &mut DMatrix<C64>, q: &mut DMatrix<C64>) {
    let m = t.nrows();
    for pass in 0..m {
        let mut swapped = false;
        for k in (pass..m - 1).rev() {
            if before(t[(k + 1, k + 1)], t[(k, k)]) {
                swap_adjacent(t, q, k);
                swapped = true;
            }
        }
        if !swapped {
            break;
        }
    }
}

/// Eigenvector of the upper triangular `t` for its `i`-th diagonal entry.
fn triangular_eigvec(t: &DMatrix<C64>, i: usize) -> Vec<C64> {
    let lam = t[(i, i)];
    let scale_t = t.iter().map(|x| x.norm()).fold(0.0, f64::max).max(1e-300);
    let small = f64::EPSILON * scale_t;
    let mut y = vec![C64::new(0.0, 0.0); t.nrows()];
    y[i] = C64::new(1.0, 0.0);
    for r in (0..i).rev() {
        let s: C64 = (r + 1..=i).map(|c| t[(r, c)] * y[c]).sum();
        let mut d = t[(r, r)] - lam;
        if d.norm() < small {
            d = C64::new(small, 0.0);
        }
        y[r] = -s / d;
    }
    let n = norm(&y);
    scale(&mut y, 1.0 / n);
    y
}

pub(crate) fn krylov_schur(
    n: usize,
    nev: usize,
    apply: &(dyn Fn(&[C64], &mut [C64]) + Sync),
    opts: &KrylovOptions,
) -> Result<RitzPairs, SpectralError> {
    if n == 0 || nev == 0 || nev > n {
        return Err(SpectralError::InvalidCount { count: nev, dim: n });
    }
    let m = opts.subspace.unwrap_or((2 * nev + 20).max(40)).max(nev + 2).min(n);
    let zero = C64::new(0.0, 0.0);
    let mut v: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
    let mut start = vec![C64::new(1.0, 0.0); n];
    scale(&mut start, 1.0 / (n as f64).sqrt());
    v.push(start);
    let mut h = DMatrix::<C64>::zeros(m + 1, m);
    let mut k = 0;
    let mut restart_rng = RngStream::new(0x6b73_6368_7572, 0);
    let mut anorm = 0.0f64;

    for _restart in 0..opts.max_restarts {
        for j in k..m {
            let mut w = vec![zero; n];
            apply(&v[j], &mut w);
            let w0 = norm(&w);
            anorm = anorm.max(w0);
            let coeffs = orthogonalize(&v[..=j], &mut w);
            for (i, c) in coeffs.into_iter().enumerate() {
                h[(i, j)] = c;
            }
            let beta = norm(&w);
            if j + 1 >= n {
                h[(j + 1, j)] = zero;
                v.push(vec![zero; n]);
            } else if beta <= 1e-12 * w0.max(anorm).max(1e-300) {
                // Invariant subspace found: continue with a fresh direction.
                h[(j + 1, j)] = zero;
                let mut r: Vec<C64> = (0..n).map(|_| C64::new(restart_rng.gaussian(), 0.0)).collect();
                orthogonalize(&v[..=j], &mut r);
                let rn = norm(&r);
                scale(&mut r, 1.0 / rn);
                v.push(r);
            } else {
                h[(j + 1, j)] = C64::new(beta, 0.0);
                scale(&mut w, 1.0 / beta);
                v.push(w);
            }
        }

        let hm = h.view((0, 0), (m, m)).clone_owned();
        let schur = Schur::try_new(hm, f64::EPSILON, 10_000).ok_or(SpectralError::SchurFailed)?;
        let (mut q, mut t) = schur.unpack();
        for c in 0..m {
            for r in c + 1..m {
                t[(r, c)] = zero;
            }
        }
        sort_schur(&mut t, &mut q);
        let b: Vec<C64> = (0..m).map(|c| (0..m).map(|i| h[(m, i)] * q[(i, c)]).sum()).collect();

        let ys: Vec<Vec<C64>> = (0..nev).map(|i| triangular_eigvec(&t, i)).collect();
        let lam0 = t[(0, 0)].norm().max(anorm * f64::EPSILON).max(1e-300);
        // Residual of the Ritz pair (t_ii, V Q y) is |b · y|.
        let converged = ys
            .iter()
            .all(|y| b.iter().zip(y).map(|(x, z)| x * z).sum::<C64>().norm() <= opts.tol * lam0);

        if converged {
            let values = (0..nev).map(|i| t[(i, i)]).collect();
            let vectors = ys.iter().map(|y| combine(&v[..m], &q, y)).collect();
            return Ok(RitzPairs { values, vectors });
        }

        // Keep about half of the unwanted directions, without splitting a
        // conjugate pair across the cut.
        let mut p = (nev + (m - nev) / 2).clamp(nev + 1, m - 1);
        let (l1, l2) = (t[(p - 1, p - 1)], t[(p, p)]);
        if l1.im.abs() > 1e-10 * l1.norm() && (l1 - l2.conj()).norm() <= 1e-6 * l1.norm() {
            p = if p + 1 < m { p + 1 } else { p - 1 };
        }

        let mut new_v: Vec<Vec<C64>> = (0..p)
            .map(|c| {
                let mut x = vec![zero; n];
                for i in 0..m {
                    let qi = q[(i, c)];
                    if qi != zero {
                        for (xk, vk) in x.iter_mut().zip(&v[i]) {
                            *xk += qi * vk;
                        }
                    }
                }
                x
            })
            .collect();
        new_v.push(v[m].clone());
        v = new_v;
        h.fill(zero);
        for r in 0..p {
            for c in r..p {
                h[(r, c)] = t[(r, c)];
            }
        }
        for c in 0..p {
            h[(p, c)] = b[c];
        }
        k = p;
    }
    Err(SpectralError::NotConverged {
        restarts: opts.max_restarts,
    })
}

fn combine(v: &[Vec<C64>], q: &DMatrix<C64>, y: &[C64]) -> Vec<C64> {
    let n = v[0].len();
    let m = v.len();
    let coef: Vec<C64> = (0..m).map(|i| (0..m).map(|c| q[(i, c)] * y[c]).sum()).collect();
    let mut x = vec![C64::new(0.0, 0.0); n];
    for (vi, ci) in v.iter().zip(coef) {
        for (xk, vk) in x.iter_mut().zip(vi) {
            *xk += ci * vk;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_op(a: DMatrix<f64>) -> impl Fn(&[C64], &mut [C64]) + Sync {
        move |x, y| {
            for i in 0..a.nrows() {
                y[i] = (0..a.ncols()).map(|j| x[j] * a[(i, j)]).sum();
            }
        }
    }

    #[test]
    fn swap_preserves_similarity() {
        let mut t = DMatrix::from_row_slice(
            3,
            3,
            &[
                C64::new(0.5, 0.0),
                C64::new(1.0, 0.5),
                C64::new(0.3, 0.0),
                C64::new(0.0, 0.0),
                C64::new(2.0, 1.0),
                C64::new(-0.7, 0.2),
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
                C64::new(-1.0, 0.0),
            ],
        );
        let orig = t.clone();
        let mut q = DMatrix::<C64>::identity(3, 3);
        sort_schur(&mut t, &mut q);
        let back = &q * &t * q.adjoint();
        assert!((back - orig).norm() < 1e-12);
        assert!(t[(0, 0)].norm() >= t[(1, 1)].norm() && t[(1, 1)].norm() >= t[(2, 2)].norm());
        assert!(t[(1, 0)].norm() == 0.0 && t[(2, 1)].norm() == 0.0);
    }

    #[test]
    fn finds_dominant_eigenvalues_of_a_diagonal_matrix() {
        let n = 300;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / (1.0 + i as f64) } else { 0.0 });
        let op = dense_op(a);
        let r = krylov_schur(n, 5, &op, &KrylovOptions::default()).unwrap();
        for (i, l) in r.values.iter().enumerate() {
            assert!((l.re - 1.0 / (1.0 + i as f64)).abs() < 1e-10, "{i}: {l}");
        }
    }

    #[test]
    fn rotation_block_gives_conjugate_pair() {
        let n = 50;
        let mut a = DMatrix::<f64>::zeros(n, n);
        a[(0, 0)] = 0.9;
        a[(0, 1)] = -0.9;
        a[(1, 0)] = 0.9;
        a[(1, 1)] = 0.9;
        for i in 2..n {
            a[(i, i)] = 0.5 * (i as f64 / n as f64);
        }
        let op = dense_op(a);
        let r = krylov_schur(n, 3, &op, &KrylovOptions::default()).unwrap();
        assert!((r.values[0] - C64::new(0.9, 0.9)).norm() < 1e-10);
        assert!((r.values[1] - C64::new(0.9, -0.9)).norm() < 1e-10);
    }
}
