//! Sparse storage and the linear solvers behind every exact computation.
//!
//! Absorbing-chain systems `(I - K_VV) u = f` are nonsingular M-matrices.
//! Small systems go through dense LU; larger ones through preconditioner-free
//! Krylov iterations (CG when symmetric, BiCGStab otherwise).

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RwreError};

/// Systems up to this size are solved by dense LU.
pub const DENSE_LIMIT: usize = 400;

/// Default relative residual tolerance of the iterative solvers.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Default iteration cap of the iterative solvers.
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists; duplicate columns are summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_by_key(|e| e.0);
            let mut last: Option<u32> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().expect("nonempty") += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (idx, val) = self.row(i);
        match idx.binary_search(&(j as u32)) {
            Ok(k) => val[k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n_rows) {
            let (idx, val) = self.row(i);
            let mut s = 0.0;
            for (c, v) in idx.iter().zip(val) {
                s += v * x[*c as usize];
            }
            *yi = s;
        }
    }

    /// `y = A^T x`.
    pub fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate().take(self.n_rows) {
            if xi == 0.0 {
                continue;
            }
            let (idx, val) = self.row(i);
            for (c, v) in idx.iter().zip(val) {
                y[*c as usize] += v * xi;
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| self.row(i).1.iter().sum())
            .collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows {
            let (idx, val) = self.row(i);
            for (c, v) in idx.iter().zip(val) {
                rows[*c as usize].push((i as u32, *v));
            }
        }
        CsrMatrix::from_rows(self.n_rows, rows)
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            let (idx, val) = self.row(i);
            for (c, v) in idx.iter().zip(val) {
                out[i * self.n_cols + *c as usize] = *v;
            }
        }
        out
    }
}

/// Convergence summary of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// BiCGStab for `A x = b` with `x` as the starting guess; stops when
/// `||b - A x|| <= tol ||b||`.
pub fn bicgstab<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    let true_residual = |x: &[f64], r: &mut [f64]| {
        apply(x, r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        norm(r) / bnorm
    };
    let mut rel = true_residual(x, &mut r);
    if rel <= tol {
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: rel,
        });
    }
    let mut r_hat = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 || omega == 0.0 {
            // Breakdown: restart from the current iterate.
            rel = true_residual(x, &mut r);
            r_hat.copy_from_slice(&r);
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            if rel <= tol {
                break;
            }
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        apply(&p, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            omega = 0.0;
            continue;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) / bnorm <= tol * 0.5 {
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            rel = true_residual(x, &mut r);
            if rel <= tol {
                break;
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        apply(&s, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm(&r) / bnorm;
        if rel <= tol * 0.5 {
            rel = true_residual(x, &mut r);
            if rel <= tol {
                break;
            }
        }
    }
    if rel > tol {
        return Err(RwreError::SolverDivergence {
            residual: rel,
            iterations: it,
        });
    }
    Ok(SolveStats {
        iterations: it,
        relative_residual: rel,
    })
}

/// Conjugate gradients for symmetric positive definite `A`.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut it = 0;
    let mut rel = rr.sqrt() / bnorm;
    while rel > tol && it < max_iter {
        it += 1;
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        rel = rr_new.sqrt() / bnorm;
        if rel <= tol {
            // Confirm with the true residual to guard against drift.
            apply(x, &mut ap);
            let mut true_r = 0.0;
            for i in 0..n {
                let e = b[i] - ap[i];
                true_r += e * e;
            }
            rel = true_r.sqrt() / bnorm;
            if rel > tol {
                for i in 0..n {
                    r[i] = b[i] - ap[i];
                }
                p.copy_from_slice(&r);
                rr = dot(&r, &r);
                continue;
            }
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rel > tol {
        return Err(RwreError::SolverDivergence {
            residual: rel,
            iterations: it,
        });
    }
    Ok(SolveStats {
        iterations: it,
        relative_residual: rel,
    })
}

/// LU factorization of a dense row-major `n x n` matrix.
pub struct DenseLu {
    n: usize,
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseLu {
    pub fn new(n: usize, row_major: &[f64]) -> Result<Self> {
        let m = DMatrix::from_row_slice(n, n, row_major);
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(RwreError::SolverDivergence {
                residual: f64::INFINITY,
                iterations: 0,
            });
        }
        Ok(Self { n, lu })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(b);
        self.lu
            .solve(&v)
            .expect("matrix checked invertible")
            .as_slice()
            .to_vec()
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        // P A = L U, so A^T = U^T L^T P: solve U^T y = b, L^T z = y, x = P^-1 z.
        let mut out = DVector::from_column_slice(b);
        self.lu.u().transpose().solve_lower_triangular_mut(&mut out);
        self.lu.l().transpose().solve_upper_triangular_mut(&mut out);
        self.lu.p().inv_permute_rows(&mut out);
        out.as_slice().to_vec()
    }

    /// Dense row-major inverse.
    pub fn inverse(&self) -> Vec<f64> {
        let inv = self.lu.try_inverse().expect("matrix checked invertible");
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                out[i * self.n + j] = inv[(i, j)];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i as u32, 2.0 + shift)];
                if i > 0 {
                    r.push(((i - 1) as u32, -1.0));
                }
                if i + 1 < n {
                    r.push(((i + 1) as u32, -1.0 + 0.3 * shift));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(n, rows)
    }

    fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; b.len()];
        a.matvec(x, &mut ax);
        ax.iter()
            .zip(b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn cg_solves_spd() {
        let a = laplacian_1d(200, 0.0);
        let b: Vec<f64> = (0..200).map(|i| (i as f64).sin()).collect();
        let mut x = vec![0.0; 200];
        conjugate_gradient(|v, out| a.matvec(v, out), &b, &mut x, 1e-12, 10_000).unwrap();
        assert!(residual(&a, &x, &b) < 1e-9);
    }

    #[test]
    fn bicgstab_solves_nonsymmetric() {
        let a = laplacian_1d(300, 0.1);
        let b: Vec<f64> = (0..300).map(|i| 1.0 + (i % 7) as f64).collect();
        let mut x = vec![0.0; 300];
        bicgstab(|v, out| a.matvec(v, out), &b, &mut x, 1e-12, 10_000).unwrap();
        assert!(residual(&a, &x, &b) < 1e-9);
    }

    #[test]
    fn dense_lu_and_transpose() {
        let a = laplacian_1d(30, 0.2);
        let dense = a.to_dense();
        let lu = DenseLu::new(30, &dense).unwrap();
        let b: Vec<f64> = (0..30).map(|i| i as f64 - 4.0).collect();
        let x = lu.solve(&b);
        assert!(residual(&a, &x, &b) < 1e-12);
        let xt = lu.solve_transpose(&b);
        assert!(residual(&a.transpose(), &xt, &b) < 1e-12);
        let inv = lu.inverse();
        let mut col = vec![0.0; 30];
        for i in 0..30 {
            col[i] = inv[i * 30 + 3];
        }
        let mut e = vec![0.0; 30];
        e[3] = 1.0;
        assert!(residual(&a, &col, &e) < 1e-12);
    }

    #[test]
    fn csr_duplicates_are_summed() {
        let m = CsrMatrix::from_rows(3, vec![vec![(2, 1.0), (0, 0.5), (2, 0.25)]]);
        assert_eq!(m.get(0, 2), 1.25);
        assert_eq!(m.get(0, 0), 0.5);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        let a = laplacian_1d(200, 0.0);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let err = conjugate_gradient(|v, out| a.matvec(v, out), &b, &mut x, 1e-14, 3).unwrap_err();
        assert!(matches!(err, RwreError::SolverDivergence { .. }));
    }
}
