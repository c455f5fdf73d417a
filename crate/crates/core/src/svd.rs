//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the truncated
//! low-rank reconstruction used to refine batch-norm inputs.
//!
//! The rotations orthogonalize the columns of `A V` in place; when they
//! converge, the column norms are the singular values and the normalized
//! columns are the left singular vectors. Wide matrices are handled through
//! their transpose so the rotation count scales with `min(rows, cols)`.

use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows x k` with orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative, length `k = min(rows, cols)`.
    pub singular_values: Vec<f64>,
    /// `k x cols` with orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U * diag(sigma) * V^T` using only the first `keep` singular triplets.
    pub fn reconstruct(&self, keep: usize) -> Matrix {
        let rows = self.u.rows();
        let cols = self.vt.cols();
        let k = self.u.cols();
        let keep = keep.min(self.rank());
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for (j, s) in self.singular_values[..keep].iter().enumerate() {
                let a = self.u[(i, j)] * s;
                if a == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    out[(i, c)] += a * self.vt[(j, c)];
                }
            }
        }
        debug_assert!(keep <= k);
        out
    }
}

/// Singular value decomposition with relative off-diagonal tolerance `tol`.
pub fn svd(m: &Matrix, tol: f64) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Empty("matrix"));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid(format!(
            "svd tolerance must be positive, got {tol}"
        )));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m, tol);
        Ok(SvdResult {
            u,
            singular_values: s,
            vt: v.transpose(),
        })
    } else {
        // A^T = U' S V'^T  =>  A = V' S U'^T
        let (u_t, s, v_t) = jacobi_tall(&m.transpose(), tol);
        Ok(SvdResult {
            u: v_t,
            singular_values: s,
            vt: u_t.transpose(),
        })
    }
}

/// Number of singular values kept for truncation ratio `r_tr`.
pub fn kept_rank(r_tr: f64, rows: usize, cols: usize) -> Result<usize> {
    if !(r_tr > 0.0 && r_tr <= 1.0) {
        return Err(invalid(format!(
            "truncation ratio must lie in (0, 1], got {r_tr}"
        )));
    }
    let full = rows.min(cols);
    // ceil, so any positive ratio keeps at least one component
    let k = (r_tr * full as f64).ceil() as usize;
    Ok(k.clamp(1, full))
}

/// Best rank-`ceil(r_tr * min(rows, cols))` approximation of `m`.
pub fn truncate_reconstruct(m: &Matrix, r_tr: f64) -> Result<Matrix> {
    let k = kept_rank(r_tr, m.rows(), m.cols())?;
    let dec = svd(m, DEFAULT_TOL)?;
    Ok(dec.reconstruct(k))
}

/// Column-major working storage for the rotations.
struct Columns {
    len: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn from_matrix(m: &Matrix) -> Self {
        let cols = (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| m[(i, j)]).collect())
            .collect();
        Self {
            len: m.rows(),
            cols,
        }
    }

    fn identity(n: usize) -> Self {
        let cols = (0..n)
            .map(|j| {
                let mut c = vec![0.0; n];
                c[j] = 1.0;
                c
            })
            .collect();
        Self { len: n, cols }
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (left, right) = self.cols.split_at_mut(q);
        let cp = &mut left[p];
        let cq = &mut right[0];
        for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
            let x = *a;
            let y = *b;
            *a = c * x - s * y;
            *b = s * x + c * y;
        }
    }

    fn to_matrix(&self, order: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.len, order.len());
        for (j, &src) in order.iter().enumerate() {
            for i in 0..self.len {
                m[(i, j)] = self.cols[src][i];
            }
        }
        m
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi SVD of a matrix with `rows >= cols`. Returns `(U, sigma, V)` with
/// `U` rows x cols and `V` cols x cols, columns sorted by decreasing sigma.
fn jacobi_tall(m: &Matrix, tol: f64) -> (Matrix, Vec<f64>, Matrix) {
    let n = m.cols();
    let mut w = Columns::from_matrix(m);
    let mut v = Columns::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w.cols[p], &w.cols[p]);
                let beta = dot(&w.cols[q], &w.cols[q]);
                let gamma = dot(&w.cols[p], &w.cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                w.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    // Left vectors: normalized columns, re-orthogonalized in order of
    // decreasing sigma. Columns that collapse under projection carry only
    // rounding-level sigma and are replaced by a completion of the basis.
    let rows = w.len;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (&j, &s) in order.iter().zip(&sigma) {
        let mut cand: Vec<f64> = if s > 0.0 {
            w.cols[j].iter().map(|x| x / s).collect()
        } else {
            vec![0.0; rows]
        };
        let norm = orthogonalize(&mut cand, &u_cols);
        if norm > 0.5 {
            cand.iter_mut().for_each(|x| *x /= norm);
        } else {
            cand = complete_basis(rows, &u_cols);
        }
        u_cols.push(cand);
    }

    let mut u = Matrix::zeros(rows, n);
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..rows {
            u[(i, j)] = col[i];
        }
    }
    (u, sigma, v.to_matrix(&order))
}

/// Removes the components along `basis` (two Gram-Schmidt passes) and
/// returns the remaining norm.
fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let p = dot(x, b);
            x.iter_mut().zip(b).for_each(|(xi, bi)| *xi -= p * bi);
        }
    }
    dot(x, x).sqrt()
}

fn complete_basis(rows: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        let norm = orthogonalize(&mut cand, basis);
        if norm > 0.5 {
            cand.iter_mut().for_each(|x| *x /= norm);
            return cand;
        }
    }
    unreachable!("basis of {} vectors cannot span R^{rows}", basis.len())
}
