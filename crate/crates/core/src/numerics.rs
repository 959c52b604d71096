//! Small dense linear algebra kernels and stable reductions.
//!
//! Matrices are `ndarray::Array2<f64>` in standard (row-major) layout. The
//! problems solved here are tiny: covariance matrices of the input dimension
//! and per-partition polynomial least-squares blocks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("{routine} did not converge after {sweeps} sweeps")]
    NoConvergence { routine: &'static str, sweeps: usize },
}

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
///
/// `eigenvalues` are sorted in descending order and `eigenvectors` holds the
/// matching orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl SymEigResult {
    pub fn top_eigenvector(&self) -> ArrayView1<'_, f64> {
        self.eigenvectors.column(0)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sorting is stable, so equal eigenvalues keep the order in which the
/// rotations left them (for an already-diagonal input, coordinate order).
pub fn sym_eig(a: ArrayView2<f64>) -> Result<SymEigResult, NumericsError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(NumericsError::Dimension(format!(
            "sym_eig needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-10 * scale {
                return Err(NumericsError::Dimension(format!(
                    "sym_eig needs a symmetric matrix; entries ({i},{j}) and ({j},{i}) differ"
                )));
            }
        }
    }

    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = n < 2 || total == 0.0;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        sweep += 1;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * total;
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            routine: "sym_eig",
            sweeps: MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
///
/// Householder QR reduces the system to its triangular factor, whose SVD is
/// then taken by one-sided Jacobi. Singular values below
/// `eps * max(rows, cols) * sigma_max` are treated as zero, which yields the
/// pseudoinverse solution for rank-deficient `a`.
pub fn solve_least_squares(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>, NumericsError> {
    let (rows, cols) = a.dim();
    if rows == 0 || cols == 0 {
        return Err(NumericsError::Dimension(format!(
            "least squares needs a non-empty matrix, got {rows}x{cols}"
        )));
    }
    if b.len() != rows {
        return Err(NumericsError::Dimension(format!(
            "right-hand side has length {} but matrix has {rows} rows",
            b.len()
        )));
    }

    let (r, c) = householder_reduce(a, b);
    let rank_rows = r.nrows();

    // one-sided Jacobi: rotate columns of r until mutually orthogonal
    let mut w = r;
    let mut v = Array2::<f64>::eye(cols);
    // columns below eps * |A|_F fall under the pseudoinverse cutoff anyway
    let negligible = f64::EPSILON * f64::EPSILON * w.iter().map(|x| x * x).sum::<f64>();
    let mut converged = cols < 2;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        sweep += 1;
        converged = true;
        for p in 0..cols - 1 {
            for q in (p + 1)..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for k in 0..rank_rows {
                    let wp = w[[k, p]];
                    let wq = w[[k, q]];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= 1e-15 * (alpha * beta).sqrt()
                {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for k in 0..rank_rows {
                    let wp = w[[k, p]];
                    let wq = w[[k, q]];
                    w[[k, p]] = cs * wp - sn * wq;
                    w[[k, q]] = sn * wp + cs * wq;
                }
                for k in 0..cols {
                    let vp = v[[k, p]];
                    let vq = v[[k, q]];
                    v[[k, p]] = cs * vp - sn * vq;
                    v[[k, q]] = sn * vp + cs * vq;
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            routine: "solve_least_squares",
            sweeps: MAX_SWEEPS,
        });
    }

    let sigma_sq: Vec<f64> = (0..cols)
        .map(|j| w.column(j).iter().map(|x| x * x).sum::<f64>())
        .collect();
    let sigma_max = sigma_sq.iter().fold(0.0_f64, |m, &s| m.max(s)).sqrt();
    let cutoff = f64::EPSILON * rows.max(cols) as f64 * sigma_max;

    let mut x = Array1::<f64>::zeros(cols);
    for j in 0..cols {
        let sigma = sigma_sq[j].sqrt();
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        // (W_j . c) / sigma_j^2 equals (u_j . c) / sigma_j
        let coeff = w.column(j).dot(&c) / sigma_sq[j];
        x.scaled_add(coeff, &v.column(j));
    }
    Ok(x)
}

/// Householder QR applied to `[a | b]`; returns the leading `min(rows, cols)`
/// rows of `R` and of `Qᵀ b`.
fn householder_reduce(a: ArrayView2<f64>, b: ArrayView1<f64>) -> (Array2<f64>, Array1<f64>) {
    let (rows, cols) = a.dim();
    let mut r = a.to_owned();
    let mut c = b.to_owned();
    let steps = rows.min(cols);
    let mut v = vec![0.0; rows];
    for k in 0..steps {
        let norm = (k..rows).map(|i| r[[i, k]] * r[[i, k]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[[k, k]] > 0.0 { -norm } else { norm };
        for i in k..rows {
            v[i] = r[[i, k]];
        }
        v[k] -= alpha;
        let vnorm_sq: f64 = (k..rows).map(|i| v[i] * v[i]).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        for j in k..cols {
            let dot: f64 = (k..rows).map(|i| v[i] * r[[i, j]]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in k..rows {
                r[[i, j]] -= f * v[i];
            }
        }
        let dot: f64 = (k..rows).map(|i| v[i] * c[i]).sum();
        let f = 2.0 * dot / vnorm_sq;
        for i in k..rows {
            c[i] -= f * v[i];
        }
    }
    let r_top = r.slice(ndarray::s![..steps, ..]).to_owned();
    let c_top = c.slice(ndarray::s![..steps]).to_owned();
    (r_top, c_top)
}

/// `log Σ exp(v_k)` with max-shift; returns `-inf` when every entry is `-inf`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}
