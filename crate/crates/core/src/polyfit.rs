//! Total-degree polynomial spaces and the partition-weighted least-squares fit.
//!
//! Monomials are evaluated in the unit-box frame given by an [`InputAffine`],
//! which keeps the Vandermonde blocks reasonably conditioned.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::numerics::solve_least_squares;
use crate::pou_net::InputAffine;
use crate::Error;

/// Partitions whose largest weight is below this are fitted with the zero polynomial.
pub const EMPTY_PARTITION_WEIGHT: f64 = 1e-12;

/// How partition weights enter the residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LsWeighting {
    /// Residual `phi_i (p_i - y)` squared: weights `phi_i^2` in the normal equations.
    #[default]
    Squared,
    /// Weights `phi_i` in the normal equations.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialSet {
    pub degree: usize,
    pub input_dim: usize,
    pub multi_indices: Vec<Vec<u32>>,
    pub affine: InputAffine,
    /// One row of coefficients per partition, columns follow `multi_indices`.
    pub coeffs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyFitReport {
    pub empty_partitions: Vec<usize>,
}

/// `C(d + m, d)`.
pub fn basis_dim(input_dim: usize, degree: usize) -> usize {
    let mut out: usize = 1;
    for k in 1..=input_dim {
        out = out * (degree + k) / k;
    }
    out
}

/// Exponent tuples of total degree `<= degree`, graded, and within one degree
/// ordered with larger leading exponents first: `1, x1, x2, x1^2, x1 x2, x2^2`.
pub fn multi_indices(input_dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(prefix: &mut Vec<u32>, remaining: u32, slots: usize, out: &mut Vec<Vec<u32>>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            fill(prefix, remaining - e, slots - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(basis_dim(input_dim, degree));
    for total in 0..=degree as u32 {
        fill(&mut Vec::with_capacity(input_dim), total, input_dim, &mut out);
    }
    out
}

/// Monomial design matrix on the given coordinates (no normalization applied).
pub fn monomial_basis(x: ArrayView2<f64>, degree: usize) -> Array2<f64> {
    eval_monomials(x, &multi_indices(x.ncols(), degree), degree)
}

fn eval_monomials(x: ArrayView2<f64>, indices: &[Vec<u32>], degree: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::<f64>::zeros((n, indices.len()));
    let mut powers = vec![1.0; d * (degree + 1)];
    for (j, row) in x.axis_iter(Axis(0)).enumerate() {
        for k in 0..d {
            let base = k * (degree + 1);
            powers[base] = 1.0;
            for p in 1..=degree {
                powers[base + p] = powers[base + p - 1] * row[k];
            }
        }
        for (c, idx) in indices.iter().enumerate() {
            let mut v = 1.0;
            for (k, &e) in idx.iter().enumerate() {
                v *= powers[k * (degree + 1) + e as usize];
            }
            out[[j, c]] = v;
        }
    }
    out
}

impl PolynomialSet {
    pub fn num_partitions(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn basis_len(&self) -> usize {
        self.multi_indices.len()
    }

    /// Design matrix of the basis at `x` (original coordinates).
    pub fn basis_at(&self, x: ArrayView2<f64>) -> Array2<f64> {
        eval_monomials(self.affine.apply(x).view(), &self.multi_indices, self.degree)
    }

    /// `p_i(x_j)` for every point and partition, `N x M_tot`.
    pub fn evaluate(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, Error> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "points have {} coordinates, polynomials expect {}",
                x.ncols(),
                self.input_dim
            )));
        }
        Ok(self.basis_at(x).dot(&self.coeffs.t()))
    }
}

/// Fits one polynomial per partition minimizing
/// `sum_j sum_i (phi_i(x_j) (p_i(x_j) - y_j))^2`.
///
/// The objective separates by partition, so each block is an independent
/// weighted least-squares problem solved for its minimum-norm minimizer.
pub fn fit_weighted_ls(
    phi: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    degree: usize,
    affine: &InputAffine,
    weighting: LsWeighting,
) -> Result<(PolynomialSet, PolyFitReport), Error> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Shape("cannot fit polynomials to an empty point set".into()));
    }
    if phi.nrows() != n || y.len() != n {
        return Err(Error::Shape(format!(
            "phi has {} rows, x {} rows, y {} entries",
            phi.nrows(),
            n,
            y.len()
        )));
    }
    if affine.dim() != x.ncols() {
        return Err(Error::Shape("input map dimension differs from points".into()));
    }
    let indices = multi_indices(x.ncols(), degree);
    let basis = eval_monomials(affine.apply(x).view(), &indices, degree);
    let partitions = phi.ncols();
    let k = indices.len();
    let mut coeffs = Array2::<f64>::zeros((partitions, k));
    let mut report = PolyFitReport::default();

    for (i, weights) in phi.axis_iter(Axis(1)).enumerate() {
        let max_w = weights.iter().copied().fold(0.0_f64, f64::max);
        if max_w < EMPTY_PARTITION_WEIGHT {
            report.empty_partitions.push(i);
            continue;
        }
        let rows: Vec<usize> = (0..n).filter(|&j| weights[j] > 0.0).collect();
        let mut a = Array2::<f64>::zeros((rows.len(), k));
        let mut b = Array1::<f64>::zeros(rows.len());
        for (r, &j) in rows.iter().enumerate() {
            let w = match weighting {
                LsWeighting::Squared => weights[j],
                LsWeighting::Linear => weights[j].sqrt(),
            };
            a.row_mut(r).assign(&(&basis.row(j) * w));
            b[r] = w * y[j];
        }
        let c = solve_least_squares(a.view(), b.view())?;
        coeffs.row_mut(i).assign(&c);
    }

    Ok((
        PolynomialSet {
            degree,
            input_dim: x.ncols(),
            multi_indices: indices,
            affine: affine.clone(),
            coeffs,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pou_net::fit_input_affine;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_examples() {
        let x = array![[0.3, -2.0], [1.5, 4.0]];
        let b0 = monomial_basis(x.view(), 0);
        assert_eq!(b0.dim(), (2, 1));
        assert!(b0.iter().all(|&v| v == 1.0));

        let b2 = monomial_basis(x.view(), 2);
        assert_eq!(b2.row(1).to_vec(), vec![1.0, 1.5, 4.0, 2.25, 6.0, 16.0]);

        let b = monomial_basis(array![[3.0]].view(), 1);
        assert_eq!(b.row(0).to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn index_order_and_dimension() {
        assert_eq!(
            multi_indices(2, 2),
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        for d in 1..=6usize {
            for m in 0..=4usize {
                // enumerate all exponent tuples in [0, m]^d with sum <= m
                let mut count = 0;
                let mut tuple = vec![0usize; d];
                loop {
                    if tuple.iter().sum::<usize>() <= m {
                        count += 1;
                    }
                    let mut k = 0;
                    while k < d && tuple[k] == m {
                        tuple[k] = 0;
                        k += 1;
                    }
                    if k == d {
                        break;
                    }
                    tuple[k] += 1;
                }
                assert_eq!(basis_dim(d, m), count, "d={d} m={m}");
                assert_eq!(multi_indices(d, m).len(), count);
            }
        }
    }

    #[test]
    fn constant_fit_is_mean() {
        let x = array![[0.0], [0.5], [1.0], [2.0]];
        let y = array![1.0, 2.0, 4.0, 9.0];
        let phi = Array2::<f64>::ones((4, 1));
        let affine = fit_input_affine(x.view()).unwrap();
        let (poly, report) = fit_weighted_ls(phi.view(), x.view(), y.view(), 0, &affine, LsWeighting::Squared).unwrap();
        assert!(report.empty_partitions.is_empty());
        assert!((poly.coeffs[[0, 0]] - 4.0).abs() < 1e-14);
    }

    /// Independent oracle: straight-line fit by the closed-form 2x2 normal equations.
    fn ols_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        ((sy - slope * sx) / n, slope)
    }

    #[test]
    fn crisp_partitions_match_independent_subset_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (5.0 * x).sin() + rng.random_range(-0.1..0.1))
            .collect();
        let labels: Vec<usize> = xs
            .iter()
            .map(|&x| {
                if x < 0.3 {
                    0
                } else if x < 0.7 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let phi = Array2::from_shape_fn((n, 3), |(j, i)| if labels[j] == i { 1.0 } else { 0.0 });
        let x = Array2::from_shape_vec((n, 1), xs.clone()).unwrap();
        let y = Array1::from_vec(ys.clone());
        let affine = InputAffine::identity(1);
        let (poly, _) = fit_weighted_ls(phi.view(), x.view(), y.view(), 1, &affine, LsWeighting::Squared).unwrap();
        for i in 0..3 {
            let (sx, sy): (Vec<f64>, Vec<f64>) = xs
                .iter()
                .zip(&ys)
                .zip(&labels)
                .filter(|(_, &l)| l == i)
                .map(|((x, y), _)| (*x, *y))
                .unzip();
            let (c0, c1) = ols_line(&sx, &sy);
            assert!((poly.coeffs[[i, 0]] - c0).abs() < 1e-10);
            assert!((poly.coeffs[[i, 1]] - c1).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_partition_gets_zero_polynomial() {
        let x = array![[0.0], [1.0], [2.0]];
        let y = array![1.0, 2.0, 3.0];
        let phi = array![[1.0, 0.0], [1.0, 1e-13], [1.0, 0.0]];
        let affine = fit_input_affine(x.view()).unwrap();
        let (poly, report) = fit_weighted_ls(phi.view(), x.view(), y.view(), 1, &affine, LsWeighting::Squared).unwrap();
        assert_eq!(report.empty_partitions, vec![1]);
        assert!(poly.coeffs.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_objective_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let x: Array2<f64> = Array2::from_shape_simple_fn((n, 2), || rng.random_range(0.0..1.0));
        let y = Array1::from_shape_fn(n, |j| (3.0 * x[[j, 0]]).cos() + x[[j, 1]].powi(3));
        let mut phi = Array2::from_shape_simple_fn((n, 3), || rng.random_range(0.0..1.0));
        for mut row in phi.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let affine = fit_input_affine(x.view()).unwrap();
        for weighting in [LsWeighting::Squared, LsWeighting::Linear] {
            let (poly, _) = fit_weighted_ls(phi.view(), x.view(), y.view(), 2, &affine, weighting).unwrap();
            let objective = |coeffs: &Array2<f64>| {
                let p = PolynomialSet {
                    coeffs: coeffs.clone(),
                    ..poly.clone()
                };
                let vals = p.evaluate(x.view()).unwrap();
                let mut total = 0.0;
                for j in 0..n {
                    for i in 0..3 {
                        let w = match weighting {
                            LsWeighting::Squared => phi[[j, i]] * phi[[j, i]],
                            LsWeighting::Linear => phi[[j, i]],
                        };
                        total += w * (vals[[j, i]] - y[j]).powi(2);
                    }
                }
                total
            };
            let best = objective(&poly.coeffs);
            for _ in 0..100 {
                let perturbed =
                    &poly.coeffs + &Array2::from_shape_simple_fn(poly.coeffs.dim(), || rng.random_range(-1e-3..1e-3));
                assert!(best <= objective(&perturbed) + 1e-14);
            }
        }
    }
}
