//! Gaussian-mixture noise model attached to the partitions.
//!
//! At a fixed input the label is distributed as
//! `sum_i phi_i N(mu_i + Q, sigma_i)`, where `Q = sum_i phi_i p_i` is the
//! deterministic polynomial part.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::logsumexp;
use crate::polyfit::PolynomialSet;
use crate::Error;

/// Weights below this are treated as exactly zero inside the log-density.
pub const ZERO_WEIGHT: f64 = 1e-300;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
// exp() argument cap for dL/dphi; only reached for weights that are already zero
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl NoiseModel {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(mu.len(), sigma.len());
        Self {
            mu,
            log_sigma: sigma.into_iter().map(f64::ln).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.log_sigma[i].exp()
    }

    /// Means at the centered quantiles `(i + 1/2) / M` of `y`, every sigma at
    /// `range(y) / M`.
    pub fn from_label_quantiles(y: ArrayView1<f64>, partitions: usize) -> Self {
        assert!(partitions >= 1 && !y.is_empty());
        let mut sorted = y.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let range = sorted[n - 1] - sorted[0];
        let sigma = if range > 0.0 { range / partitions as f64 } else { 1.0 };
        let mu = (0..partitions)
            .map(|i| {
                let pos = (i as f64 + 0.5) / partitions as f64 * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let t = pos - lo as f64;
                sorted[lo] * (1.0 - t) + sorted[hi] * t
            })
            .collect();
        Self {
            mu,
            log_sigma: vec![sigma.ln(); partitions],
        }
    }

    pub fn zero_mean(sigma: &[f64]) -> Self {
        Self::new(vec![0.0; sigma.len()], sigma.to_vec())
    }
}

/// Mean and variance of the predictive mixture at each point.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub std: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllGradients {
    pub loss: f64,
    pub dl_dphi: Array2<f64>,
    pub dl_dmu: Array1<f64>,
    pub dl_dlog_sigma: Array1<f64>,
    pub dl_dq: Array1<f64>,
}

fn check_shapes(phi: ArrayView2<f64>, y: ArrayView1<f64>, q: ArrayView1<f64>, noise: &NoiseModel) -> Result<(), Error> {
    if phi.nrows() != y.len() || y.len() != q.len() || phi.ncols() != noise.len() {
        return Err(Error::Shape(format!(
            "phi {:?}, y {}, q {}, noise components {}",
            phi.dim(),
            y.len(),
            q.len(),
            noise.len()
        )));
    }
    Ok(())
}

/// `Q(x_j) = sum_i phi_i(x_j) p_i(x_j)`.
pub fn q_values(poly: &PolynomialSet, phi: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array1<f64>, Error> {
    if phi.ncols() != poly.num_partitions() || phi.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "phi {:?} does not match {} points and {} polynomials",
            phi.dim(),
            x.nrows(),
            poly.num_partitions()
        )));
    }
    let values = poly.evaluate(x)?;
    Ok((&values * &phi).sum_axis(ndarray::Axis(1)))
}

#[inline]
fn log_normal(y: f64, mean: f64, log_sigma: f64) -> f64 {
    let r = (y - mean) * (-log_sigma).exp();
    -HALF_LN_2PI - log_sigma - 0.5 * r * r
}

/// `log sum_i phi_i N(y | mu_i + q, sigma_i)`.
pub fn log_density(phi_row: ArrayView1<f64>, y: f64, q: f64, noise: &NoiseModel) -> f64 {
    let terms: Vec<f64> = phi_row
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p < ZERO_WEIGHT {
                f64::NEG_INFINITY
            } else {
                p.ln() + log_normal(y, noise.mu[i] + q, noise.log_sigma[i])
            }
        })
        .collect();
    logsumexp(&terms)
}

/// Negative log-likelihood of independent samples.
pub fn nll_loss(
    phi: ArrayView2<f64>,
    y: ArrayView1<f64>,
    q: ArrayView1<f64>,
    noise: &NoiseModel,
) -> Result<f64, Error> {
    check_shapes(phi, y, q, noise)?;
    Ok(-(0..y.len())
        .map(|j| log_density(phi.row(j), y[j], q[j], noise))
        .sum::<f64>())
}

/// Loss and its exact gradients with respect to every argument.
///
/// With responsibilities `g_ij = phi_ij N_ij / p_j` and standardized
/// residuals `r_ij = (y_j - mu_i - q_j) / sigma_i`:
/// `dL/dphi_ij = -N_ij / p_j`, `dL/dmu_i = -sum_j g_ij r_ij / sigma_i`,
/// `dL/dq_j = -sum_i g_ij r_ij / sigma_i`, `dL/dlog sigma_i = -sum_j g_ij (r_ij^2 - 1)`.
pub fn nll_gradients(
    phi: ArrayView2<f64>,
    y: ArrayView1<f64>,
    q: ArrayView1<f64>,
    noise: &NoiseModel,
) -> Result<NllGradients, Error> {
    check_shapes(phi, y, q, noise)?;
    let (n, m) = phi.dim();
    let mut dl_dphi = Array2::<f64>::zeros((n, m));
    let mut dl_dmu = Array1::<f64>::zeros(m);
    let mut dl_dlog_sigma = Array1::<f64>::zeros(m);
    let mut dl_dq = Array1::<f64>::zeros(n);
    let inv_sigma: Vec<f64> = noise.log_sigma.iter().map(|s| (-s).exp()).collect();
    let mut log_n = vec![0.0; m];
    let mut resid = vec![0.0; m];
    let mut terms = vec![0.0; m];
    let mut loss = 0.0;
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for i in 0..m {
            let r = (y[j] - noise.mu[i] - q[j]) * inv_sigma[i];
            resid[i] = r;
            log_n[i] = -HALF_LN_2PI - noise.log_sigma[i] - 0.5 * r * r;
            let p = phi[[j, i]];
            terms[i] = if p < ZERO_WEIGHT {
                f64::NEG_INFINITY
            } else {
                p.ln() + log_n[i]
            };
            max = max.max(terms[i]);
        }
        // responsibilities reuse the logsumexp exponentials
        let mut sum = 0.0;
        for t in terms.iter_mut() {
            *t = if *t == f64::NEG_INFINITY { 0.0 } else { (*t - max).exp() };
            sum += *t;
        }
        let ell = max + sum.ln();
        loss -= ell;
        let mut dq = 0.0;
        for i in 0..m {
            let resp = if sum > 0.0 { terms[i] / sum } else { 0.0 };
            let p = phi[[j, i]];
            dl_dphi[[j, i]] = if resp > 0.0 && p >= ZERO_WEIGHT {
                -resp / p
            } else {
                -(log_n[i] - ell).min(MAX_EXPONENT).exp()
            };
            if resp == 0.0 {
                continue;
            }
            let r = resid[i];
            let pull = resp * r * inv_sigma[i];
            dl_dmu[i] -= pull;
            dq -= pull;
            dl_dlog_sigma[i] -= resp * (r * r - 1.0);
        }
        dl_dq[j] = dq;
    }
    Ok(NllGradients {
        loss,
        dl_dphi,
        dl_dmu,
        dl_dlog_sigma,
        dl_dq,
    })
}

/// Closed-form predictive mean `sum phi (mu + Q)` and variance
/// `sum phi sigma^2 + sum phi mu^2 - (sum phi mu)^2`.
pub fn predict(phi: ArrayView2<f64>, q: ArrayView1<f64>, noise: &NoiseModel) -> Result<Prediction, Error> {
    if phi.nrows() != q.len() || phi.ncols() != noise.len() {
        return Err(Error::Shape(format!(
            "phi {:?}, q {}, noise components {}",
            phi.dim(),
            q.len(),
            noise.len()
        )));
    }
    let n = q.len();
    let sigma_sq: Vec<f64> = noise.log_sigma.iter().map(|s| (2.0 * s).exp()).collect();
    let mut mean = Array1::<f64>::zeros(n);
    let mut variance = Array1::<f64>::zeros(n);
    for (j, row) in phi.rows().into_iter().enumerate() {
        let (mut m0, mut s2, mut mu1, mut mu2) = (0.0, 0.0, 0.0, 0.0);
        for (i, &p) in row.iter().enumerate() {
            let mu = noise.mu[i];
            m0 += p * (mu + q[j]);
            s2 += p * sigma_sq[i];
            mu1 += p * mu;
            mu2 += p * mu * mu;
        }
        mean[j] = m0;
        variance[j] = (s2 + mu2 - mu1 * mu1).max(0.0);
    }
    let std = variance.mapv(f64::sqrt);
    Ok(Prediction { mean, variance, std })
}

/// One draw: partition `i` with probability `phi_i`, then `q + mu_i + sigma_i z`.
pub fn sample_generative<R: Rng + ?Sized>(phi_row: ArrayView1<f64>, q: f64, noise: &NoiseModel, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = phi_row.len() - 1;
    for (i, &p) in phi_row.iter().enumerate() {
        acc += p;
        if u < acc {
            chosen = i;
            break;
        }
    }
    // guard against rounding leaving a zero-weight last component selected
    while phi_row[chosen] == 0.0 && chosen > 0 {
        chosen -= 1;
    }
    let z: f64 = rng.sample(StandardNormal);
    q + noise.mu[chosen] + noise.sigma(chosen) * z
}
