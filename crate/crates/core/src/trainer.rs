//! Adam and the three-stage fitting pipeline.

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::Dataset;
use crate::mixture::{self, NoiseModel, Prediction};
use crate::polyfit::{fit_weighted_ls, LsWeighting, PolynomialSet};
use crate::pou_net::{fit_input_affine, PouNetwork, DEFAULT_RESIDUAL_BLOCKS, DEFAULT_WIDTH};
use crate::refine::{build_forest_from_phi, classify, refine_partitions, RefinementForest};

/// Noise scales never drop below this fraction of the label range.
pub const SIGMA_FLOOR_FRACTION: f64 = 1e-6;
/// Loss is recorded every this many iterations.
pub const TRACE_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Partition,
    Noise,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Partition => write!(f, "stage 1 (partition training)"),
            Stage::Noise => write!(f, "stage 3 (noise calibration)"),
        }
    }
}

/// Parameters in effect just before a non-finite value appeared.
#[derive(Debug, Clone, PartialEq)]
pub struct LastGood {
    pub net: PouNetwork,
    pub noise: NoiseModel,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {quantity} in {stage} at iteration {iteration} (parameter block `{block}`)")]
    NonFinite {
        stage: Stage,
        iteration: usize,
        quantity: &'static str,
        block: String,
        last_good: Box<LastGood>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] crate::Error),
}

impl From<crate::pou_net::NetError> for TrainError {
    fn from(e: crate::pou_net::NetError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of trained partitions `M`.
    pub partitions: usize,
    /// Polynomial degree `m`.
    pub degree: usize,
    /// Bisection levels `N_ref`.
    pub refinements: usize,
    pub stage1_iters: usize,
    pub stage3_iters: usize,
    pub learning_rate: f64,
    pub width: usize,
    pub residual_blocks: usize,
    pub seed: u64,
    pub weighting: LsWeighting,
    /// Stage-1 starts to probe; the one with the lowest probe loss is trained in full.
    pub restarts: usize,
    /// Stage-1 iterations per probe when `restarts > 1`.
    pub probe_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            partitions: 4,
            degree: 1,
            refinements: 1,
            stage1_iters: 10_000,
            stage3_iters: 500,
            learning_rate: 0.01,
            width: DEFAULT_WIDTH,
            residual_blocks: DEFAULT_RESIDUAL_BLOCKS,
            seed: 0,
            weighting: LsWeighting::Squared,
            restarts: 1,
            probe_iters: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.partitions == 0 {
            return Err(TrainError::Config("at least one partition is required".into()));
        }
        if self.width == 0 {
            return Err(TrainError::Config("network width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.restarts == 0 {
            return Err(TrainError::Config("at least one stage-1 start is required".into()));
        }
        if self.refinements > 20 {
            return Err(TrainError::Config(format!(
                "{} refinement levels is too many",
                self.refinements
            )));
        }
        Ok(())
    }

    /// `M_tot = M * 2^N_ref`.
    pub fn total_partitions(&self) -> usize {
        self.partitions << self.refinements
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    /// Bias-corrected Adam update. On a non-finite gradient nothing is
    /// modified and the offending index is returned.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), usize> {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(bad);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            let g = grads[k];
            self.first[k] = self.beta1 * self.first[k] + (1.0 - self.beta1) * g;
            self.second[k] = self.beta2 * self.second[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[k] / c1;
            let v_hat = self.second[k] / c2;
            params[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    /// Training points won (argmax) by each trained partition.
    pub stage1_counts: Vec<usize>,
    /// Training points won by each refined partition.
    pub refined_counts: Vec<usize>,
    pub empty_partitions: Vec<usize>,
    pub unsplit_nodes: usize,
    pub ambiguous_splits: usize,
    /// Stage-1 means; discarded afterwards since constants live in the polynomials.
    pub stage1_mu: Vec<f64>,
    pub sigma_floor: f64,
    /// Seed of the stage-1 start that was kept.
    pub stage1_seed: u64,
    /// Final probe loss per start; empty for a single start.
    pub probe_losses: Vec<f64>,
    pub stage1_trace: Vec<LossRecord>,
    pub stage3_trace: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedModel {
    pub config: TrainConfig,
    pub net: PouNetwork,
    pub forest: RefinementForest,
    pub poly: PolynomialSet,
    pub noise_stage1: NoiseModel,
    pub noise_final: NoiseModel,
    pub report: FitReport,
}

impl FittedModel {
    pub fn stage1_phi(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, crate::Error> {
        Ok(self.net.partitions(x)?)
    }

    pub fn refined_phi(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, crate::Error> {
        crate::refine::refined_phi(&self.net, &self.forest, x)
    }

    /// Mean and variance of the fitted mixture at `x`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Prediction, crate::Error> {
        let phi = self.refined_phi(x)?;
        self.predict_with_phi(phi.view(), x)
    }

    pub fn predict_with_phi(&self, phi: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Prediction, crate::Error> {
        let q = mixture::q_values(&self.poly, phi, x)?;
        mixture::predict(phi, q.view(), &self.noise_final)
    }

    /// Stage-1 prediction: `Q = 0` with the trained means and scales.
    pub fn predict_stage1(&self, x: ArrayView2<f64>) -> Result<Prediction, crate::Error> {
        let phi = self.stage1_phi(x)?;
        mixture::predict(phi.view(), Array1::zeros(x.nrows()).view(), &self.noise_stage1)
    }
}

/// Output of stage 1.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub net: PouNetwork,
    pub noise: NoiseModel,
    pub trace: Vec<LossRecord>,
    pub seed: u64,
    pub probe_losses: Vec<f64>,
}

/// Distinct input points plus, per sample, the row of its point. Repeated
/// coordinates (snapshot databases) are pushed through the network once.
struct Samples {
    points: Array2<f64>,
    owner: Option<Vec<usize>>,
}

impl Samples {
    fn group(x: ArrayView2<f64>) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut owner = Vec::with_capacity(x.nrows());
        let mut keep = Vec::new();
        for (j, row) in x.axis_iter(Axis(0)).enumerate() {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let next = index.len();
            let slot = *index.entry(key).or_insert_with(|| {
                keep.push(j);
                next
            });
            owner.push(slot);
        }
        if keep.len() == x.nrows() {
            Samples {
                points: x.to_owned(),
                owner: None,
            }
        } else {
            Samples {
                points: x.select(Axis(0), &keep),
                owner: Some(owner),
            }
        }
    }

    fn expand(&self, per_point: Array2<f64>) -> Array2<f64> {
        match &self.owner {
            None => per_point,
            Some(owner) => per_point.select(Axis(0), owner),
        }
    }

    fn collapse(&self, per_sample: Array2<f64>) -> Array2<f64> {
        match &self.owner {
            None => per_sample,
            Some(owner) => {
                let mut out = Array2::<f64>::zeros((self.points.nrows(), per_sample.ncols()));
                for (j, row) in per_sample.axis_iter(Axis(0)).enumerate() {
                    let mut dst = out.row_mut(owner[j]);
                    dst += &row;
                }
                out
            }
        }
    }
}

pub fn sigma_floor(y: ArrayView1<f64>) -> f64 {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    SIGMA_FLOOR_FRACTION * if range > 0.0 { range } else { 1.0 }
}

fn block_name(blocks: &[(String, usize)], mut index: usize) -> String {
    for (name, len) in blocks {
        if index < *len {
            return name.clone();
        }
        index -= len;
    }
    "unknown".to_string()
}

/// Stage 1: Adam on network weights, means and log-scales with `Q = 0`.
pub fn train_stage1(data: &Dataset, cfg: &TrainConfig) -> Result<Stage1, TrainError> {
    cfg.validate()?;
    if data.len() < cfg.partitions {
        return Err(TrainError::Config(format!(
            "{} samples cannot support {} partitions",
            data.len(),
            cfg.partitions
        )));
    }
    let samples = Samples::group(data.x.view());
    train_stage1_grouped(&samples, data, cfg)
}

/// splitmix64 of `base + salt * golden`.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(salt));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stage-1 start `r`; start 0 uses the configured seed.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        seed
    } else {
        mix_seed(seed, r as u64)
    }
}

fn train_stage1_grouped(samples: &Samples, data: &Dataset, cfg: &TrainConfig) -> Result<Stage1, TrainError> {
    if cfg.restarts <= 1 || cfg.partitions == 1 {
        return run_stage1(samples, data, cfg, cfg.seed, cfg.stage1_iters);
    }
    let probe_iters = cfg.probe_iters.min(cfg.stage1_iters);
    let mut probe_losses = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let probe = run_stage1(samples, data, cfg, restart_seed(cfg.seed, r), probe_iters)?;
        probe_losses.push(probe.trace.last().map_or(f64::INFINITY, |t| t.loss));
    }
    // first minimum wins ties
    let best = (0..cfg.restarts).fold(0, |b, r| if probe_losses[r] < probe_losses[b] { r } else { b });
    // rerunning from scratch reproduces the probe exactly and continues it
    let mut out = run_stage1(samples, data, cfg, restart_seed(cfg.seed, best), cfg.stage1_iters)?;
    out.probe_losses = probe_losses;
    Ok(out)
}

fn run_stage1(
    samples: &Samples,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    iters: usize,
) -> Result<Stage1, TrainError> {
    let y = data.y.view();
    let affine = fit_input_affine(data.x.view())?;
    let mut net = PouNetwork::box_init_with_blocks(data.dim(), cfg.width, cfg.partitions, cfg.residual_blocks, seed)
        .with_affine(affine);
    let mut noise = NoiseModel::from_label_quantiles(y, cfg.partitions);
    let log_floor = sigma_floor(y).ln();
    for s in noise.log_sigma.iter_mut() {
        *s = s.max(log_floor);
    }

    let q = Array1::<f64>::zeros(data.len());
    let net_len = net.param_count();
    let m = cfg.partitions;
    let mut blocks = net.param_blocks();
    blocks.push(("mu".to_string(), m));
    blocks.push(("log_sigma".to_string(), m));
    let mut adam = AdamState::new(net_len + 2 * m, cfg.learning_rate);
    let mut trace = Vec::with_capacity(iters / TRACE_EVERY + 2);
    let mut params = Vec::with_capacity(net_len + 2 * m);

    // a single softmax output is identically 1 and its backward pass is exactly
    // zero, so the network is left alone
    let single = m == 1;
    let ones = Array2::<f64>::ones((data.len(), 1));
    for iteration in 0..=iters {
        let eval = if single {
            None
        } else {
            Some(net.forward(samples.points.view())?)
        };
        let phi = match &eval {
            Some(e) => samples.expand(e.phi.clone()),
            None => ones.clone(),
        };
        let g = mixture::nll_gradients(phi.view(), y, q.view(), &noise)?;
        let last_good = || {
            Box::new(LastGood {
                net: net.clone(),
                noise: noise.clone(),
            })
        };
        if !g.loss.is_finite() {
            return Err(TrainError::NonFinite {
                stage: Stage::Partition,
                iteration,
                quantity: "loss",
                block: "loss".into(),
                last_good: last_good(),
            });
        }
        if iteration % TRACE_EVERY == 0 || iteration == iters {
            trace.push(LossRecord {
                iteration,
                loss: g.loss,
            });
        }
        if iteration == iters {
            break;
        }
        let mut grads = match &eval {
            Some(e) => net.backward(e, samples.collapse(g.dl_dphi).view())?.flatten(),
            None => vec![0.0; net_len],
        };
        grads.extend(g.dl_dmu.iter());
        grads.extend(g.dl_dlog_sigma.iter());

        params.clear();
        params.extend(net.flatten_params());
        params.extend(noise.mu.iter());
        params.extend(noise.log_sigma.iter());
        if let Err(bad) = adam.step(&mut params, &grads) {
            return Err(TrainError::NonFinite {
                stage: Stage::Partition,
                iteration,
                quantity: "gradient",
                block: block_name(&blocks, bad),
                last_good: last_good(),
            });
        }
        net.assign_params(&params[..net_len]);
        noise.mu.copy_from_slice(&params[net_len..net_len + m]);
        for (dst, &src) in noise.log_sigma.iter_mut().zip(&params[net_len + m..]) {
            *dst = src.max(log_floor);
        }
    }
    Ok(Stage1 {
        net,
        noise,
        trace,
        seed,
        probe_losses: Vec::new(),
    })
}

/// Stage 3 on an explicit setup: only the log-scales move, means stay 0.
///
/// Each scale starts at the `phi`-weighted RMS residual of its partition.
pub fn calibrate_noise(
    phi: ArrayView2<f64>,
    y: ArrayView1<f64>,
    q: ArrayView1<f64>,
    cfg: &TrainConfig,
    net_for_diagnostics: &PouNetwork,
) -> Result<(NoiseModel, Vec<LossRecord>), TrainError> {
    let (n, m) = phi.dim();
    let floor = sigma_floor(y);
    let residual_sq: Vec<f64> = (0..n).map(|j| (y[j] - q[j]).powi(2)).collect();
    let global = (residual_sq.iter().sum::<f64>() / n.max(1) as f64).sqrt();
    let sigma: Vec<f64> = phi
        .axis_iter(Axis(1))
        .map(|w| {
            let mass: f64 = w.sum();
            let s = if mass > 1e-12 {
                (w.iter().zip(&residual_sq).map(|(a, b)| a * b).sum::<f64>() / mass).sqrt()
            } else {
                global
            };
            s.max(floor)
        })
        .collect();
    let mut noise = NoiseModel::zero_mean(&sigma);
    let log_floor = floor.ln();
    let mut adam = AdamState::new(m, cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.stage3_iters / TRACE_EVERY + 2);
    for iteration in 0..=cfg.stage3_iters {
        let g = mixture::nll_gradients(phi, y, q, &noise)?;
        let last_good = || {
            Box::new(LastGood {
                net: net_for_diagnostics.clone(),
                noise: noise.clone(),
            })
        };
        if !g.loss.is_finite() {
            return Err(TrainError::NonFinite {
                stage: Stage::Noise,
                iteration,
                quantity: "loss",
                block: "loss".into(),
                last_good: last_good(),
            });
        }
        if iteration % TRACE_EVERY == 0 || iteration == cfg.stage3_iters {
            trace.push(LossRecord {
                iteration,
                loss: g.loss,
            });
        }
        if iteration == cfg.stage3_iters {
            break;
        }
        let mut params = noise.log_sigma.clone();
        if adam
            .step(&mut params, g.dl_dlog_sigma.as_slice().expect("contiguous"))
            .is_err()
        {
            return Err(TrainError::NonFinite {
                stage: Stage::Noise,
                iteration,
                quantity: "gradient",
                block: "log_sigma".into(),
                last_good: last_good(),
            });
        }
        for (dst, src) in noise.log_sigma.iter_mut().zip(params) {
            *dst = src.max(log_floor);
        }
    }
    Ok((noise, trace))
}

/// Stage 3: scales of the refined partitions with the fitted polynomials fixed.
pub fn train_stage3(
    data: &Dataset,
    net: &PouNetwork,
    forest: &RefinementForest,
    poly: &PolynomialSet,
    cfg: &TrainConfig,
) -> Result<NoiseModel, TrainError> {
    let phi = crate::refine::refined_phi(net, forest, data.x.view())?;
    let q = mixture::q_values(poly, phi.view(), data.x.view())?;
    Ok(calibrate_noise(phi.view(), data.y.view(), q.view(), cfg, net)?.0)
}

fn counts(labels: &[usize], len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for &l in labels {
        out[l] += 1;
    }
    out
}

/// Stage 1, bisection, least-squares polynomials, stage 3.
pub fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<FittedModel, TrainError> {
    cfg.validate()?;
    if data.len() < cfg.partitions {
        return Err(TrainError::Config(format!(
            "{} samples cannot support {} partitions",
            data.len(),
            cfg.partitions
        )));
    }
    let samples = Samples::group(data.x.view());
    let stage1 = train_stage1_grouped(&samples, data, cfg)?;
    finish_fit(data, cfg, &samples, stage1)
}

/// Runs the post-stage-1 pipeline for several refinement depths and degrees
/// sharing one stage-1 result.
pub fn fit_from_stage1(data: &Dataset, cfg: &TrainConfig, stage1: &Stage1) -> Result<FittedModel, TrainError> {
    cfg.validate()?;
    let samples = Samples::group(data.x.view());
    finish_fit(data, cfg, &samples, stage1.clone())
}

fn finish_fit(data: &Dataset, cfg: &TrainConfig, samples: &Samples, stage1: Stage1) -> Result<FittedModel, TrainError> {
    let Stage1 {
        net,
        noise,
        trace,
        seed,
        probe_losses,
    } = stage1;
    if net.num_partitions() != cfg.partitions {
        return Err(TrainError::Config(
            "stage-1 network partition count differs from configuration".into(),
        ));
    }
    let x = data.x.view();
    let phi = samples.expand(net.partitions(samples.points.view())?);
    let (forest, refine_report) = build_forest_from_phi(phi.view(), x, cfg.refinements)?;
    let phi_ref = refine_partitions(phi.view(), &forest, x)?;
    let (poly, poly_report) =
        fit_weighted_ls(phi_ref.view(), x, data.y.view(), cfg.degree, &net.affine, cfg.weighting)?;
    let q = mixture::q_values(&poly, phi_ref.view(), x)?;
    let (noise_final, stage3_trace) = calibrate_noise(phi_ref.view(), data.y.view(), q.view(), cfg, &net)?;

    let report = FitReport {
        stage1_counts: counts(&classify(phi.view()), cfg.partitions),
        refined_counts: counts(&classify(phi_ref.view()), forest.total_partitions()),
        empty_partitions: poly_report.empty_partitions,
        unsplit_nodes: refine_report.unsplit_nodes,
        ambiguous_splits: refine_report.ambiguous_splits,
        stage1_mu: noise.mu.clone(),
        sigma_floor: sigma_floor(data.y.view()),
        stage1_seed: seed,
        probe_losses,
        stage1_trace: trace,
        stage3_trace,
    };
    Ok(FittedModel {
        config: cfg.clone(),
        net,
        forest,
        poly,
        noise_stage1: noise,
        noise_final,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{gen_sin1d, Dataset};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn quick(partitions: usize, iters: usize) -> TrainConfig {
        TrainConfig {
            partitions,
            stage1_iters: iters,
            stage3_iters: 200,
            width: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut adam = AdamState::new(3, 0.01);
        let mut p = vec![0.0; 3];
        adam.step(&mut p, &[2.5, -1e-3, 40.0]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-7);
        assert!((p[2] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let mut a = AdamState::new(2, 0.05);
        let mut b = a.clone();
        let (mut pa, mut pb) = (vec![0.3, 0.1], vec![0.3, 0.1]);
        a.step(&mut pa, &[0.2, -0.7]).unwrap();
        b.step(&mut pb, &[0.2, -0.7]).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        assert_eq!(a.step(&mut pa, &[0.0, f64::NAN]), Err(1));
        assert_eq!(pa, pb);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn block_names_cover_layout() {
        let blocks = vec![("a".to_string(), 2), ("b".to_string(), 3)];
        assert_eq!(block_name(&blocks, 0), "a");
        assert_eq!(block_name(&blocks, 4), "b");
    }

    #[test]
    fn single_partition_recovers_gaussian_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let x = Array2::from_shape_fn((n, 1), |(j, _)| j as f64 / (n - 1) as f64);
        let y = Array1::from_shape_simple_fn(n, || 2.0 + 0.7 * rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(x, y.clone()).unwrap();
        let s1 = train_stage1(&data, &quick(1, 1500)).unwrap();
        let mean = y.mean().unwrap();
        let std = (y.mapv(|v| (v - mean).powi(2)).mean().unwrap()).sqrt();
        assert!(
            (s1.noise.mu[0] - mean).abs() < 0.02 * std,
            "mu {} vs {mean}",
            s1.noise.mu[0]
        );
        assert!(
            (s1.noise.sigma(0) - std).abs() < 0.02 * std,
            "sigma {} vs {std}",
            s1.noise.sigma(0)
        );
    }

    #[test]
    fn single_partition_leaves_network_at_init() {
        let data = gen_sin1d(50, 0);
        let cfg = quick(1, 20);
        let s1 = train_stage1(&data, &cfg).unwrap();
        let init = PouNetwork::box_init_with_blocks(1, cfg.width, 1, cfg.residual_blocks, cfg.seed)
            .with_affine(fit_input_affine(data.x.view()).unwrap());
        assert_eq!(s1.net, init);
        // the skipped backward pass is exactly zero
        let eval = init.forward(data.x.view()).unwrap();
        let g = init.backward(&eval, Array2::from_elem((50, 1), 0.7).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_level_data_is_separated() {
        let n = 200;
        let x = Array2::from_shape_fn((n, 1), |(j, _)| j as f64 / (n - 1) as f64);
        // levels alternate over three x-intervals
        let level = |v: f64| if (0.3..0.65).contains(&v) { 1usize } else { 0 };
        let y = Array1::from_shape_fn(n, |j| if level(x[[j, 0]]) == 1 { 1.0 } else { -1.0 });
        let data = Dataset::new(x.clone(), y).unwrap();
        let s1 = train_stage1(&data, &quick(2, 2000)).unwrap();
        let labels = classify(s1.net.partitions(x.view()).unwrap().view());
        let agree = (0..n).filter(|&j| labels[j] == level(x[[j, 0]])).count();
        let agreement = agree.max(n - agree) as f64 / n as f64;
        assert!(agreement >= 0.95, "agreement {agreement}");
    }

    #[test]
    fn stage1_loss_decreases() {
        let data = gen_sin1d(200, 0);
        let s1 = train_stage1(&data, &quick(3, 1000)).unwrap();
        let first = s1.trace.first().unwrap();
        let last = s1.trace.last().unwrap();
        assert_eq!(first.iteration, 0);
        assert_eq!(last.iteration, 1000);
        assert!(last.loss < first.loss);
        assert_eq!(s1.trace.len(), 101);
    }

    #[test]
    fn stage3_matches_known_residual_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 2000;
        let s = 0.25;
        let x = Array2::from_shape_fn((n, 1), |(j, _)| j as f64 / (n - 1) as f64);
        let q = Array1::from_shape_fn(n, |j| 3.0 * x[[j, 0]]);
        let y = &q + &Array1::from_shape_simple_fn(n, || s * rng.sample::<f64, _>(StandardNormal));
        let phi = Array2::ones((n, 1));
        let net = PouNetwork::box_init(1, 4, 1, 0);
        let (noise, _) = calibrate_noise(phi.view(), y.view(), q.view(), &quick(1, 0), &net).unwrap();
        assert_eq!(noise.mu, vec![0.0]);
        assert!((noise.sigma(0) - s).abs() < 0.05 * s);
    }

    #[test]
    fn stage3_collapses_to_floor_on_exact_fit() {
        let n = 50;
        let y = Array1::from_shape_fn(n, |j| j as f64);
        let phi = Array2::ones((n, 1));
        let net = PouNetwork::box_init(1, 4, 1, 0);
        let (noise, _) = calibrate_noise(phi.view(), y.view(), y.view(), &quick(1, 0), &net).unwrap();
        let floor = sigma_floor(y.view());
        assert!((noise.sigma(0) - floor).abs() <= 1e-9 * floor);
    }

    #[test]
    fn fit_pipeline_shapes_and_determinism() {
        let data = gen_sin1d(120, 0);
        let cfg = TrainConfig {
            refinements: 2,
            degree: 1,
            ..quick(3, 300)
        };
        let a = fit(&data, &cfg).unwrap();
        assert_eq!(a.forest.total_partitions(), 12);
        assert_eq!(a.poly.num_partitions(), 12);
        assert_eq!(a.noise_final.len(), 12);
        assert!(a.noise_final.mu.iter().all(|&m| m == 0.0));
        assert_eq!(a.report.refined_counts.iter().sum::<usize>(), 120);
        assert_eq!(a.report.stage1_mu, a.noise_stage1.mu);
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn piecewise_constant_pipeline() {
        let data = gen_sin1d(100, 0);
        let cfg = TrainConfig {
            refinements: 0,
            degree: 0,
            ..quick(3, 300)
        };
        let model = fit(&data, &cfg).unwrap();
        assert_eq!(model.poly.basis_len(), 1);
        let x = data.x.view();
        let phi = model.refined_phi(x).unwrap();
        assert_eq!(phi, model.stage1_phi(x).unwrap());
        let pred = model.predict(x).unwrap();
        let expected = phi.dot(&model.poly.coeffs.column(0));
        for (a, b) in pred.mean.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_points_match_explicit_duplication() {
        // grouping is an evaluation shortcut: gradients are the same sums in a
        // different order, and Adam amplifies that rounding over many steps
        let base = gen_sin1d(30, 0);
        let x = ndarray::concatenate![Axis(0), base.x, base.x];
        let y = ndarray::concatenate![Axis(0), base.y, base.y.mapv(|v| v + 0.1)];
        let data = Dataset::new(x, y).unwrap();
        let cfg = quick(2, 10);
        let grouped = Samples::group(data.x.view());
        assert_eq!(grouped.points.nrows(), 30);
        let ungrouped = Samples {
            points: data.x.clone(),
            owner: None,
        };
        let a = train_stage1_grouped(&grouped, &data, &cfg).unwrap();
        let b = train_stage1_grouped(&ungrouped, &data, &cfg).unwrap();
        let (pa, pb) = (a.net.flatten_params(), b.net.flatten_params());
        for (u, v) in pa.iter().zip(&pb) {
            assert!((u - v).abs() < 1e-9 * u.abs().max(1.0), "{u} vs {v}");
        }
    }

    #[test]
    fn config_validation() {
        let data = Dataset::new(array![[0.0], [1.0]], array![0.0, 1.0]).unwrap();
        assert!(matches!(fit(&data, &quick(3, 1)), Err(TrainError::Config(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..quick(1, 1)
        };
        assert!(matches!(fit(&data, &bad), Err(TrainError::Config(_))));
    }
}
