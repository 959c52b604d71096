//! Residual tanh network with a softmax head producing a partition of unity.
//!
//! Layout: affine projection `d -> W`, a stack of residual blocks
//! `h <- h + tanh(A h + c)`, affine head `W -> M`, row softmax. Inputs are
//! first mapped into the unit box by an [`InputAffine`] fitted to the data.
//! Gradients are derived by hand for this fixed architecture.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::softmax_rows;

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_RESIDUAL_BLOCKS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// Per-coordinate map `u = scale * x + shift` onto `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl InputAffine {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut u = x.to_owned();
        for mut row in u.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = self.scale[k] * *v + self.shift[k];
            }
        }
        u
    }
}

/// Fits the bounding-box map; zero-range coordinates map to the constant 0.5.
pub fn fit_input_affine(x: ArrayView2<f64>) -> Result<InputAffine, NetError> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(NetError::Input("cannot fit an input map to an empty point set".into()));
    }
    let d = x.ncols();
    let mut scale = Vec::with_capacity(d);
    let mut shift = Vec::with_capacity(d);
    for col in x.axis_iter(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(NetError::Input("non-finite coordinate in point set".into()));
        }
        let range = hi - lo;
        if range > 0.0 {
            scale.push(1.0 / range);
            shift.push(-lo / range);
        } else {
            scale.push(0.0);
            shift.push(0.5);
        }
    }
    Ok(InputAffine { scale, shift })
}

/// Affine layer `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn glorot(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out, inp), || rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: Array1::zeros(out),
        }
    }

    fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Network parameters (the partition-of-unity half of the model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PouNetwork {
    pub affine: InputAffine,
    pub input: Dense,
    pub blocks: Vec<Dense>,
    pub head: Dense,
}

/// Gradient record with the same layout as [`PouNetwork`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradients {
    pub input: Dense,
    pub blocks: Vec<Dense>,
    pub head: Dense,
}

/// Partition values for a batch plus the activations needed by `backward`.
#[derive(Debug, Clone)]
pub struct PartitionEval {
    pub phi: Array2<f64>,
    unit: Array2<f64>,
    hidden: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
}

impl PouNetwork {
    /// Box initialization with the default number of residual blocks.
    pub fn box_init(input_dim: usize, width: usize, partitions: usize, seed: u64) -> Self {
        Self::box_init_with_blocks(input_dim, width, partitions, DEFAULT_RESIDUAL_BLOCKS, seed)
    }

    /// Each first-layer unit gets a random direction `k` on the sphere and a
    /// random anchor `p` in the unit box; the row is `k / s` with bias
    /// `-k.p / s`, where `s` is the largest `|k.(c - p)|` over box corners `c`.
    /// The unit's zero level set therefore passes through the box and its
    /// pre-activation spans `[-1, 1]` over it.
    pub fn box_init_with_blocks(
        input_dim: usize,
        width: usize,
        partitions: usize,
        residual_blocks: usize,
        seed: u64,
    ) -> Self {
        assert!(input_dim >= 1 && width >= 1 && partitions >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = Dense::zeros(width, input_dim);
        for unit in 0..width {
            let k = loop {
                let k: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break k.into_iter().map(|v| v / norm).collect::<Vec<_>>();
                }
            };
            let p: Vec<f64> = (0..input_dim).map(|_| rng.random_range(0.0..1.0)).collect();
            // corners enter separably: extremes of k.(c - p) over c in {0,1}^d
            let (mut hi, mut lo) = (0.0, 0.0);
            for j in 0..input_dim {
                let a = -k[j] * p[j];
                let b = k[j] * (1.0 - p[j]);
                hi += a.max(b);
                lo += a.min(b);
            }
            let s = f64::max(hi, -lo);
            let kp: f64 = k.iter().zip(&p).map(|(a, b)| a * b).sum();
            for j in 0..input_dim {
                input.weight[[unit, j]] = k[j] / s;
            }
            input.bias[unit] = -kp / s;
        }
        let blocks = (0..residual_blocks)
            .map(|_| Dense::glorot(width, width, &mut rng))
            .collect();
        // a zero head starts every partition at 1/M, so no partition is
        // starved of gradient before the means have settled
        let head = Dense::zeros(partitions, width);
        Self {
            affine: InputAffine::identity(input_dim),
            input,
            blocks,
            head,
        }
    }

    pub fn with_affine(mut self, affine: InputAffine) -> Self {
        assert_eq!(affine.dim(), self.input_dim());
        self.affine = affine;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input.weight.ncols()
    }

    pub fn width(&self) -> usize {
        self.input.weight.nrows()
    }

    pub fn num_partitions(&self) -> usize {
        self.head.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<PartitionEval, NetError> {
        if x.ncols() != self.input_dim() {
            return Err(NetError::Input(format!(
                "points have {} coordinates, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(NetError::Input(format!(
                "non-finite coordinate at row {}",
                pos / x.ncols().max(1)
            )));
        }
        let unit = self.affine.apply(x);
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut h = self.input.apply(&unit);
        for block in &self.blocks {
            let t = block.apply(&h).mapv_into(f64::tanh);
            let next = &h + &t;
            hidden.push(h);
            activations.push(t);
            h = next;
        }
        let mut phi = self.head.apply(&h);
        hidden.push(h);
        softmax_rows(&mut phi);
        Ok(PartitionEval {
            phi,
            unit,
            hidden,
            activations,
        })
    }

    /// Partition values only, dropping the backward cache.
    pub fn partitions(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        Ok(self.forward(x)?.phi)
    }

    /// Reverse-mode gradient of a scalar loss given `dL/dphi`.
    pub fn backward(&self, eval: &PartitionEval, dl_dphi: ArrayView2<f64>) -> Result<NetworkGradients, NetError> {
        let (n, m) = eval.phi.dim();
        if dl_dphi.dim() != (n, m) || m != self.num_partitions() {
            return Err(NetError::Usage(format!(
                "dL/dphi has shape {:?}, forward produced {:?} for {} partitions",
                dl_dphi.dim(),
                (n, m),
                self.num_partitions()
            )));
        }
        if eval.hidden.len() != self.blocks.len() + 1
            || eval.hidden.iter().any(|h| h.dim() != (n, self.width()))
            || eval.unit.dim() != (n, self.input_dim())
        {
            return Err(NetError::Usage("forward cache does not match this network".into()));
        }

        // softmax: dz_k = phi_k (g_k - sum_i phi_i g_i); zero-weight entries drop out
        let mut dz = Array2::<f64>::zeros((n, m));
        Zip::from(dz.rows_mut())
            .and(eval.phi.rows())
            .and(dl_dphi.rows())
            .for_each(|mut dz_row, phi_row, g_row| {
                let mean: f64 = phi_row
                    .iter()
                    .zip(g_row.iter())
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, g)| p * g)
                    .sum();
                for ((d, &p), &g) in dz_row.iter_mut().zip(phi_row.iter()).zip(g_row.iter()) {
                    *d = if p > 0.0 { p * (g - mean) } else { 0.0 };
                }
            });

        let top = eval.hidden.last().expect("hidden states");
        let head = Dense {
            weight: dz.t().dot(top),
            bias: dz.sum_axis(Axis(0)),
        };
        let mut dh = dz.dot(&self.head.weight);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let t = &eval.activations[b];
            let mut dpre = dh.clone();
            Zip::from(&mut dpre).and(t).for_each(|d, &tv| *d *= 1.0 - tv * tv);
            blocks.push(Dense {
                weight: dpre.t().dot(&eval.hidden[b]),
                bias: dpre.sum_axis(Axis(0)),
            });
            dh += &dpre.dot(&block.weight);
        }
        blocks.reverse();

        let input = Dense {
            weight: dh.t().dot(&eval.unit),
            bias: dh.sum_axis(Axis(0)),
        };
        Ok(NetworkGradients { input, blocks, head })
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::len).sum()
    }

    /// Names and lengths of the flattened parameter blocks, in flatten order.
    pub fn param_blocks(&self) -> Vec<(String, usize)> {
        let mut out = vec![
            ("input.weight".to_string(), self.input.weight.len()),
            ("input.bias".to_string(), self.input.bias.len()),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.weight"), block.weight.len()));
            out.push((format!("block{b}.bias"), block.bias.len()));
        }
        out.push(("head.weight".to_string(), self.head.weight.len()));
        out.push(("head.bias".to_string(), self.head.bias.len()));
        out
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        flatten(self.layers())
    }

    pub fn assign_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut offset = 0;
        for layer in self.layers_mut() {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = flat[offset];
                offset += 1;
            }
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        std::iter::once(&self.input)
            .chain(self.blocks.iter())
            .chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        std::iter::once(&mut self.input)
            .chain(self.blocks.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }
}

impl NetworkGradients {
    /// Flattened in the same order as [`PouNetwork::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten(
            std::iter::once(&self.input)
                .chain(self.blocks.iter())
                .chain(std::iter::once(&self.head)),
        )
    }
}

fn flatten<'a>(layers: impl Iterator<Item = &'a Dense>) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend(layer.weight.iter().copied());
        out.extend(layer.bias.iter().copied());
    }
    out
}
