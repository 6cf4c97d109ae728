//! The trainable encoder: a small tanh MLP whose output is L2-normalized,
//! a linear coarse-label head on top of the normalized embedding, and the
//! scalar `b_raw` that parametrizes the STAR base as `B = exp(b_raw)`.
//!
//! Parameters are addressed through a flat view (layer weights, layer
//! biases, head weights, head bias, `b_raw`, in that order). Gradients and
//! optimizer moments use the same layout.

mod adamw;
mod checkpoint;

pub use adamw::{AdamW, AdamWConfig, OptimizerState};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream_rng, StreamRng};
use crate::vecmath::{self, UnitEmbedding};

/// Initial STAR base.
pub const DEFAULT_BASE: f64 = 10.0;

/// A fully connected layer, `y = W x + b`, with `W` stored row-major
/// (`out_dim` rows of `in_dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let layer = Dense {
            in_dim,
            out_dim,
            weights,
            bias,
        };
        layer.validate("layer")?;
        Ok(layer)
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn glorot(in_dim: usize, out_dim: usize, rng: &mut StreamRng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::ShapeMismatch {
                what: what.into(),
                detail: "dimensions must be at least 1".into(),
            });
        }
        if self.weights.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::ShapeMismatch {
                what: what.into(),
                detail: format!(
                    "{}x{} layer holds {} weights and {} biases",
                    self.out_dim,
                    self.in_dim,
                    self.weights.len(),
                    self.bias.len()
                ),
            });
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| vecmath::dot(row, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` (this layer's slice of
    /// the flat layout) and returns the gradient with respect to `x`.
    fn backward(&self, x: &[f64], g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (g_w, g_b) = grad.split_at_mut(self.weights.len());
        for (o, &g) in g_out.iter().enumerate() {
            let row = &mut g_w[o * self.in_dim..(o + 1) * self.in_dim];
            for (gw, xi) in row.iter_mut().zip(x) {
                *gw += g * xi;
            }
            g_b[o] += g;
        }
        let mut g_x = vec![0.0; self.in_dim];
        for (o, &g) in g_out.iter().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (gx, w) in g_x.iter_mut().zip(row) {
                *gx += g * w;
            }
        }
        g_x
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, flat: &[f64]) -> usize {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..nw + self.out_dim]);
        nw + self.out_dim
    }

    fn bias_mask(&self, out: &mut Vec<bool>) {
        out.extend(std::iter::repeat_n(false, self.weights.len()));
        out.extend(std::iter::repeat_n(true, self.bias.len()));
    }
}

/// The projection network `F_θ` without the classifier head. Layers are
/// joined by tanh; the last layer's output is normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    pub layers: Vec<Dense>,
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; entry 0 is the raw features.
    inputs: Vec<Vec<f64>>,
    raw_norm: f64,
    embedding: UnitEmbedding,
}

impl Trace {
    pub fn embedding(&self) -> &UnitEmbedding {
        &self.embedding
    }
}

impl EncoderNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        let net = EncoderNet { layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch {
                what: "encoder".into(),
                detail: "at least one layer required".into(),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(&format!("encoder layer {i}"))?;
            if i > 0 && layer.in_dim != self.layers[i - 1].out_dim {
                return Err(Error::ShapeMismatch {
                    what: format!("encoder layer {i}"),
                    detail: format!(
                        "input {} does not match previous output {}",
                        layer.in_dim,
                        self.layers[i - 1].out_dim
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Layer widths `[d_in, hidden..., d]`.
    pub fn shape(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn encode(&self, x: &[f64]) -> Result<UnitEmbedding> {
        Ok(self.forward(x)?.embedding)
    }

    pub fn encode_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<UnitEmbedding>> {
        xs.iter().map(|x| self.encode(x)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.apply(&act);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(act);
            act = out;
        }
        let raw_norm = vecmath::norm(&act);
        let embedding = vecmath::normalize(&act)?;
        Ok(Trace {
            inputs,
            raw_norm,
            embedding,
        })
    }

    /// Backpropagates `g_q` (gradient with respect to the normalized output)
    /// and accumulates into `grad`, which covers exactly this network's
    /// slice of the flat layout.
    pub fn backward(&self, trace: &Trace, g_q: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.num_params());
        let q = trace.embedding.as_slice();
        let radial = vecmath::dot(q, g_q);
        let mut g: Vec<f64> = g_q
            .iter()
            .zip(q)
            .map(|(gi, qi)| (gi - qi * radial) / trace.raw_norm)
            .collect();

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.num_params();
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let slice = &mut grad[offsets[i]..offsets[i] + layer.num_params()];
            let g_in = layer.backward(&trace.inputs[i], &g, slice);
            if i > 0 {
                // The input to layer i is tanh of layer i-1's output.
                g = g_in
                    .iter()
                    .zip(&trace.inputs[i])
                    .map(|(gv, a)| gv * (1.0 - a * a))
                    .collect();
            }
        }
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            layer.write_flat(out);
        }
    }

    fn read_flat(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for layer in &mut self.layers {
            off += layer.read_flat(&flat[off..]);
        }
        off
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }

    fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for layer in &self.layers {
            layer.weights.iter().copied().for_each(&mut f);
            layer.bias.iter().copied().for_each(&mut f);
        }
    }
}

/// Trainable state: projection network, coarse head, and `b_raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub net: EncoderNet,
    pub head: Dense,
    pub b_raw: f64,
}

/// Gradient-free moving-average copy of the projection network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumParams(pub EncoderNet);

impl MomentumParams {
    pub fn from_encoder(params: &EncoderParams) -> Self {
        MomentumParams(params.net.clone())
    }

    pub fn net(&self) -> &EncoderNet {
        &self.0
    }
}

/// Deterministic Glorot-uniform initialization; biases start at zero and
/// `b_raw` at `ln 10`.
pub fn init_encoder(
    d_in: usize,
    hidden: &[usize],
    d: usize,
    n_coarse: usize,
    seed: u64,
) -> Result<EncoderParams> {
    if d_in == 0 || d == 0 || n_coarse == 0 || hidden.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "encoder dims must be >= 1 (d_in={d_in}, hidden={hidden:?}, d={d}, M={n_coarse})"
        )));
    }
    let mut rng = stream_rng(seed, "encoder-init");
    let widths: Vec<usize> = std::iter::once(d_in)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(d))
        .collect();
    let layers = widths
        .windows(2)
        .map(|w| Dense::glorot(w[0], w[1], &mut rng))
        .collect();
    let head = Dense::glorot(d, n_coarse, &mut rng);
    Ok(EncoderParams {
        net: EncoderNet { layers },
        head,
        b_raw: DEFAULT_BASE.ln(),
    })
}

impl EncoderParams {
    pub fn new(net: EncoderNet, head: Dense, b_raw: f64) -> Result<Self> {
        let params = EncoderParams { net, head, b_raw };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.head.validate("classifier head")?;
        if self.head.in_dim != self.net.output_dim() {
            return Err(Error::ShapeMismatch {
                what: "classifier head".into(),
                detail: format!(
                    "head input {} does not match embedding dim {}",
                    self.head.in_dim,
                    self.net.output_dim()
                ),
            });
        }
        if !self.b_raw.is_finite() {
            return Err(Error::non_finite("b_raw"));
        }
        Ok(())
    }

    /// The STAR base `B = exp(b_raw)`, always positive.
    pub fn base(&self) -> f64 {
        self.b_raw.exp()
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn n_coarse(&self) -> usize {
        self.head.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.head.num_params() + 1
    }

    /// Index of `b_raw` in the flat layout.
    pub fn b_raw_index(&self) -> usize {
        self.num_params() - 1
    }

    /// Range of the classifier head in the flat layout.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let start = self.net.num_params();
        start..start + self.head.num_params()
    }

    pub fn encode(&self, x: &[f64]) -> Result<UnitEmbedding> {
        self.net.encode(x)
    }

    pub fn encode_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<UnitEmbedding>> {
        self.net.encode_batch(xs)
    }

    /// Coarse logits for a normalized embedding.
    pub fn classify_coarse(&self, q: &UnitEmbedding) -> Vec<f64> {
        self.head.apply(q.as_slice())
    }

    /// Accumulates head gradients for upstream `g_logits` and returns the
    /// gradient with respect to the embedding.
    pub(crate) fn head_backward(&self, q: &[f64], g_logits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let range = self.head_range();
        self.head.backward(q, g_logits, &mut grad[range])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.net.write_flat(&mut out);
        self.head.write_flat(&mut out);
        out.push(self.b_raw);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let off = self.net.read_flat(flat);
        let off = off + self.head.read_flat(&flat[off..]);
        self.b_raw = flat[off];
        Ok(())
    }

    /// `true` for entries exempt from weight decay (biases and `b_raw`).
    pub fn no_decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        for layer in &self.net.layers {
            layer.bias_mask(&mut mask);
        }
        self.head.bias_mask(&mut mask);
        mask.push(true);
        mask
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// `θ_k ← m θ_k + (1 − m) θ`, elementwise.
pub fn momentum_update(
    momentum: &MomentumParams,
    params: &EncoderParams,
    m: f64,
) -> Result<MomentumParams> {
    let mut next = momentum.clone();
    momentum_update_in_place(&mut next, params, m)?;
    Ok(next)
}

pub fn momentum_update_in_place(
    momentum: &mut MomentumParams,
    params: &EncoderParams,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "momentum coefficient {m} outside [0, 1]"
        )));
    }
    if momentum.0.shape() != params.net.shape() {
        return Err(Error::ShapeMismatch {
            what: "momentum encoder".into(),
            detail: format!(
                "momentum shape {:?} vs encoder shape {:?}",
                momentum.0.shape(),
                params.net.shape()
            ),
        });
    }
    let mut source = Vec::with_capacity(params.net.num_params());
    params.net.for_each_param(|v| source.push(v));
    let mut it = source.into_iter();
    momentum.0.for_each_param_mut(|slot| {
        let theta = it.next().expect("shapes checked above");
        *slot = if m == 1.0 {
            *slot
        } else if m == 0.0 {
            theta
        } else {
            m * *slot + (1.0 - m) * theta
        };
    });
    Ok(())
}
