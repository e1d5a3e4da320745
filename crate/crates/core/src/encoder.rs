//! MLP feature map with ReLU hidden layers and an L2-normalised output.
//!
//! Layer `k` computes `h = a·W_k + b_k` with `W_k` stored as `in × out`.
//! Hidden layers apply ReLU; the last layer is linear and its rows are then
//! normalised to the unit sphere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{self, l2_normalize_rows, matmul, matmul_nt, matmul_tn, Matrix, Rng, RowNormalization, Stream};
use crate::pgirm::HyperplaneSet;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    weight: Matrix,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::invalid(format!(
                "bias length {} does not match layer width {}",
                bias.len(),
                weight.cols()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias".into()));
        }
        Ok(Dense { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn apply(&self, a: &Matrix) -> Result<Matrix> {
        let mut h = matmul(a, &self.weight)?;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// `W ~ N(0, 2 / fan_in)`, zero biases.
    #[default]
    KaimingNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Activations retained by [`MlpEncoder::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
    norm: RowNormalization,
}

/// Parameter gradients, shaped like the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(enc: &MlpEncoder) -> Self {
        GradBuffer {
            weights: enc
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: enc.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.scale(0.0));
        self.biases.iter_mut().flatten().for_each(|b| *b = 0.0);
    }

    /// Same flattening order as [`MlpEncoder::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    fn matches(&self, enc: &MlpEncoder) -> bool {
        self.weights.len() == enc.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&enc.layers)
                .all(|((w, b), l)| w.shape() == l.weight.shape() && b.len() == l.bias.len())
    }
}

impl MlpEncoder {
    /// Encoder with all parameters zero. Call [`MlpEncoder::init`] before use:
    /// an all-zero encoder maps every input to the zero vector, which the
    /// normalization guard rejects.
    pub fn zeroed(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "encoder dims must have at least two positive entries, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(MlpEncoder {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut enc = MlpEncoder::zeroed(dims)?;
        enc.init(seed, InitScheme::KaimingNormal);
        Ok(enc)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("encoder needs at least one layer"))?;
        let mut dims = vec![first.weight.rows()];
        for (k, l) in layers.iter().enumerate() {
            if l.weight.rows() != *dims.last().unwrap() {
                return Err(Error::invalid(format!("layer {k} input width mismatch")));
            }
            dims.push(l.weight.cols());
        }
        Ok(MlpEncoder { dims, layers })
    }

    /// Each layer draws from its own sub-stream of `seed`.
    pub fn init(&mut self, seed: u64, scheme: InitScheme) {
        match scheme {
            InitScheme::KaimingNormal => {
                for (k, layer) in self.layers.iter_mut().enumerate() {
                    let mut rng = Rng::derive(seed, Stream::Init, k as u64);
                    let fan_in = layer.weight.rows();
                    let std = (2.0 / fan_in as f64).sqrt();
                    layer.weight = Matrix::random_normal(fan_in, layer.weight.cols(), std, &mut rng);
                    layer.bias.iter_mut().for_each(|b| *b = 0.0);
                }
            }
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Weights then bias, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&params[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "encoder forward",
                left: x.shape(),
                right: (x.rows(), self.input_dim()),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let h = layer.apply(&a)?;
            inputs.push(a);
            a = if k < last {
                let mut r = h.clone();
                r.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                r
            } else {
                h.clone()
            };
            pre.push(h);
        }
        let norm = l2_normalize_rows(&a)?;
        let z = norm.output().clone();
        Ok((z, ForwardCache { inputs, pre, norm }))
    }

    /// Unit-norm embeddings without keeping a cache.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, cache: &ForwardCache, dl_dz: &Matrix) -> Result<GradBuffer> {
        Ok(self.backward_with_input(cache, dl_dz)?.0)
    }

    /// Parameter gradients plus `∂L/∂x`.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        dl_dz: &Matrix,
    ) -> Result<(GradBuffer, Matrix)> {
        let stale = cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(a, l)| a.cols() != l.weight.rows());
        if stale {
            return Err(Error::invalid("forward cache does not match this encoder"));
        }
        if dl_dz.shape() != cache.norm.output().shape() {
            return Err(Error::ShapeMismatch {
                op: "encoder backward",
                left: dl_dz.shape(),
                right: cache.norm.output().shape(),
            });
        }
        let mut grads = GradBuffer::zeros_like(self);
        let mut delta = cache.norm.backward(dl_dz)?;
        for k in (0..self.layers.len()).rev() {
            grads.weights[k] = matmul_tn(&cache.inputs[k], &delta)?;
            let gb = &mut grads.biases[k];
            for r in delta.row_iter() {
                for (g, v) in gb.iter_mut().zip(r) {
                    *g += v;
                }
            }
            // ∂L/∂a_k = δ · W_kᵀ
            let mut da = matmul_nt(&delta, &self.layers[k].weight)?;
            if k > 0 {
                let h = &cache.pre[k - 1];
                for (d, &hv) in da.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    if hv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = da;
        }
        Ok((grads, delta))
    }

    /// `θ ← θ − γ(g + λ_wd·θ)` on weights, `θ ← θ − γg` on biases.
    pub fn sgd_step(&mut self, grads: &GradBuffer, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !grads.matches(self) {
            return Err(Error::invalid("gradient buffer does not match encoder shapes"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("encoder gradient".into()));
        }
        let mut next = self.layers.clone();
        for ((layer, gw), gb) in next.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= lr * (g + weight_decay * *w);
            }
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        let finite = next
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()));
        if !finite {
            return Err(Error::NonFinite("encoder parameters after update".into()));
        }
        self.layers = next;
        Ok(())
    }
}

/// Encoder and hyperplanes at a given epoch, stored as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    pub encoder: MlpEncoder,
    pub hyperplanes: HyperplaneSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.encoder.dims() != ck.dims.as_slice() {
            return Err(Error::invalid("checkpoint dims disagree with encoder layers"));
        }
        let params_ok = ck.encoder.flat_params().iter().all(|v| v.is_finite());
        if !params_ok {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(ck)
    }
}

/// `‖z_row‖ = 1` check used by callers that accept embeddings from outside.
pub fn rows_are_unit(z: &Matrix, tol: f64) -> bool {
    z.row_iter().all(|r| (numkit::norm(r) - 1.0).abs() <= tol)
}
