//! Small fully connected embedding backbone with manual reverse-mode
//! gradients, the learnable classifier and the orthogonal layer.

mod adam;
pub mod checkpoint;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::error::{numeric, structural, Error, Result};
use crate::linalg::{
    mat_exp, orthogonality_defect, skew_from_params, skew_param_grad, Matrix, SkewParams,
};
use crate::losses::{mode_loss, LossBreakdown, LossSpec};
use crate::trainer::Prototypes;

/// Largest tolerated `max |QᵀQ − I|` after a refresh.
pub const ORTHO_TOLERANCE: f64 = 1e-8;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Fully connected layer, `y = x Wᵀ + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Rectifier MLP; identity activation on the last layer.
#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<Dense>,
    // changes on every parameter mutation; ties forward caches to parameters
    stamp: u64,
}

impl PartialEq for Backbone {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`Backbone::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre_acts: Vec<Matrix>,
    stamp: u64,
}

impl ForwardCache {
    /// Backbone output (`h_new`).
    pub fn output(&self) -> &Matrix {
        self.pre_acts
            .last()
            .expect("backbone has at least one layer")
    }

    pub fn batch(&self) -> &Matrix {
        &self.inputs[0]
    }
}

/// Gradient of one [`Dense`] layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Backbone {
    /// Deterministic He-uniform initialization, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(layer_dims, &mut rng)
    }

    pub fn init_with<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(structural(format!(
                "backbone needs at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(structural(format!(
                "layer dims must be positive: {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Dense {
                    weight: Matrix::new(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(structural("backbone needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(structural(format!(
                    "layer {i}: bias len {} for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(structural(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates earlier forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Dense::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(structural(format!(
                "batch has {} columns, backbone expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_nt(&layer.weight)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn relu(z: &Matrix) -> Matrix {
        let mut a = z.clone();
        a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        a
    }

    /// Embeds a batch and records activations for [`backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let mut inputs = vec![batch.clone()];
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::layer_forward(layer, &inputs[i])?;
            if i + 1 < self.layers.len() {
                inputs.push(Self::relu(&z));
            }
            pre_acts.push(z);
        }
        let cache = ForwardCache {
            inputs,
            pre_acts,
            stamp: self.stamp,
        };
        Ok((cache.output().clone(), cache))
    }

    /// Inference-only embedding.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::layer_forward(layer, &x)?;
            x = if i < last { Self::relu(&z) } else { z };
        }
        Ok(x)
    }

    /// Pulls `∂L/∂h` back through the layers.
    pub fn backprop(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<Vec<DenseGrad>> {
        if cache.stamp != self.stamp {
            return Err(Error::Usage(
                "forward cache is stale: backbone parameters changed since the forward pass".into(),
            ));
        }
        let out = cache.output();
        if grad_out.shape() != out.shape() {
            return Err(structural(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                out.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let z = &cache.pre_acts[i];
                for (g, &zv) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let x = &cache.inputs[i];
            let weight = grad.matmul_tn(x)?;
            let mut bias = vec![0.0; grad.cols()];
            for r in grad.row_iter() {
                for (b, g) in bias.iter_mut().zip(r) {
                    *b += g;
                }
            }
            let next = if i > 0 {
                Some(grad.matmul(&self.layers[i].weight)?)
            } else {
                None
            };
            grads.push(DenseGrad { weight, bias });
            if let Some(n) = next {
                grad = n;
            }
        }
        grads.reverse();
        Ok(grads)
    }
}

/// Splits `h_new` into the compatible slice and the extra slice.
pub fn split_embedding(h_new: &[f64], d_old: usize) -> Result<(&[f64], &[f64])> {
    if d_old >= h_new.len() {
        return Err(structural(format!(
            "d_old = {d_old} leaves no extra dimensions in a {}-dim embedding",
            h_new.len()
        )));
    }
    Ok(h_new.split_at(d_old))
}

pub fn concat_embedding(h_bct: &[f64], h_e: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(h_bct.len() + h_e.len());
    v.extend_from_slice(h_bct);
    v.extend_from_slice(h_e);
    v
}

/// Linear classifier, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weight: Matrix,
}

impl Classifier {
    pub fn from_matrix(weight: Matrix) -> Self {
        Self { weight }
    }

    /// Rows drawn uniformly from `[-1/√dim, 1/√dim]`.
    pub fn random<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(structural(format!(
                "classifier needs positive sizes, got {num_classes} x {dim}"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..num_classes * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            weight: Matrix::new(num_classes, dim, data)?,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Learnable orthogonal map `h ↦ Q h` with `Q = exp(A)`, `A` skew-symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoLayer {
    params: SkewParams,
    q: Matrix,
    fresh: bool,
}

impl OrthoLayer {
    pub fn new(params: SkewParams) -> Result<Self> {
        let dim = params.dim();
        let mut layer = Self {
            params,
            q: Matrix::identity(dim),
            fresh: false,
        };
        layer.refresh()?;
        Ok(layer)
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Self::new(SkewParams::random(dim, scale, rng))
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn params(&self) -> &SkewParams {
        &self.params
    }

    /// Mutable parameter access; call [`OrthoLayer::refresh`] afterwards.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.fresh = false;
        self.params.values_mut()
    }

    pub fn is_fresh(&self) -> bool {
        self.fresh
    }

    /// Recomputes `Q` and returns its orthogonality defect.
    pub fn refresh(&mut self) -> Result<f64> {
        let q = mat_exp(&skew_from_params(&self.params)?)?;
        let defect = orthogonality_defect(&q)?;
        if defect > ORTHO_TOLERANCE {
            return Err(numeric(format!(
                "orthogonal layer defect {defect:e} exceeds {ORTHO_TOLERANCE:e}"
            )));
        }
        self.q = q;
        self.fresh = true;
        Ok(defect)
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    /// Applies `Q` to each row of `h`.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix> {
        h.matmul_nt(&self.q)
    }
}

/// Gradients for every trainable tensor. Frozen prototypes have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<DenseGrad>,
    pub ortho: Option<Vec<f64>>,
    pub classifier: Matrix,
}

impl Gradients {
    /// Flattened tensors in optimizer order: layer weights and biases, skew
    /// parameters (if any), classifier.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in &self.backbone {
            out.push(g.weight.as_slice());
            out.push(&g.bias);
        }
        if let Some(o) = &self.ortho {
            out.push(o);
        }
        out.push(self.classifier.as_slice());
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Loss and exact gradients for one mini-batch.
///
/// `cache` must come from `model.forward` on the current parameters.
/// `loss_scale` seeds the reverse pass (1 for plain training).
#[allow(clippy::too_many_arguments)]
pub fn backward(
    model: &Backbone,
    cache: &ForwardCache,
    ortho: Option<&OrthoLayer>,
    classifier: &Classifier,
    prototypes: Option<&Prototypes>,
    labels: &[usize],
    spec: &LossSpec,
    loss_scale: f64,
) -> Result<(LossBreakdown, Gradients)> {
    if cache.stamp != model.stamp {
        return Err(Error::Usage(
            "forward cache is stale: backbone parameters changed since the forward pass".into(),
        ));
    }
    let ortho = if spec.mode.uses_ortho() {
        let layer = ortho
            .ok_or_else(|| structural(format!("mode {} needs an orthogonal layer", spec.mode)))?;
        if !layer.is_fresh() {
            return Err(Error::Usage(
                "orthogonal layer parameters changed without a refresh".into(),
            ));
        }
        Some(layer)
    } else {
        None
    };
    let out = mode_loss(cache.output(), ortho, labels, classifier, prototypes, spec)?;
    let mut grad_h = out.grad_h;
    grad_h.scale(loss_scale);
    let backbone = model.backprop(cache, &grad_h)?;
    let ortho_grad = match (ortho, out.grad_q) {
        (Some(layer), Some(mut gq)) => {
            gq.scale(loss_scale);
            Some(skew_param_grad(layer.params(), &gq)?)
        }
        _ => None,
    };
    let mut classifier_grad = out.grad_w;
    classifier_grad.scale(loss_scale);
    Ok((
        out.breakdown,
        Gradients {
            backbone,
            ortho: ortho_grad,
            classifier: classifier_grad,
        },
    ))
}
