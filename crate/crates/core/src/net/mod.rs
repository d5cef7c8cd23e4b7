//! From-scratch convolutional classifier: tensor layers, losses, optimizers,
//! augmentation, and the training loop.
//!
//! The architecture is a small inception-style network: conv stem, two
//! blocks of parallel 1x1 / 3x3 / 5x5 / pooled-1x1 branches, global average
//! pooling, and a K-unit head read through per-trait sigmoids (traits are not
//! mutually exclusive).

mod augment;
mod checkpoint;
pub mod gradcheck;
mod layers;
mod loss;
mod optim;
mod train;

pub use augment::{augment, transform, AugmentConfig};
pub use checkpoint::{BestStash, Checkpoint, OptSnapshot};
pub use layers::{Cache, Layer};
pub use loss::{cross_entropy_loss, grad_through_sigmoid, hinge_loss, sigmoid, LOSS_PROB_EPS};
pub use optim::{adam_step, sgd_momentum_step, step_lr, OptState, OptimizerKind};
pub use train::{log_csv, train, EpochLog, LossKind, TrainConfig, TrainOutcome};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::LabelVector;
use crate::tensor::{Scalar, Tensor};

/// HU window mapped onto [0,1] before the network sees a slice. A brain
/// window superset; affine and invertible within range so absolute HU stays
/// informative.
pub const HU_WINDOW: (f32, f32) = (-100.0, 300.0);

pub fn normalize_hu(hu: f32) -> f32 {
    ((hu - HU_WINDOW.0) / (HU_WINDOW.1 - HU_WINDOW.0)).clamp(0.0, 1.0)
}

/// Windowed slice as a `[1, rows, cols]` network input.
pub fn slice_to_input<T: Scalar>(pixels: &[f32], rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_vec(
        &[1, rows, cols],
        pixels.iter().map(|&hu| T::from_f32(normalize_hu(hu))).collect(),
    )
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input shape {got:?} does not match the network input {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid network spec: {0}")]
    SpecInvalid(String),
    #[error("every target weight is zero; the loss is undefined")]
    AllMasked,
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged (non-finite loss) at epoch {0}")]
    Divergence(usize),
    #[error("invalid train config: {0}")]
    ConfigInvalid(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint taxonomy hash {got:#x} does not match expected {expected:#x}")]
    TaxonomyHashMismatch { expected: u64, got: u64 },
    #[error("checkpoint parameter `{0}` missing or shaped differently")]
    ParamMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One layer of the architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Parallel 1x1 / 3x3 / 5x5 / pooled-1x1 branches, channel-concatenated.
    InceptionLite {
        b1: usize,
        b3: usize,
        b5: usize,
        bpool: usize,
    },
    GlobalAvgPool,
    Dropout {
        rate: f32,
    },
    Dense {
        out: usize,
    },
}

/// Layered model description; the learned parameters live in [`Checkpoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input as (channels, rows, cols).
    pub input: (usize, usize, usize),
    /// Output units K.
    pub outputs: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Desk architecture: 8-channel stem, two 4/8/4/4 inception-lite blocks,
    /// global average pool, K-unit head.
    pub fn desk_default(input_px: usize, outputs: usize, dropout: f32) -> Self {
        Self {
            input: (1, input_px, input_px),
            outputs,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::InceptionLite {
                    b1: 4,
                    b3: 8,
                    b5: 4,
                    bpool: 4,
                },
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::InceptionLite {
                    b1: 4,
                    b3: 8,
                    b5: 4,
                    bpool: 4,
                },
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dropout { rate: dropout },
                LayerSpec::Dense { out: outputs },
            ],
        }
    }

    /// Propagate shapes through the layer list; errors on any incompatibility
    /// or if the final output length differs from `outputs`.
    pub fn validate(&self) -> Result<(), NetError> {
        let mut shape = self.input;
        if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
            return Err(NetError::SpecInvalid("input shape has a zero dimension".into()));
        }
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Err(NetError::SpecInvalid(format!("layer {i}: {msg}")));
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if flat {
                        return fail("conv after flattening".into());
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return fail("zero conv dimension".into());
                    }
                    let h = (shape.1 + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1);
                    let w = (shape.2 + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1);
                    match (h, w) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => shape = (out_channels, h, w),
                        _ => return fail(format!("kernel {kernel} larger than padded input")),
                    }
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } => {}
                LayerSpec::MaxPool { kernel, stride } => {
                    if flat {
                        return fail("pool after flattening".into());
                    }
                    if kernel == 0 || stride == 0 || shape.1 < kernel || shape.2 < kernel {
                        return fail("pool window larger than input".into());
                    }
                    shape = (
                        shape.0,
                        (shape.1 - kernel) / stride + 1,
                        (shape.2 - kernel) / stride + 1,
                    );
                }
                LayerSpec::InceptionLite { b1, b3, b5, bpool } => {
                    if flat {
                        return fail("inception after flattening".into());
                    }
                    if b1 == 0 || b3 == 0 || b5 == 0 || bpool == 0 {
                        return fail("zero branch width".into());
                    }
                    // 5x5 branch needs pad 2 on both sides
                    if shape.1 < 3 || shape.2 < 3 {
                        return fail("inception needs at least 3x3 input".into());
                    }
                    shape = (b1 + b3 + b5 + bpool, shape.1, shape.2);
                }
                LayerSpec::GlobalAvgPool => {
                    shape = (shape.0, 1, 1);
                }
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return fail("dense with zero outputs".into());
                    }
                    shape = (out, 1, 1);
                    flat = true;
                }
            }
            if let LayerSpec::Dropout { rate } = *layer {
                if !(0.0..1.0).contains(&rate) {
                    return fail(format!("dropout rate {rate} outside [0,1)"));
                }
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) if *out == self.outputs => Ok(()),
            _ => Err(NetError::SpecInvalid(
                "last layer must be a dense head with `outputs` units".into(),
            )),
        }
    }
}

/// A network instance: spec plus parameter tensors, generic over the float.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// He fan-in initialization, deterministic in `rng`. The classifier head
    /// starts near zero so the trunk is not dragged by random cross-talk
    /// between the per-trait outputs.
    pub fn init(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut shape = spec.input;
        for ls in &spec.layers {
            let layer = Layer::init(ls, shape, rng);
            shape = layer.out_shape(shape);
            layers.push(layer);
        }
        if let Some(Layer::Dense(d)) = layers.last_mut() {
            d.w.scale(T::from_f64(0.1));
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NetError> {
        let want = [self.spec.input.0, self.spec.input.1, self.spec.input.2];
        if x.shape() != want {
            return Err(NetError::ShapeMismatch {
                expected: want.to_vec(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Inference forward: dropout is exactly the identity.
    pub fn forward_eval(&self, x: Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.check_input(&x)?;
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward_eval(cur);
        }
        Ok(cur)
    }

    /// Training forward: returns pre-sigmoid logits plus per-layer caches.
    pub fn forward_train(
        &self,
        x: Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>), NetError> {
        self.check_input(&x)?;
        let mut cur = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward_train(cur, rng);
            cur = next;
            caches.push(cache);
        }
        Ok((cur, caches))
    }

    /// Per-trait posteriors for one slice input.
    pub fn posteriors(&self, x: Tensor<T>) -> Result<LabelVector, NetError> {
        let logits = self.forward_eval(x)?;
        Ok(LabelVector::new(
            logits
                .data()
                .iter()
                .map(|&z| sigmoid(z).to_f32_val())
                .collect(),
        ))
    }

    /// Backpropagate `dlogits` through the cached forward pass; gradients are
    /// summed per parameter (duplicating a sample doubles its contribution).
    pub fn backward(&self, caches: &[Cache<T>], dlogits: Tensor<T>) -> Gradients<T> {
        let mut dcur = dlogits;
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, grads) = layer.backward(&caches[i], dcur);
            dcur = dx;
            per_layer[i] = grads;
        }
        Gradients { per_layer }
    }

    /// Mutable references to every parameter tensor, in checkpoint order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    /// Parameter names aligned with [`Self::param_tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for n in layer.param_names() {
                names.push(format!("l{i}.{n}"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Snapshot parameters as f32 named tensors (checkpoint form).
    pub fn snapshot(&self) -> Vec<(String, Tensor<f32>)> {
        self.param_names()
            .into_iter()
            .zip(self.param_tensors())
            .map(|(n, t)| (n, t.cast::<f32>()))
            .collect()
    }

    /// Load named f32 tensors into this network; names and shapes must match.
    pub fn load_params(&mut self, params: &[(String, Tensor<f32>)]) -> Result<(), NetError> {
        let names = self.param_names();
        let tensors = self.param_tensors_mut();
        if params.len() != names.len() {
            return Err(NetError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                names.len(),
                params.len()
            )));
        }
        for ((name, dst), (got_name, src)) in names.iter().zip(tensors).zip(params) {
            if name != got_name || dst.shape() != src.shape() {
                return Err(NetError::ParamMismatch(name.clone()));
            }
            *dst = src.cast();
        }
        Ok(())
    }

    pub fn zero_params(&mut self) {
        for t in self.param_tensors_mut() {
            t.fill(T::zero());
        }
    }
}

/// Per-layer parameter gradients, aligned with the network's layers.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    per_layer: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<&Tensor<T>> {
        self.per_layer.iter().flatten().collect()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for layer in &mut self.per_layer {
            for t in layer {
                t.scale(s);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.per_layer.iter().flatten().all(Tensor::all_finite)
    }
}

/// Gaussian draw via Box-Muller on the uniform stream.
pub(crate) fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Multi-label prediction: thresholded positives plus the argmax diagnostic
/// index (ties break toward the lowest index).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub positives: Vec<usize>,
    pub top: usize,
}

/// Threshold at 0.5 per trait; argmax for the single-label diagnostic mode.
pub fn predict(scores: &LabelVector) -> Prediction {
    let positives = (0..scores.len()).filter(|&k| scores.get(k) >= 0.5).collect();
    let mut top = 0;
    for k in 1..scores.len() {
        if scores.get(k) > scores.get(top) {
            top = k;
        }
    }
    Prediction { positives, top }
}
