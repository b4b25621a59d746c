//! Minimal differentiable-layer engine used by the encoder, decoder, and
//! denoiser networks.
//!
//! Every layer implements forward passes in two modes (training uses batch
//! statistics and updates running stats; inference uses frozen stats and is
//! callable through `&self`) and an explicit reverse-mode `backward` that can
//! optionally accumulate parameter gradients. Networks are flat stacks of
//! boxed layers; caches produced by a forward pass are consumed by the
//! matching backward pass.

mod act;
mod conv;
mod norm;
mod power;
mod residual;
mod upsample;

pub use act::{PRelu, Relu, TanhLayer};
pub use conv::Conv2d;
pub use norm::{BatchNorm2d, ScaleNorm};
pub use power::PowerNorm;
pub use residual::ResidualBlock;
pub use upsample::Upsample2x;

use ndarray::{Array1, Array4, ArrayD, ArrayViewD, ArrayViewMutD};

/// Batched activation tensor `(N, C, H, W)`.
pub type Batch = Array4<f64>;

/// Per-layer state captured by a forward pass for use in backward.
pub enum Cache {
    None,
    Input(Batch),
    Output(Batch),
    Norm {
        normalized: Batch,
        inv_std: Array1<f64>,
        train: bool,
    },
    ScaleNorm {
        input: Batch,
        inv_scale: Array1<f64>,
        train: bool,
    },
    Power {
        input: Batch,
        squared_norms: Vec<f64>,
    },
    Residual {
        main: Vec<Cache>,
        skip: Option<Box<Cache>>,
    },
}

pub trait Layer: Send + Sync {
    /// Inference-mode forward using frozen statistics.
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache);

    /// Training-mode forward. Layers with batch statistics override this;
    /// stateless layers behave identically in both modes.
    fn forward_train(&mut self, x: &Batch) -> (Batch, Cache) {
        self.forward_eval(x)
    }

    /// Reverse-mode step. When `param_grads` is provided it must have exactly
    /// `params().len()` slots (in `params()` order) and receives accumulated
    /// gradients; when absent, parameter gradients are skipped entirely.
    fn backward(&self, cache: &Cache, grad_out: &Batch, param_grads: Option<&mut [ArrayD<f64>]>)
        -> Batch;

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        Vec::new()
    }

    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    /// Non-trainable state (running statistics) that must persist in
    /// checkpoints.
    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        Vec::new()
    }

    /// All named tensors (parameters then buffers) for serialization.
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .collect();
        out.extend(self.buffers());
        out
    }

    /// Mutable counterpart of [`Layer::tensors`]; layers with buffers override
    /// this to expose them alongside the parameters.
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let names = self.param_names();
        names.into_iter().zip(self.params_mut()).collect()
    }

    /// Projects parameters back onto their valid domain after an optimizer
    /// step (e.g. nonnegative activation slopes).
    fn apply_constraints(&mut self) {}

    fn name(&self) -> &'static str;
}

/// A sequential stack of layers.
pub struct Network {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Network {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Network { layers }
    }

    pub fn forward_train(&mut self, x: &Batch) -> (Batch, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = layer.forward_train(&h);
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    pub fn forward_eval(&self, x: &Batch) -> (Batch, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, cache) = layer.forward_eval(&h);
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    /// Inference pass without gradient caches.
    pub fn infer(&self, x: &Batch) -> Batch {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_eval(&h).0;
        }
        h
    }

    /// Walks the stack in reverse. `caches` must come from a matching forward
    /// pass. Returns the gradient with respect to the network input.
    pub fn backward(
        &self,
        caches: &[Cache],
        grad_out: &Batch,
        mut grads: Option<&mut GradStore>,
    ) -> Batch {
        assert_eq!(caches.len(), self.layers.len(), "cache/layer count mismatch");
        let counts: Vec<usize> = self.layers.iter().map(|l| l.params().len()).collect();
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for c in &counts {
            offsets.push(acc);
            acc += c;
        }
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let pg = match grads {
                Some(ref mut store) => {
                    Some(&mut store.slots[offsets[i]..offsets[i] + counts[i]])
                }
                None => None,
            };
            g = self.layers[i].backward(&caches[i], &g, pg);
        }
        g
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params().len()).sum()
    }

    /// Total number of scalar parameters.
    pub fn scalar_param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn apply_constraints(&mut self) {
        for layer in &mut self.layers {
            layer.apply_constraints();
        }
    }

    /// All parameters and buffers with hierarchical names under `prefix`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, view) in layer.tensors() {
                out.push((format!("{prefix}.{i}.{name}"), view));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, view) in layer.tensors_mut() {
                out.push((format!("{prefix}.{i}.{name}"), view));
            }
        }
        out
    }
}

/// Gradient accumulator aligned with a network's `params()` order.
pub struct GradStore {
    pub slots: Vec<ArrayD<f64>>,
}

impl GradStore {
    pub fn for_network(net: &Network) -> Self {
        GradStore {
            slots: net
                .params()
                .iter()
                .map(|p| ArrayD::zeros(p.raw_dim()))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for slot in &mut self.slots {
            slot.fill(0.0);
        }
    }
}

/// Adds `src` into `dst`; shapes must match.
pub(crate) fn accumulate(dst: &mut ArrayD<f64>, src: &ArrayD<f64>) {
    debug_assert_eq!(dst.shape(), src.shape());
    dst.zip_mut_with(src, |d, s| *d += s);
}
