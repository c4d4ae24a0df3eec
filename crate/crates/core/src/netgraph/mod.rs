//! Sequential layer graphs: shape checking, forward pass with an activation
//! cache, and hand-written backward passes.
//!
//! Gradients are always taken with respect to the pre-sigmoid class logit;
//! the sigmoid head exists only in [`ForwardPass::probs`].

mod blobs;
mod layer;
mod model_io;
mod train;

pub use blobs::{generate_blob_dataset, BlobRect, BlobSample, BLOB_CLASSES};
pub use layer::{BatchNorm, Conv2d, Dense, Layer, BN_EPSILON, SUPPORTED_KINDS};
pub use model_io::{load_model, save_model, MANIFEST_FORMAT_VERSION, MANIFEST_NAME};
pub use train::{toy_cnn, train, LabeledSample, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A shape-checked sequential network with a multi-label sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    /// `shapes[l]` is the shape of activation `l`; `shapes[0]` is the input.
    shapes: Vec<Vec<usize>>,
}

/// Every intermediate of one forward pass. Activation `0` is the input and
/// activation `l + 1` is the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    activations: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ActivationCache {
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn layer_input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    /// Flat input offsets chosen by a max-pool layer, if `layer` is one.
    pub fn pool_argmax(&self, layer: usize) -> Option<&[usize]> {
        self.argmax[layer].as_deref()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub probs: Tensor,
    pub cache: ActivationCache,
}

/// Gradients of one class logit with respect to every cached activation.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub activations: Vec<Tensor>,
}

impl Gradients {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input shape must be [C,H,W] with nonzero extents, got {input_shape:?}"
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().expect("nonempty"))?;
            shapes.push(next);
        }
        let last = shapes.last().expect("nonempty");
        if last != &[num_classes] {
            return Err(Error::Shape {
                context: format!("network output for {num_classes} classes"),
                expected: vec![num_classes],
                actual: last.clone(),
            });
        }
        Ok(Network {
            layers,
            input_shape,
            num_classes,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape of activation `l` (`0` is the input).
    pub fn activation_shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                "network input",
                &self.input_shape,
                input.shape(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, idx) = layer.forward(activations.last().expect("nonempty"));
            check_finite(i, layer, &out)?;
            activations.push(out);
            argmax.push(idx);
        }
        let logits = activations.last().expect("nonempty").clone();
        let probs = logits.map(sigmoid);
        Ok(ForwardPass {
            logits,
            probs,
            cache: ActivationCache {
                activations,
                argmax,
            },
        })
    }

    /// Logits only; no cache is kept.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x).0;
            check_finite(i, layer, &x)?;
        }
        Ok(x)
    }

    /// Sigmoid probabilities only.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .logits(input)?
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect())
    }

    fn check_cache(&self, cache: &ActivationCache) -> Result<()> {
        if cache.activations.len() != self.shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "stale activation cache: {} activations for a {}-layer network",
                cache.activations.len(),
                self.layers.len()
            )));
        }
        for (l, (a, s)) in cache.activations.iter().zip(&self.shapes).enumerate() {
            if a.shape() != s.as_slice() {
                return Err(Error::shape(
                    format!("stale activation cache at activation {l}"),
                    s,
                    a.shape(),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn check_class(&self, class_index: usize) -> Result<()> {
        if class_index >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class index {class_index} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Gradient of logit `class_index` with respect to the input and every
    /// cached activation.
    pub fn backward_gradient(
        &self,
        cache: &ActivationCache,
        class_index: usize,
    ) -> Result<Gradients> {
        self.check_class(class_index)?;
        self.check_cache(cache)?;
        let mut seed = Tensor::zeros(&[self.num_classes]);
        seed.data_mut()[class_index] = 1.0;
        let (activations, _) = self.backward(cache, seed, false);
        Ok(Gradients { activations })
    }

    /// Backpropagates `grad_logits`. Returns activation gradients (indexed
    /// like the cache) and, when requested, per-layer parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &ActivationCache,
        grad_logits: Tensor,
        with_params: bool,
    ) -> (Vec<Tensor>, Vec<Vec<Tensor>>) {
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n + 1];
        let mut params = vec![Vec::new(); n];
        let mut g = grad_logits;
        for l in (0..n).rev() {
            let (gin, pg) = self.layers[l].backward(
                cache.layer_input(l),
                cache.layer_output(l),
                cache.pool_argmax(l),
                &g,
                with_params,
            );
            grads[l + 1] = Some(g);
            params[l] = pg;
            g = gin;
        }
        grads[0] = Some(g);
        (
            grads.into_iter().map(|g| g.expect("filled")).collect(),
            params,
        )
    }
}

fn check_finite(i: usize, layer: &Layer, out: &Tensor) -> Result<()> {
    if !out.all_finite() {
        return Err(Error::NonFinite(format!(
            "activation of layer {i} ({})",
            layer.kind_name()
        )));
    }
    Ok(())
}
