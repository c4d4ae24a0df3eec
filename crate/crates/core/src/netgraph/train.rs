//! Minimal deterministic Adam trainer with per-class binary cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{Conv2d, Dense, Layer};
use super::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: Tensor,
    /// One 0/1 target per class.
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss (averaged over classes) of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// The default desk-scale architecture:
/// `Conv 3x3 (8) -> ReLU -> MaxPool 2 -> Conv 3x3 (16) -> ReLU -> GAP -> Dense`.
/// Weights are He-normal from `seed`, biases zero.
pub fn toy_cnn(input_shape: &[usize], num_classes: usize, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = input_shape[0];
    let mut he = |shape: &[usize], fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| normal.sample(&mut rng))
    };
    let conv1 = Conv2d {
        kernels: he(&[8, c, 3, 3], c * 9),
        bias: Tensor::zeros(&[8]),
        stride: 1,
        pad: 1,
    };
    let conv2 = Conv2d {
        kernels: he(&[16, 8, 3, 3], 8 * 9),
        bias: Tensor::zeros(&[16]),
        stride: 1,
        pad: 1,
    };
    let head = Dense {
        weights: he(&[num_classes, 16], 16),
        bias: Tensor::zeros(&[num_classes]),
    };
    Network::new(
        input_shape.to_vec(),
        num_classes,
        vec![
            Layer::Conv2d(conv1),
            Layer::Relu,
            Layer::MaxPool2d {
                window: 2,
                stride: 2,
            },
            Layer::Conv2d(conv2),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense(head),
        ],
    )
    .expect("toy architecture composes for inputs of at least 2x2")
}

/// Numerically stable binary cross-entropy on a logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Per-sample loss and parameter gradients of the class-averaged BCE.
fn sample_gradients(net: &Network, sample: &LabeledSample) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let fwd = net.forward(&sample.input)?;
    let k = net.num_classes() as f64;
    let z = fwd.logits.data();
    let loss = z
        .iter()
        .zip(&sample.labels)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum::<f64>()
        / k;
    let grad_logits = Tensor::from_fn(&[z.len()], |i| (fwd.probs.data()[i] - sample.labels[i]) / k);
    let (_, params) = net.backward(&fwd.cache, grad_logits, true);
    Ok((loss, params))
}

/// Trains a copy of `net` with Adam (β1 0.9, β2 0.999, ε 1e-8). Per-sample
/// gradients inside a minibatch may be computed in parallel; they are summed
/// in sample order so the result is bit-identical for a given seed.
pub fn train(
    net: &Network,
    data: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {}",
            cfg.learning_rate
        )));
    }
    for (i, s) in data.iter().enumerate() {
        if s.labels.len() != net.num_classes() || s.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: labels must be {} values in {{0,1}}",
                net.num_classes()
            )));
        }
    }

    let mut net = net.clone();
    let mut m: Vec<Vec<Vec<f64>>> = moments(&net);
    let mut v = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = crate::par::try_map_range(batch.len(), |j| {
                sample_gradients(&net, &data[batch[j]])
            })?;
            let mut total: Option<Vec<Vec<Tensor>>> = None;
            for (loss, grads) in results {
                epoch_loss += loss;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (al, gl) in acc.iter_mut().zip(grads) {
                            for (a, g) in al.iter_mut().zip(gl) {
                                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
            }
            let total = total.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f64;

            step += 1;
            let bc1 = 1.0 - BETA1.powi(step);
            let bc2 = 1.0 - BETA2.powi(step);
            for (l, layer) in net.layers_mut().iter_mut().enumerate() {
                for (p, param) in layer.params_mut().into_iter().enumerate() {
                    let g = total[l][p].data();
                    let (ml, vl) = (&mut m[l][p], &mut v[l][p]);
                    for (i, w) in param.data_mut().iter_mut().enumerate() {
                        let gi = g[i] * scale;
                        ml[i] = BETA1 * ml[i] + (1.0 - BETA1) * gi;
                        vl[i] = BETA2 * vl[i] + (1.0 - BETA2) * gi * gi;
                        let mhat = ml[i] / bc1;
                        let vhat = vl[i] / bc2;
                        *w -= cfg.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite()
            || net
                .layers()
                .iter()
                .flat_map(|l| l.params())
                .any(|p| !p.all_finite())
        {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok((net, TrainReport { epoch_losses }))
}

fn moments(net: &Network) -> Vec<Vec<Vec<f64>>> {
    net.layers()
        .iter()
        .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
        .collect()
}
