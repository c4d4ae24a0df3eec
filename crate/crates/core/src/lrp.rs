//! Layer-wise relevance propagation with the ε rule.
//!
//! Linear layers (Dense, Conv2D, and standalone BatchNorm) split relevance in
//! proportion to each input's contribution `x_i w_ij` to the stabilized
//! pre-activation `z_j + ε·sign(z_j)`. ReLU and Sigmoid pass relevance
//! through, max-pooling routes it to the winning input, and global average
//! pooling splits it in proportion to each position's share of the mean.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netgraph::{Layer, Network};
use crate::tensor::{conv2d_backward_input, Tensor};

/// Pre-activations smaller than this are treated as zero when `ε = 0`.
pub const VANISHING_Z: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LrpConfig {
    pub epsilon: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig { epsilon: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLeakage {
    pub layer: usize,
    pub kind: &'static str,
    /// Relevance that did not reach the layer input: for linear layers
    /// `Σ_j (b_j + ε·sign(z_j)) / (z_j + ε·sign(z_j)) · R_j`.
    pub leakage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceMap {
    pub class_index: usize,
    pub epsilon: f64,
    /// The class logit the propagation started from.
    pub logit: f64,
    /// `relevance[l]` matches cache activation `l` (0 is the input).
    #[serde(skip)]
    pub relevance: Vec<Tensor>,
    /// Input relevance summed over channels, `[H, W]`.
    #[serde(skip)]
    pub heatmap: Tensor,
    pub layer_leakage: Vec<LayerLeakage>,
    pub total_leakage: f64,
}

impl RelevanceMap {
    pub fn input_total(&self) -> f64 {
        self.relevance[0].sum()
    }
}

fn sign(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `R_j / (z_j + ε·sign(z_j))` per unit, plus the leakage term.
/// `offset[j]` is the part of `z_j` not attributable to the inputs.
fn ratios(
    layer: usize,
    kind: &'static str,
    z: &[f64],
    offset: impl Fn(usize) -> f64,
    r: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut s = Vec::with_capacity(z.len());
    let mut leak = 0.0;
    for (j, (&zj, &rj)) in z.iter().zip(r).enumerate() {
        if rj == 0.0 {
            s.push(0.0);
            continue;
        }
        if eps == 0.0 && zj.abs() < VANISHING_Z {
            return Err(Error::VanishingDenominator {
                layer,
                kind,
                unit: j,
            });
        }
        let stab = eps * sign(zj);
        let sj = rj / (zj + stab);
        leak += sj * (offset(j) + stab);
        s.push(sj);
    }
    Ok((s, leak))
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be finite and >= 0, got {eps}"
        )))
    }
}

pub fn lrp(net: &Network, x: &Tensor, class_index: usize, cfg: &LrpConfig) -> Result<RelevanceMap> {
    check_epsilon(cfg.epsilon)?;
    net.check_class(class_index)?;
    let eps = cfg.epsilon;
    let fwd = net.forward(x)?;
    let cache = &fwd.cache;
    let layers = net.layers();
    let n = layers.len();
    let logit = fwd.logits.data()[class_index];

    let mut relevance: Vec<Option<Tensor>> = vec![None; n + 1];
    let mut r = Tensor::zeros(&[net.num_classes()]);
    r.data_mut()[class_index] = logit;
    let mut leakage = Vec::new();
    // BatchNorm directly after a linear layer is folded into it: its affine
    // map is held here until the linear layer is reached.
    let mut folded: Option<(usize, Vec<(f64, f64)>)> = None;

    for l in (0..n).rev() {
        let input = cache.layer_input(l);
        let output = cache.layer_output(l);
        let kind = layers[l].kind_name();
        relevance[l + 1] = Some(r.clone());
        let (next, leak) = match &layers[l] {
            Layer::BatchNorm(bn)
                if l > 0 && matches!(layers[l - 1], Layer::Conv2d(_) | Layer::Dense(_)) =>
            {
                folded = Some((l, bn.affine()));
                (r, None)
            }
            Layer::BatchNorm(bn) => {
                let aff = bn.affine();
                let per = input.len() / aff.len();
                let (s, leak) = ratios(l, kind, output.data(), |j| aff[j / per].1, r.data(), eps)?;
                let rin =
                    Tensor::from_fn(input.shape(), |i| input.data()[i] * aff[i / per].0 * s[i]);
                (rin, Some(leak))
            }
            Layer::Dense(d) => {
                let (z, offset, scale) = fold(&folded, l, cache, output, d.bias.data());
                let (s, leak) = ratios(l, kind, z.data(), |j| offset[j], r.data(), eps)?;
                let (out_n, in_n) = (d.weights.shape()[0], d.weights.shape()[1]);
                let w = d.weights.data();
                let rin = Tensor::from_fn(&[in_n], |i| {
                    let mut acc = 0.0;
                    for j in 0..out_n {
                        acc += w[j * in_n + i] * scale[j] * s[j];
                    }
                    input.data()[i] * acc
                });
                folded = None;
                (rin, Some(leak))
            }
            Layer::Conv2d(c) => {
                let (z, offset, scale) = fold(&folded, l, cache, output, c.bias.data());
                let plane = z.len() / offset.len();
                let (s, leak) = ratios(l, kind, z.data(), |j| offset[j / plane], r.data(), eps)?;
                let scaled = Tensor::from_fn(output.shape(), |j| s[j] * scale[j / plane]);
                let back =
                    conv2d_backward_input(&scaled, &c.kernels, input.shape(), c.stride, c.pad);
                let rin = Tensor::from_fn(input.shape(), |i| input.data()[i] * back.data()[i]);
                folded = None;
                (rin, Some(leak))
            }
            Layer::Relu => {
                let rin = Tensor::from_fn(input.shape(), |i| {
                    if input.data()[i] > 0.0 {
                        r.data()[i]
                    } else {
                        0.0
                    }
                });
                (rin, None)
            }
            Layer::Sigmoid => (r, None),
            Layer::MaxPool2d { .. } => {
                let winners = cache.pool_argmax(l).expect("max-pool caches argmax");
                let mut rin = Tensor::zeros(input.shape());
                for (j, &src) in winners.iter().enumerate() {
                    rin.data_mut()[src] += r.data()[j];
                }
                (rin, None)
            }
            Layer::GlobalAvgPool => {
                let per = input.shape()[1] * input.shape()[2];
                let (s, leak) = ratios(l, kind, output.data(), |_| 0.0, r.data(), eps)?;
                let rin =
                    Tensor::from_fn(input.shape(), |i| input.data()[i] / per as f64 * s[i / per]);
                (rin, Some(leak))
            }
            Layer::Flatten => (
                Tensor::from_raw(input.shape().to_vec(), r.into_data()),
                None,
            ),
        };
        let leak = match leak {
            Some(v) => v,
            None => relevance[l + 1].as_ref().expect("set above").sum() - next.sum(),
        };
        leakage.push(LayerLeakage {
            layer: l,
            kind,
            leakage: leak,
        });
        r = next;
    }
    leakage.reverse();

    let [c, h, w] = *r.shape() else {
        return Err(Error::shape("LRP input relevance", &[0, 0, 0], r.shape()));
    };
    let plane = h * w;
    let heatmap = Tensor::from_fn(&[h, w], |p| (0..c).map(|ch| r.data()[ch * plane + p]).sum());
    relevance[0] = Some(r);
    if !heatmap.all_finite() {
        return Err(Error::NonFinite("LRP input relevance".into()));
    }
    Ok(RelevanceMap {
        class_index,
        epsilon: eps,
        logit,
        relevance: relevance
            .into_iter()
            .map(|t| t.expect("every activation filled"))
            .collect(),
        heatmap,
        total_leakage: leakage.iter().map(|l| l.leakage).sum(),
        layer_leakage: leakage,
    })
}

/// Pre-activation, per-unit offset and per-channel scale of a linear layer,
/// with a pending BatchNorm folded in (`z` is then the BatchNorm output).
fn fold<'a>(
    folded: &Option<(usize, Vec<(f64, f64)>)>,
    l: usize,
    cache: &'a crate::netgraph::ActivationCache,
    output: &'a Tensor,
    bias: &[f64],
) -> (&'a Tensor, Vec<f64>, Vec<f64>) {
    match folded {
        Some((bn, aff)) if *bn == l + 1 => (
            cache.layer_output(*bn),
            bias.iter()
                .zip(aff)
                .map(|(b, (sc, sh))| sc * b + sh)
                .collect(),
            aff.iter().map(|(sc, _)| *sc).collect(),
        ),
        _ => (output, bias.to_vec(), vec![1.0; bias.len()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{BatchNorm, Conv2d, Dense};

    fn dense_net(w: Vec<f64>, b: f64) -> Network {
        let d = Dense::new(
            Tensor::new(vec![1, 3], w).unwrap(),
            Tensor::new(vec![1], vec![b]).unwrap(),
        )
        .unwrap();
        Network::new(vec![3, 1, 1], 1, vec![Layer::Flatten, Layer::Dense(d)]).unwrap()
    }

    #[test]
    fn single_dense_layer_splits_logit() {
        let net = dense_net(vec![0.5, 1.0, 2.0], 0.0);
        let x = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let m = lrp(&net, &x, 0, &LrpConfig { epsilon: 0.0 }).unwrap();
        let y = 0.5 + 2.0 + 6.0;
        assert_eq!(m.logit, y);
        let rel = m.relevance[0].data();
        for (i, zi) in [0.5, 2.0, 6.0].iter().enumerate() {
            assert!((rel[i] - zi / y * y).abs() < 1e-12);
        }
        assert!((m.input_total() - y).abs() < 1e-12);
        assert_eq!(m.total_leakage, 0.0);
    }

    #[test]
    fn bias_leakage_matches_formula() {
        let net = dense_net(vec![0.5, -1.0, 2.0], 0.75);
        let x = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let m = lrp(&net, &x, 0, &LrpConfig { epsilon: 0.0 }).unwrap();
        // single unit: R = z, leakage = b / z * z = b
        assert!((m.total_leakage - 0.75).abs() < 1e-12);
        assert!((m.input_total() + m.total_leakage - m.logit).abs() < 1e-12);
    }

    #[test]
    fn zero_input_with_epsilon_gives_zero() {
        let net = dense_net(vec![1.0, 1.0, 1.0], 0.0);
        let m = lrp(
            &net,
            &Tensor::zeros(&[3, 1, 1]),
            0,
            &LrpConfig { epsilon: 1e-3 },
        )
        .unwrap();
        assert!(m.relevance[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vanishing_denominator_is_numeric_error() {
        let x = Tensor::filled(&[3, 1, 1], 1.0);
        // an exactly-zero unit carries no relevance and needs no division
        assert!(lrp(
            &dense_net(vec![1.0, -1.0, 0.0], 0.0),
            &x,
            0,
            &LrpConfig { epsilon: 0.0 }
        )
        .is_ok());
        let tiny = dense_net(vec![1.0, -1.0, 1e-13], 0.0);
        let err = lrp(&tiny, &x, 0, &LrpConfig { epsilon: 0.0 }).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("epsilon > 0"), "{err}");
        assert!(lrp(&tiny, &x, 0, &LrpConfig { epsilon: 1e-6 }).is_ok());
    }

    #[test]
    fn conv_gap_dense_conserves() {
        let conv = Conv2d::new(
            Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4),
            Tensor::zeros(&[3]),
            1,
            1,
        )
        .unwrap();
        let head = Dense::new(
            Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let net = Network::new(
            vec![2, 6, 6],
            2,
            vec![
                Layer::Conv2d(conv),
                Layer::Relu,
                Layer::MaxPool2d {
                    window: 2,
                    stride: 2,
                },
                Layer::GlobalAvgPool,
                Layer::Dense(head),
            ],
        )
        .unwrap();
        let x = Tensor::from_fn(&[2, 6, 6], |i| ((i * 17) % 13) as f64 / 13.0);
        for class in 0..2 {
            let m = lrp(&net, &x, class, &LrpConfig { epsilon: 0.0 }).unwrap();
            assert!(
                (m.input_total() - m.logit).abs() <= 1e-9 * m.logit.abs(),
                "{} vs {}",
                m.input_total(),
                m.logit
            );
            for l in &m.layer_leakage {
                assert!(l.leakage.abs() < 1e-9, "{l:?}");
            }
            assert_eq!(m.heatmap.shape(), &[6, 6]);
        }
    }

    #[test]
    fn folded_batchnorm_matches_manual_fold() {
        let w = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 0.5, 0.4, -0.1]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let bn = BatchNorm::new(
            Tensor::new(vec![2], vec![1.5, 0.7]).unwrap(),
            Tensor::new(vec![2], vec![0.2, -0.1]).unwrap(),
            Tensor::new(vec![2], vec![0.05, 0.3]).unwrap(),
            Tensor::new(vec![2], vec![0.8, 1.2]).unwrap(),
        )
        .unwrap();
        let aff = bn.affine();
        let head = || {
            Dense::new(
                Tensor::new(vec![1, 2], vec![1.0, 0.6]).unwrap(),
                Tensor::zeros(&[1]),
            )
            .unwrap()
        };
        let with_bn = Network::new(
            vec![3, 1, 1],
            1,
            vec![
                Layer::Flatten,
                Layer::Dense(Dense::new(w.clone(), b.clone()).unwrap()),
                Layer::BatchNorm(bn),
                Layer::Dense(head()),
            ],
        )
        .unwrap();
        let fw = Tensor::from_fn(&[2, 3], |i| w.data()[i] * aff[i / 3].0);
        let fb = Tensor::from_fn(&[2], |j| aff[j].0 * b.data()[j] + aff[j].1);
        let manual = Network::new(
            vec![3, 1, 1],
            1,
            vec![
                Layer::Flatten,
                Layer::Dense(Dense::new(fw, fb).unwrap()),
                Layer::Dense(head()),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 1, 1], vec![0.4, 1.1, 0.7]).unwrap();
        let cfg = LrpConfig { epsilon: 1e-4 };
        let a = lrp(&with_bn, &x, 0, &cfg).unwrap();
        let m = lrp(&manual, &x, 0, &cfg).unwrap();
        for (p, q) in a.relevance[0].data().iter().zip(m.relevance[0].data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((a.total_leakage - m.total_leakage).abs() < 1e-12);
    }
}
