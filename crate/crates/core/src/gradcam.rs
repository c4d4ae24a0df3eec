//! Grad-CAM: gradient-weighted sums of convolutional feature maps.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netgraph::{Layer, Network};
use crate::tensor::{bilinear_resize, pairwise_sum, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetLayer {
    LastConv,
    Index(usize),
}

impl FromStr for TargetLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "last-conv" => Ok(TargetLayer::LastConv),
            t => t.parse().map(TargetLayer::Index).map_err(|_| {
                Error::InvalidArgument(format!(
                    "target layer must be `last-conv` or a layer index, got `{s}`"
                ))
            }),
        }
    }
}

impl fmt::Display for TargetLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetLayer::LastConv => f.write_str("last-conv"),
            TargetLayer::Index(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCamMap {
    pub class_index: usize,
    /// The convolution whose feature maps are weighted.
    pub target_layer: usize,
    /// Layer whose output supplied `A` (the conv itself or its trailing
    /// activation).
    pub activation_layer: usize,
    /// One weight per channel of `A`.
    pub alpha: Vec<f64>,
    #[serde(skip)]
    pub raw_map: Tensor,
    #[serde(skip)]
    pub heatmap: Tensor,
}

/// Index of the highest Conv2D layer.
pub fn select_last_conv(net: &Network) -> Result<usize> {
    net.layers()
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d(_)))
        .ok_or_else(|| Error::InvalidArgument("network has no Conv2D layer for Grad-CAM".into()))
}

/// Pairs of (conv index, activation-layer index) that Grad-CAM accepts:
/// each conv and every elementwise layer in the run directly after it.
fn eligible_layers(net: &Network) -> Vec<(usize, usize)> {
    let layers = net.layers();
    let mut out = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        if matches!(l, Layer::Conv2d(_)) {
            out.push((i, i));
            let mut j = i + 1;
            while j < layers.len() && layers[j].is_elementwise() {
                out.push((i, j));
                j += 1;
            }
        }
    }
    out
}

/// Resolves a target to `(conv, activation_layer)`. Naming a conv selects
/// the output of its trailing elementwise run (post-activation).
fn resolve(net: &Network, target: TargetLayer) -> Result<(usize, usize)> {
    let eligible = eligible_layers(net);
    let conv = match target {
        TargetLayer::LastConv => select_last_conv(net)?,
        TargetLayer::Index(i) => {
            if let Some(&pair) = eligible.iter().find(|(c, a)| *a == i && *c != i) {
                return Ok(pair);
            }
            if !eligible.iter().any(|&(c, _)| c == i) {
                let list: Vec<String> = eligible.iter().map(|(_, a)| a.to_string()).collect();
                let kind = net
                    .layers()
                    .get(i)
                    .map_or("out of range", |l| l.kind_name());
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({kind}) is not convolutional; eligible Grad-CAM layers: [{}]",
                    list.join(", ")
                )));
            }
            i
        }
    };
    let act = eligible
        .iter()
        .filter(|&&(c, _)| c == conv)
        .map(|&(_, a)| a)
        .max()
        .expect("conv is eligible");
    Ok((conv, act))
}

pub fn grad_cam(
    net: &Network,
    x: &Tensor,
    class_index: usize,
    target: TargetLayer,
) -> Result<GradCamMap> {
    let (conv, act) = resolve(net, target)?;
    let fwd = net.forward(x)?;
    let grads = net.backward_gradient(&fwd.cache, class_index)?;
    let a = fwd.cache.layer_output(act);
    let g = grads.layer_output(act);
    let &[k, h, w] = a.shape() else {
        return Err(Error::InvalidArgument(format!(
            "Grad-CAM target activation must be [K,H,W], got {:?}",
            a.shape()
        )));
    };
    let plane = h * w;
    let alpha: Vec<f64> = g
        .data()
        .chunks(plane)
        .map(|ch| pairwise_sum(ch) / plane as f64)
        .collect();
    let raw: Vec<f64> = (0..plane)
        .map(|p| {
            let mut acc = 0.0;
            for (c, &wk) in alpha.iter().enumerate() {
                acc += wk * a.data()[c * plane + p];
            }
            acc.max(0.0)
        })
        .collect();
    debug_assert_eq!(alpha.len(), k);
    let raw_map = Tensor::new(vec![h, w], raw)?;
    let (in_h, in_w) = (x.shape()[1], x.shape()[2]);
    let heatmap = bilinear_resize(&raw_map, in_h, in_w)?;
    Ok(GradCamMap {
        class_index,
        target_layer: conv,
        activation_layer: act,
        alpha,
        raw_map,
        heatmap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{Conv2d, Dense};

    fn cam_net(head: Vec<f64>) -> Network {
        let kernels = Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 7) % 5) as f64 / 5.0 - 0.3);
        let conv = Conv2d::new(
            kernels,
            Tensor::new(vec![2], vec![0.1, -0.05]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let dense =
            Dense::new(Tensor::new(vec![1, 2], head).unwrap(), Tensor::zeros(&[1])).unwrap();
        Network::new(
            vec![1, 4, 4],
            1,
            vec![
                Layer::Conv2d(conv),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Dense(dense),
            ],
        )
        .unwrap()
    }

    #[test]
    fn alpha_is_head_weight_over_area() {
        let net = cam_net(vec![0.8, -0.6]);
        let x = Tensor::from_fn(&[1, 4, 4], |i| (i % 3) as f64);
        let m = grad_cam(&net, &x, 0, TargetLayer::LastConv).unwrap();
        assert_eq!(m.target_layer, 0);
        assert_eq!(m.activation_layer, 1);
        assert_eq!(m.alpha, vec![0.8 / 16.0, -0.6 / 16.0]);
        assert!(m.raw_map.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_head_weight_drops_channel() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| (i % 5) as f64 * 0.2);
        let both = grad_cam(&cam_net(vec![0.0, 0.5]), &x, 0, TargetLayer::Index(0)).unwrap();
        assert_eq!(both.alpha[0], 0.0);
        let fwd = cam_net(vec![0.0, 0.5]).forward(&x).unwrap();
        let a = fwd.cache.layer_output(1);
        for p in 0..16 {
            assert_eq!(
                both.raw_map.data()[p],
                (0.5 / 16.0 * a.data()[16 + p]).max(0.0)
            );
        }
    }

    #[test]
    fn select_last_conv_cases() {
        let conv = || {
            Layer::Conv2d(
                Conv2d::new(
                    Tensor::filled(&[1, 1, 1, 1], 1.0),
                    Tensor::zeros(&[1]),
                    1,
                    0,
                )
                .unwrap(),
            )
        };
        let net = Network::new(
            vec![1, 2, 2],
            1,
            vec![
                conv(),
                Layer::Relu,
                Layer::Sigmoid,
                conv(),
                Layer::Flatten,
                Layer::Dense(Dense::zeros(1, 4)),
            ],
        )
        .unwrap();
        assert_eq!(select_last_conv(&net).unwrap(), 3);
        let dense_only = Network::new(
            vec![1, 2, 2],
            1,
            vec![Layer::Flatten, Layer::Dense(Dense::zeros(1, 4))],
        )
        .unwrap();
        assert!(select_last_conv(&dense_only).is_err());
        let x = Tensor::filled(&[1, 2, 2], 1.0);
        let err = grad_cam(&net, &x, 0, TargetLayer::Index(4))
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("eligible") && err.contains("[0, 1, 2, 3]"),
            "{err}"
        );
        assert_eq!(
            grad_cam(&net, &x, 0, TargetLayer::Index(0))
                .unwrap()
                .activation_layer,
            2
        );
        assert_eq!(
            grad_cam(&net, &x, 0, TargetLayer::Index(1))
                .unwrap()
                .activation_layer,
            1
        );
    }

    #[test]
    fn target_parsing() {
        assert_eq!(
            "last-conv".parse::<TargetLayer>().unwrap(),
            TargetLayer::LastConv
        );
        assert_eq!("3".parse::<TargetLayer>().unwrap(), TargetLayer::Index(3));
        assert!("conv".parse::<TargetLayer>().is_err());
    }
}
