//! Random networks and oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency::heatmap::{normalize, Heatmap, MaskSource, Method, NormalizeMode, SegmentationMask};
use saliency::lime::SuperpixelMap;
use saliency::netgraph::{BatchNorm, Conv2d, Dense, Layer, Network};
use saliency::tensor::bilinear_resize;
use saliency::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

#[allow(clippy::too_many_arguments)]
fn conv(
    rng: &mut ChaCha8Rng,
    c: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    bias: bool,
) -> Layer {
    let fan = (c * kh * kw) as f64;
    let kernels = uniform(rng, &[k, c, kh, kw], 1.5 / fan.sqrt());
    let b = if bias {
        uniform(rng, &[k], 0.3)
    } else {
        Tensor::zeros(&[k])
    };
    Layer::Conv2d(Conv2d::new(kernels, b, stride, pad).unwrap())
}

fn dense(rng: &mut ChaCha8Rng, out: usize, inputs: usize, bias: bool) -> Layer {
    let w = uniform(rng, &[out, inputs], 1.5 / (inputs as f64).sqrt());
    let b = if bias {
        uniform(rng, &[out], 0.3)
    } else {
        Tensor::zeros(&[out])
    };
    Layer::Dense(Dense::new(w, b).unwrap())
}

fn batchnorm(rng: &mut ChaCha8Rng, c: usize) -> Layer {
    let gamma = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
    let beta = uniform(rng, &[c], 0.3);
    let mean = uniform(rng, &[c], 0.3);
    let var = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
    Layer::BatchNorm(BatchNorm::new(gamma, beta, mean, var).unwrap())
}

/// A small random stack of one to three spatial layers followed by a
/// Flatten+Dense or GAP+Dense head. Every layer kind appears across seeds.
pub fn random_network(rng: &mut ChaCha8Rng) -> Network {
    let classes = rng.random_range(1..=3);
    let input = vec![
        rng.random_range(1..=3),
        rng.random_range(4..=7),
        rng.random_range(4..=7),
    ];
    let mut shape = input.clone();
    let mut layers = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let layer = match rng.random_range(0..5) {
            0 => {
                let kh = rng.random_range(1..=3.min(h));
                let kw = rng.random_range(1..=3.min(w));
                let k = rng.random_range(1..=3);
                let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
                shape = vec![
                    k,
                    (h + 2 * pad - kh) / stride + 1,
                    (w + 2 * pad - kw) / stride + 1,
                ];
                conv(rng, c, k, kh, kw, stride, pad, true)
            }
            1 => Layer::Relu,
            2 => Layer::Sigmoid,
            3 => batchnorm(rng, c),
            _ if h >= 2 && w >= 2 => {
                let stride = rng.random_range(1..=2);
                shape = vec![c, (h - 2) / stride + 1, (w - 2) / stride + 1];
                Layer::MaxPool2d { window: 2, stride }
            }
            _ => Layer::Relu,
        };
        layers.push(layer);
    }
    if rng.random_bool(0.5) {
        layers.push(Layer::GlobalAvgPool);
        layers.push(dense(rng, classes, shape[0], true));
    } else {
        layers.push(Layer::Flatten);
        layers.push(dense(rng, classes, shape.iter().product(), true));
    }
    Network::new(input, classes, layers).unwrap()
}

/// `Conv -> ReLU -> MaxPool -> Conv -> ReLU -> GAP -> Dense`, optionally
/// bias-free.
pub fn random_cnn(rng: &mut ChaCha8Rng, bias: bool) -> Network {
    let c = rng.random_range(1..=2);
    let side = 2 * rng.random_range(3..=5);
    let k1 = rng.random_range(2..=4);
    let k2 = rng.random_range(2..=4);
    let classes = rng.random_range(1..=3);
    let layers = vec![
        conv(rng, c, k1, 3, 3, 1, 1, bias),
        Layer::Relu,
        Layer::MaxPool2d {
            window: 2,
            stride: 2,
        },
        conv(rng, k1, k2, 3, 3, 1, 1, bias),
        Layer::Relu,
        Layer::GlobalAvgPool,
        dense(rng, classes, k2, bias),
    ];
    Network::new(vec![c, side, side], classes, layers).unwrap()
}

/// `Conv -> ReLU -> GAP -> Dense` with a `side x side` feature map.
pub fn cam_network(rng: &mut ChaCha8Rng, side: usize) -> Network {
    let c = rng.random_range(1..=3);
    let k = rng.random_range(2..=6);
    let classes = rng.random_range(1..=3);
    let layers = vec![
        conv(rng, c, k, 3, 3, 1, 1, true),
        Layer::Relu,
        Layer::GlobalAvgPool,
        dense(rng, classes, k, true),
    ];
    Network::new(vec![c, side, side], classes, layers).unwrap()
}

/// Distance of the forward pass from the nearest non-differentiable point:
/// ReLU inputs near zero and max-pool windows with a near tie.
pub fn kink_margin(net: &Network, x: &Tensor) -> f64 {
    let fwd = net.forward(x).unwrap();
    let mut margin = f64::INFINITY;
    for (l, layer) in net.layers().iter().enumerate() {
        let input = fwd.cache.layer_input(l);
        match layer {
            Layer::Relu => {
                // exact zeros come from an upstream ReLU and stay put
                for &v in input.data().iter().filter(|&&v| v != 0.0) {
                    margin = margin.min(v.abs());
                }
            }
            Layer::MaxPool2d { window, stride } => {
                let &[c, h, w] = input.shape() else {
                    unreachable!()
                };
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut vals: Vec<f64> = (0..*window)
                                .flat_map(|a| (0..*window).map(move |b| (a, b)))
                                .map(|(a, b)| {
                                    input.data()[(ch * h + i * stride + a) * w + j * stride + b]
                                })
                                .collect();
                            vals.sort_by(|a, b| b.total_cmp(a));
                            // exact ties are copies of one upstream value
                            // (overlapping windows, inactive ReLUs)
                            if vals[0] != vals[1] {
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Central finite-difference gradient of logit `class` with respect to the
/// input.
pub fn numeric_gradient(net: &Network, x: &Tensor, class: usize, step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.data().to_vec();
            let mut minus = x.data().to_vec();
            plus[i] += step;
            minus[i] -= step;
            let lp = net
                .logits(&Tensor::new(x.shape().to_vec(), plus).unwrap())
                .unwrap();
            let lm = net
                .logits(&Tensor::new(x.shape().to_vec(), minus).unwrap())
                .unwrap();
            (lp.data()[class] - lm.data()[class]) / (2.0 * step)
        })
        .collect()
}

/// Random input that keeps every kink at least `margin` away; used so that
/// finite differences stay on one linear piece.
pub fn smooth_input(rng: &mut ChaCha8Rng, net: &Network, margin: f64) -> Tensor {
    for _ in 0..1000 {
        let x = uniform(rng, net.input_shape(), 1.0);
        if kink_margin(net, &x) > margin {
            return x;
        }
    }
    panic!("no input keeps every kink {margin} away");
}

/// Class activation map: head weights times post-ReLU feature maps.
pub fn cam(net: &Network, x: &Tensor, class: usize) -> Tensor {
    let fwd = net.forward(x).unwrap();
    let a = fwd.cache.layer_output(1);
    let Layer::Dense(head) = &net.layers()[3] else {
        panic!("not a CAM network")
    };
    let k = head.weights.shape()[1];
    let w = &head.weights.data()[class * k..(class + 1) * k];
    let &[_, h, wd] = a.shape() else { panic!() };
    let plane = h * wd;
    let raw = Tensor::from_fn(&[h, wd], |p| {
        let mut acc = 0.0;
        for (c, &wc) in w.iter().enumerate() {
            acc += wc * a.data()[c * plane + p];
        }
        acc.max(0.0)
    });
    bilinear_resize(&raw, x.shape()[1], x.shape()[2]).unwrap()
}

pub fn normalized(t: Tensor, class: usize) -> Tensor {
    normalize(
        &Heatmap::new(t, Method::GradCam, class).unwrap(),
        NormalizeMode::MinMax,
    )
    .scores
}

pub fn scale_head(net: &Network, class: usize, s: f64) -> Network {
    let mut layers = net.layers().to_vec();
    let Layer::Dense(head) = &layers[3] else {
        panic!()
    };
    let k = head.weights.shape()[1];
    let w = Tensor::from_fn(head.weights.shape(), |i| {
        let v = head.weights.data()[i];
        if i / k == class {
            v * s
        } else {
            v
        }
    });
    layers[3] = Layer::Dense(Dense::new(w, head.bias.clone()).unwrap());
    Network::new(net.input_shape().to_vec(), net.num_classes(), layers).unwrap()
}

/// `Σ_j (b_j / z_j) R_j` for a linear layer, computed from the forward cache
/// and the relevance arriving at the layer output.
pub fn analytic_leakage(net: &Network, x: &Tensor, layer: usize, r_out: &Tensor) -> Option<f64> {
    let fwd = net.forward(x).unwrap();
    let z = fwd.cache.layer_output(layer).data();
    let bias = match &net.layers()[layer] {
        Layer::Conv2d(c) => c.bias.data().to_vec(),
        Layer::Dense(d) => d.bias.data().to_vec(),
        _ => return None,
    };
    let per = z.len() / bias.len();
    Some(
        z.iter()
            .zip(r_out.data())
            .enumerate()
            .filter(|(_, (_, &r))| r != 0.0)
            .map(|(j, (&zj, &r))| bias[j / per] / zj * r)
            .sum(),
    )
}

pub fn mask(z: &[bool]) -> usize {
    z.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
}

pub fn random_table(seed: u64, m: usize) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..1usize << m)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

/// Shapley values as the average marginal contribution over all orderings.
pub fn by_permutations(table: &[f64], m: usize) -> Vec<f64> {
    let mut phi = vec![0.0; m];
    let mut order: Vec<usize> = (0..m).collect();
    let mut count = 0usize;
    permute(&mut order, 0, &mut |perm| {
        let mut coalition = 0usize;
        for &p in perm {
            phi[p] += table[coalition | 1 << p] - table[coalition];
            coalition |= 1 << p;
        }
        count += 1;
    });
    phi.iter().map(|v| v / count as f64).collect()
}

pub fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1;
            wins += if sp > sn {
                1.0
            } else if sp == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs as f64
}

pub fn mask3(bits: u32) -> SegmentationMask {
    SegmentationMask::new(
        3,
        3,
        (0..9).map(|i| bits >> i & 1 == 1).collect(),
        MaskSource::Predicted,
    )
    .unwrap()
}

/// Linear black box over superpixel presence. A segment counts as present
/// when its first pixel still holds the instance value.
pub fn planted_box(
    x: &Tensor,
    sp: &SuperpixelMap,
    weights: Vec<f64>,
    intercept: f64,
) -> impl Fn(&Tensor) -> saliency::Result<Vec<f64>> + Sync {
    let firsts: Vec<usize> = (0..sp.count())
        .map(|s| sp.labels().iter().position(|&l| l == s).unwrap())
        .collect();
    let x = x.data().to_vec();
    move |t: &Tensor| {
        let y = firsts
            .iter()
            .zip(&weights)
            .filter(|(&p, _)| t.data()[p] == x[p])
            .map(|(_, w)| w)
            .sum::<f64>();
        Ok(vec![intercept + y])
    }
}

pub fn instance(seed: u64) -> Tensor {
    let mut rng = rng(seed);
    Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.1..1.0))
}

pub fn constant_network() -> Network {
    let kernels = Tensor::from_fn(&[3, 1, 3, 3], |i| ((i * 5) % 7) as f64 / 7.0 - 0.4);
    let conv = Conv2d::new(
        kernels,
        Tensor::new(vec![3], vec![0.1, 0.0, -0.1]).unwrap(),
        1,
        1,
    )
    .unwrap();
    let head = Dense::new(
        Tensor::zeros(&[2, 3]),
        Tensor::new(vec![2], vec![0.7, -1.2]).unwrap(),
    )
    .unwrap();
    Network::new(
        vec![1, 16, 16],
        2,
        vec![
            Layer::Conv2d(conv),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense(head),
        ],
    )
    .unwrap()
}
