use crate::error::{Error, Result};
use crate::tensor::{
    self, conv2d_backward_input, conv2d_backward_kernels, window_output_len, Tensor,
};

/// Variance stabilizer inside frozen batch normalization.
pub const BN_EPSILON: f64 = 1e-5;

pub const SUPPORTED_KINDS: &[&str] = &[
    "Conv2D",
    "Dense",
    "ReLU",
    "Sigmoid",
    "MaxPool2D",
    "GlobalAvgPool",
    "BatchNorm",
    "Flatten",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[K, C, kh, kw]`
    pub kernels: Tensor,
    /// `[K]`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(kernels: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        if kernels.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv kernels must be [K,C,kh,kw], got {:?}",
                kernels.shape()
            )));
        }
        if bias.shape() != [kernels.shape()[0]] {
            return Err(Error::shape(
                "conv bias",
                &[kernels.shape()[0]],
                bias.shape(),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        Ok(Conv2d {
            kernels,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dense weights must be [out,in], got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape(
                "dense bias",
                &[weights.shape()[0]],
                bias.shape(),
            ));
        }
        Ok(Dense { weights, bias })
    }

    pub fn zeros(out: usize, inputs: usize) -> Self {
        Dense {
            weights: Tensor::zeros(&[out, inputs]),
            bias: Tensor::zeros(&[out]),
        }
    }
}

/// Inference-mode batch normalization over the leading (channel) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    pub fn new(gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor) -> Result<Self> {
        let c = gamma.len();
        for (name, t) in [
            ("gamma", &gamma),
            ("beta", &beta),
            ("mean", &mean),
            ("var", &var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("batchnorm {name}"), &[c], t.shape()));
            }
        }
        if var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(
                "batchnorm variance entries must be > 0".into(),
            ));
        }
        Ok(BatchNorm {
            gamma,
            beta,
            mean,
            var,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` of the equivalent affine map `y = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma.data()[c] / (self.var.data()[c] + BN_EPSILON).sqrt();
                (scale, self.beta.data()[c] - scale * self.mean.data()[c])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Sigmoid,
    MaxPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm(BatchNorm),
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2D",
            Layer::Dense(_) => "Dense",
            Layer::Relu => "ReLU",
            Layer::Sigmoid => "Sigmoid",
            Layer::MaxPool2d { .. } => "MaxPool2D",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::BatchNorm(_) => "BatchNorm",
            Layer::Flatten => "Flatten",
        }
    }

    /// True for layers that act independently on every element.
    pub fn is_elementwise(&self) -> bool {
        matches!(self, Layer::Relu | Layer::Sigmoid | Layer::BatchNorm(_))
    }

    pub(crate) fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let kind = self.kind_name();
        let mismatch = |expected: Vec<usize>| Error::Shape {
            context: format!("layer {index} ({kind}) input"),
            expected,
            actual: input.to_vec(),
        };
        let spatial = |what: &str| Error::Layer {
            layer: index,
            kind,
            message: format!("{what} does not fit input {input:?}"),
        };
        match self {
            Layer::Conv2d(conv) => {
                let ks = conv.kernels.shape();
                let &[c, h, w] = input else {
                    return Err(mismatch(vec![ks[1], 0, 0]));
                };
                if c != ks[1] {
                    return Err(mismatch(vec![ks[1], h, w]));
                }
                let oh = window_output_len(h, ks[2], conv.stride, conv.pad);
                let ow = window_output_len(w, ks[3], conv.stride, conv.pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![ks[0], oh, ow]),
                    _ => Err(spatial("kernel")),
                }
            }
            Layer::Dense(d) => {
                let n = d.weights.shape()[1];
                if input != [n] {
                    return Err(mismatch(vec![n]));
                }
                Ok(vec![d.weights.shape()[0]])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::BatchNorm(bn) => {
                if input.first() != Some(&bn.channels()) {
                    let mut expected = input.to_vec();
                    if let Some(first) = expected.first_mut() {
                        *first = bn.channels();
                    }
                    return Err(mismatch(expected));
                }
                Ok(input.to_vec())
            }
            Layer::MaxPool2d { window, stride } => {
                let &[c, h, w] = input else {
                    return Err(mismatch(vec![0, 0, 0]));
                };
                if *window == 0 || *stride == 0 {
                    return Err(spatial("zero pooling window or stride"));
                }
                match (
                    window_output_len(h, *window, *stride, 0),
                    window_output_len(w, *window, *stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                    _ => Err(spatial("pooling window")),
                }
            }
            Layer::GlobalAvgPool => {
                let &[c, _, _] = input else {
                    return Err(mismatch(vec![0, 0, 0]));
                };
                Ok(vec![c])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward pass of one layer; max-pooling also returns the flat input
    /// offset selected for each output.
    pub(crate) fn forward(&self, x: &Tensor) -> (Tensor, Option<Vec<usize>>) {
        match self {
            Layer::Conv2d(conv) => (
                tensor::conv2d_forward(x, &conv.kernels, &conv.bias, conv.stride, conv.pad)
                    .expect("shapes checked at construction"),
                None,
            ),
            Layer::Dense(d) => (dense_forward(d, x), None),
            Layer::Relu => (x.map(|v| v.max(0.0)), None),
            Layer::Sigmoid => (x.map(super::sigmoid), None),
            Layer::BatchNorm(bn) => {
                let affine = bn.affine();
                let per = x.len() / bn.channels();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let (s, t) = affine[i / per];
                        s * v + t
                    })
                    .collect();
                (Tensor::from_raw(x.shape().to_vec(), data), None)
            }
            Layer::MaxPool2d { window, stride } => {
                let (out, idx) = max_pool(x, *window, *stride);
                (out, Some(idx))
            }
            Layer::GlobalAvgPool => {
                let r = tensor::reduce(x, &[1, 2], tensor::ReduceMode::Mean).expect("rank 3");
                (r.values, None)
            }
            Layer::Flatten => (Tensor::from_raw(vec![x.len()], x.data().to_vec()), None),
        }
    }

    /// Backward pass of one layer given the upstream gradient `g` of its
    /// output. Returns the input gradient and, if asked, parameter gradients
    /// in [`Layer::params_mut`] order.
    pub(crate) fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        argmax: Option<&[usize]>,
        g: &Tensor,
        with_params: bool,
    ) -> (Tensor, Vec<Tensor>) {
        match self {
            Layer::Conv2d(conv) => {
                let gin =
                    conv2d_backward_input(g, &conv.kernels, input.shape(), conv.stride, conv.pad);
                let params = if with_params {
                    let gk = conv2d_backward_kernels(
                        input,
                        g,
                        conv.kernels.shape(),
                        conv.stride,
                        conv.pad,
                    );
                    let (k, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let gb = Tensor::from_fn(&[k], |c| {
                        tensor::pairwise_sum(&g.data()[c * oh * ow..(c + 1) * oh * ow])
                    });
                    vec![gk, gb]
                } else {
                    Vec::new()
                };
                (gin, params)
            }
            Layer::Dense(d) => {
                let (out, n) = (d.weights.shape()[0], d.weights.shape()[1]);
                let w = d.weights.data();
                let mut gin = vec![0.0; n];
                for (o, &go) in g.data().iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (gi, &wv) in gin.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                        *gi += go * wv;
                    }
                }
                let params = if with_params {
                    let x = input.data();
                    let gw = Tensor::from_fn(&[out, n], |i| g.data()[i / n] * x[i % n]);
                    vec![gw, g.clone()]
                } else {
                    Vec::new()
                };
                (Tensor::from_raw(vec![n], gin), params)
            }
            Layer::Relu => {
                let data = input
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                (Tensor::from_raw(input.shape().to_vec(), data), Vec::new())
            }
            Layer::Sigmoid => {
                let data = output
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                (Tensor::from_raw(input.shape().to_vec(), data), Vec::new())
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                let per = input.len() / c;
                let affine = bn.affine();
                let gin = Tensor::from_fn(input.shape(), |i| affine[i / per].0 * g.data()[i]);
                let params = if with_params {
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for (i, (&x, &gv)) in input.data().iter().zip(g.data()).enumerate() {
                        let ch = i / per;
                        let xhat =
                            (x - bn.mean.data()[ch]) / (bn.var.data()[ch] + BN_EPSILON).sqrt();
                        ggamma[ch] += gv * xhat;
                        gbeta[ch] += gv;
                    }
                    vec![
                        Tensor::from_raw(vec![c], ggamma),
                        Tensor::from_raw(vec![c], gbeta),
                    ]
                } else {
                    Vec::new()
                };
                (gin, params)
            }
            Layer::MaxPool2d { .. } => {
                let idx = argmax.expect("max-pool cache carries argmax");
                let mut gin = vec![0.0; input.len()];
                for (&src, &gv) in idx.iter().zip(g.data()) {
                    gin[src] += gv;
                }
                (Tensor::from_raw(input.shape().to_vec(), gin), Vec::new())
            }
            Layer::GlobalAvgPool => {
                let per = input.shape()[1] * input.shape()[2];
                let scale = 1.0 / per as f64;
                let gin = Tensor::from_fn(input.shape(), |i| g.data()[i / per] * scale);
                (gin, Vec::new())
            }
            Layer::Flatten => (
                Tensor::from_raw(input.shape().to_vec(), g.data().to_vec()),
                Vec::new(),
            ),
        }
    }

    /// Trainable parameters. Batch-norm statistics stay frozen; only its
    /// scale and shift train.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.kernels, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.kernels, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => Vec::new(),
        }
    }
}

fn dense_forward(d: &Dense, x: &Tensor) -> Tensor {
    let (out, n) = (d.weights.shape()[0], d.weights.shape()[1]);
    let w = d.weights.data();
    let data = (0..out)
        .map(|o| {
            let row = &w[o * n..(o + 1) * n];
            d.bias.data()[o] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::from_raw(vec![out], data)
}

fn max_pool(x: &Tensor, window: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let xs = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::from_raw(vec![c, oh, ow], out), idx)
}
