//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! engine builds on. Images use the channels-first `[C, H, W]` layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of the raw tensor file format.
pub const TNSR_MAGIC: [u8; 8] = *b"TNSR\0\0\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is at least one, that the
    /// data length matches and that all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {expected} elements but {} values were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {i} of tensor with shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose output shape is correct by
    /// construction. Finiteness is checked by callers that care.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::InvalidArgument(format!(
                "index of rank {} for tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        for (axis, (&i, &n)) in index.iter().zip(&self.shape).enumerate() {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of bounds for axis {axis} with extent {n}"
                )));
            }
            flat = flat * n + i;
        }
        Ok(flat)
    }

    /// Inverse of [`Tensor::flat_index`].
    pub fn unravel_index(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "flat index {flat} out of bounds for {} elements",
                self.data.len()
            )));
        }
        let mut index = vec![0; self.shape.len()];
        for (slot, &n) in index.iter_mut().zip(&self.shape).rev() {
            *slot = flat % n;
            flat /= n;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "tensor extents must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

/// Pairwise (cascade) summation. Exact for `2^k` copies of one value.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            // split at the largest power of two below n so equal inputs stay exact
            let split = if n.is_power_of_two() {
                n / 2
            } else {
                1 << (usize::BITS - 1 - n.leading_zeros())
            };
            pairwise_sum(&values[..split]) + pairwise_sum(&values[split..])
        }
    }
}

/// Output extent of a strided, zero-padded window sweep.
pub fn window_output_len(input: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < window {
        return None;
    }
    Some((input + 2 * pad - window) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + offset - pad` lands
/// inside `0..input`.
fn valid_range(
    out: usize,
    input: usize,
    offset: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // o * stride + offset - pad <= input - 1
    let hi = if input + pad < offset + 1 {
        0
    } else {
        ((input + pad - offset - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// 2-D cross-correlation of a `[C, H, W]` input with `[K, C, kh, kw]`
/// kernels, plus a per-output-channel bias. Zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c, h, w, k, kh, kw) = conv_dims(input, kernels)?;
    if bias.shape() != [k] {
        return Err(Error::shape("conv2d bias", &[k], bias.shape()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let (oh, ow) = match (
        window_output_len(h, kh, stride, pad),
        window_output_len(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
            )))
        }
    };
    let x = input.data();
    let wt = kernels.data();
    let mut out = vec![0.0; k * oh * ow];
    for ko in 0..k {
        let plane = &mut out[ko * oh * ow..(ko + 1) * oh * ow];
        plane.fill(bias.data()[ko]);
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(ow, w, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![k, oh, ow], out))
}

fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::InvalidArgument(format!(
            "conv2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    };
    let &[k, kc, kh, kw] = kernels.shape() else {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernels must be [K,C,kh,kw], got {:?}",
            kernels.shape()
        )));
    };
    if kc != c {
        return Err(Error::Shape {
            context: format!(
                "conv2d channels: input {:?} vs kernels {:?}",
                input.shape(),
                kernels.shape()
            ),
            expected: vec![c],
            actual: vec![kc],
        });
    }
    Ok((c, h, w, k, kh, kw))
}

/// Transposed convolution: routes a `[K, H', W']` output-side signal back to
/// the `[C, H, W]` input side through the kernels. This is the input gradient
/// of [`conv2d_forward`].
pub(crate) fn conv2d_backward_input(
    grad_out: &Tensor,
    kernels: &Tensor,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let &[k, _, kh, kw] = kernels.shape() else {
        unreachable!("kernel rank checked at construction")
    };
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let g = grad_out.data();
    let wt = kernels.data();
    let mut out = vec![0.0; c * h * w];
    for ko in 0..k {
        let gplane = &g[ko * oh * ow..(ko + 1) * oh * ow];
        for ci in 0..c {
            let xin = &mut out[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let wv = wt[((ko * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(ow, w, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row = &mut xin[iy * w..(iy + 1) * w];
                        for ox in ox0..ox1 {
                            row[ox * stride + kx - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(input_shape.to_vec(), out)
}

/// Kernel gradient of [`conv2d_forward`].
pub(crate) fn conv2d_backward_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let x = input.data();
    let g = grad_out.data();
    let mut out = vec![0.0; k * c * kh * kw];
    for ko in 0..k {
        let gplane = &g[ko * oh * ow..(ko + 1) * oh * ow];
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(oh, h, ky, stride, pad);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(ow, w, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * row[ox * stride + kx - pad];
                        }
                    }
                    out[((ko * c + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::from_raw(kernel_shape.to_vec(), out)
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, ka], &[kb, n]) = (a.shape(), b.shape()) else {
        return Err(Error::InvalidArgument(format!(
            "matmul needs two matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if ka != kb {
        return Err(Error::Shape {
            context: format!(
                "matmul inner dimensions of {:?} x {:?}",
                a.shape(),
                b.shape()
            ),
            expected: vec![ka],
            actual: vec![kb],
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

/// Result of [`reduce`]. For [`ReduceMode::Max`], `argmax[o]` is the
/// row-major offset of the winning element inside the reduced sub-block of
/// output cell `o` (for a single axis, simply its index along that axis).
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub values: Tensor,
    pub argmax: Option<Vec<usize>>,
}

/// Reduces `input` over `axes`. The reduced axes are removed from the output
/// shape; reducing every axis yields shape `[1]`. An empty axis list returns
/// the input unchanged.
pub fn reduce(input: &Tensor, axes: &[usize], mode: ReduceMode) -> Result<Reduction> {
    let rank = input.rank();
    if axes.is_empty() {
        return Ok(Reduction {
            values: input.clone(),
            argmax: None,
        });
    }
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank || reduced[a] {
            return Err(Error::InvalidArgument(format!(
                "invalid or repeated reduction axis {a} for rank {rank}"
            )));
        }
        reduced[a] = true;
    }

    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * input.shape()[i + 1];
    }
    // offsets of every element of a kept/reduced sub-grid, row-major within it
    let offsets = |keep: bool| -> Vec<usize> {
        let mut offs = vec![0usize];
        for axis in 0..rank {
            if reduced[axis] == keep {
                continue;
            }
            let n = input.shape()[axis];
            let stride = strides[axis];
            offs = offs
                .iter()
                .flat_map(|&o| (0..n).map(move |i| o + i * stride))
                .collect();
        }
        offs
    };
    let kept_offsets = offsets(true);
    let red_offsets = offsets(false);

    let mut out_shape: Vec<usize> = (0..rank)
        .filter(|&a| !reduced[a])
        .map(|a| input.shape()[a])
        .collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }

    let x = input.data();
    let mut values = Vec::with_capacity(kept_offsets.len());
    let mut argmax = Vec::new();
    let mut buf = Vec::with_capacity(red_offsets.len());
    for &base in &kept_offsets {
        match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                buf.clear();
                buf.extend(red_offsets.iter().map(|&r| x[base + r]));
                let s = pairwise_sum(&buf);
                values.push(if mode == ReduceMode::Mean {
                    s / red_offsets.len() as f64
                } else {
                    s
                });
            }
            ReduceMode::Max => {
                let mut best = 0;
                for (j, &r) in red_offsets.iter().enumerate() {
                    if x[base + r] > x[base + red_offsets[best]] {
                        best = j;
                    }
                }
                values.push(x[base + red_offsets[best]]);
                argmax.push(best);
            }
        }
    }
    Ok(Reduction {
        values: Tensor::from_raw(out_shape, values),
        argmax: (mode == ReduceMode::Max).then_some(argmax),
    })
}

/// Corner-aligned bilinear resize of an `[H, W]` map.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = input.shape() else {
        return Err(Error::InvalidArgument(format!(
            "bilinear_resize expects [H,W], got {:?}",
            input.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be at least 1x1".into(),
        ));
    }
    let sample = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = if n_out == 1 {
            (n_in - 1) as f64 / 2.0
        } else {
            o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let x = input.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = sample(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = sample(ox, out_w, w);
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bottom = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Tensor::from_raw(vec![out_h, out_w], out))
}

/// Writes the raw tensor format: magic, `u32` rank, `u32` extents, then
/// `f64` values, all little-endian.
pub fn write_tnsr<W: Write>(tensor: &Tensor, mut w: W) -> Result<()> {
    w.write_all(&TNSR_MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tnsr<R: Read>(r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(r).read_to_end(&mut bytes)?;
    decode_tnsr(&bytes)
}

fn decode_tnsr(bytes: &[u8]) -> Result<Tensor> {
    let err = |offset: usize, message: String| Error::Parse {
        format: "TNSR",
        offset,
        message,
    };
    let u32_at = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| err(offset, "truncated header".into()))
    };
    if bytes.len() < 8 {
        return Err(err(bytes.len(), "truncated magic".into()));
    }
    if bytes[..8] != TNSR_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let rank = u32_at(8)? as usize;
    if rank == 0 {
        return Err(err(8, "rank must be >= 1".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = u32_at(12 + 4 * i)? as usize;
        if e == 0 {
            return Err(err(12 + 4 * i, "zero extent".into()));
        }
        shape.push(e);
    }
    let start = 12 + 4 * rank;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| err(12, "element count overflows".into()))?;
    let body = &bytes[start..];
    if body.len() != n * 8 {
        let at = start + body.len().min(n * 8);
        return Err(err(
            at,
            format!("expected {} payload bytes, found {}", n * 8, body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tnsr(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tnsr(tensor, BufWriter::new(file))
}

pub fn load_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tnsr(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn conv_scalar_kernel() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_hand_counted_dot() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn conv_padding_and_stride_sizes() {
        let x = Tensor::filled(&[1, 5, 7], 1.0);
        let k = Tensor::filled(&[2, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[2]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4]);
        // corner sees a 2x2 patch of ones, centre a full 3x3
        assert_eq!(y.get(&[0, 0, 0]).unwrap(), 4.0);
        assert_eq!(y.get(&[0, 1, 1]).unwrap(), 9.0);
    }

    /// Direct per-output dot product, independent of the row-sweep kernel.
    fn conv_naive(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ko, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[ko, oh, ow], |f| {
            let (o, oy, ox) = (f / (oh * ow), (f / ow) % oh, f % ow);
            let mut acc = b.data()[o];
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.get(&[ci, iy as usize, ix as usize]).unwrap()
                                * k.get(&[o, ci, ky, kx]).unwrap();
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matmul_cases() {
        let id = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let y = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[11.0]);
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn reduce_cases() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = reduce(&x, &[0, 1], ReduceMode::Mean).unwrap();
        assert_eq!(m.values.data(), &[2.5]);
        assert_eq!(reduce(&x, &[], ReduceMode::Sum).unwrap().values, x);

        let y = t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let r = reduce(&y, &[0], ReduceMode::Max).unwrap();
        assert_eq!(r.values.data(), &[3.0, 5.0]);
        assert_eq!(r.argmax.unwrap(), vec![1, 0]);

        let r = reduce(&y, &[1], ReduceMode::Sum).unwrap();
        assert_eq!(r.values.data(), &[6.0, 5.0]);
        assert!(reduce(&y, &[2], ReduceMode::Sum).is_err());
        assert!(reduce(&y, &[0, 0], ReduceMode::Sum).is_err());
    }

    #[test]
    fn bilinear_cases() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(bilinear_resize(&x, 2, 3).unwrap(), x);
        let c = bilinear_resize(&t(&[1, 1], &[7.0]), 4, 4).unwrap();
        assert!(c.data().iter().all(|&v| v == 7.0));
        let r = bilinear_resize(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), 2, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn tnsr_exact_bytes_and_errors() {
        let x = t(&[1, 2], &[1.5, -2.0]);
        let mut buf = Vec::new();
        write_tnsr(&x, &mut buf).unwrap();
        let mut expected = b"TNSR\0\0\0\x01".to_vec();
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tnsr(&buf[..]).unwrap(), x);

        match read_tnsr(&buf[..buf.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 33),
            other => panic!("{other:?}"),
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tnsr(&bad[..]),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn pairwise_sum_exact_for_powers_of_two() {
        let g = 0.1f64 / 3.0;
        for k in 0..12 {
            let n = 1usize << k;
            assert_eq!(pairwise_sum(&vec![g; n]) / n as f64, g);
        }
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..5)
    }

    proptest! {
        #[test]
        fn flat_index_round_trip(shape in shape_strategy(), seed in 0usize..10_000) {
            let x = Tensor::zeros(&shape);
            let flat = seed % x.len();
            let idx = x.unravel_index(flat).unwrap();
            prop_assert_eq!(x.flat_index(&idx).unwrap(), flat);
        }

        #[test]
        fn zero_kernel_gives_zero_output(
            c in 1usize..3, h in 3usize..7, w in 3usize..7, k in 1usize..3,
            vals in prop::collection::vec(-5.0f64..5.0, 2 * 7 * 7),
        ) {
            let x = Tensor::from_fn(&[c, h, w], |i| vals[i % vals.len()]);
            let y = conv2d_forward(&x, &Tensor::zeros(&[k, c, 3, 3]), &Tensor::zeros(&[k]), 1, 1).unwrap();
            prop_assert!(y.data().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn conv_matches_naive(
            c in 1usize..3, h in 3usize..8, w in 3usize..8, k in 1usize..3,
            stride in 1usize..3, pad in 0usize..2,
            vals in prop::collection::vec(-2.0f64..2.0, 64),
        ) {
            let x = Tensor::from_fn(&[c, h, w], |i| vals[i % 64]);
            let kern = Tensor::from_fn(&[k, c, 3, 3], |i| vals[(i * 7 + 3) % 64]);
            let b = Tensor::from_fn(&[k], |i| vals[(i + 11) % 64]);
            let fast = conv2d_forward(&x, &kern, &b, stride, pad).unwrap();
            let slow = conv_naive(&x, &kern, &b, stride, pad);
            prop_assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_stays_within_range(
            h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12,
            vals in prop::collection::vec(-3.0f64..3.0, 36),
        ) {
            let x = Tensor::from_fn(&[h, w], |i| vals[i]);
            let y = bilinear_resize(&x, oh, ow).unwrap();
            prop_assert!(y.min() >= x.min() - 1e-12 && y.max() <= x.max() + 1e-12);
        }

        #[test]
        fn tnsr_round_trip(shape in shape_strategy(), vals in prop::collection::vec(-1e6f64..1e6, 256)) {
            let x = Tensor::from_fn(&shape, |i| vals[i % 256]);
            let mut buf = Vec::new();
            write_tnsr(&x, &mut buf).unwrap();
            prop_assert_eq!(read_tnsr(&buf[..]).unwrap(), x);
        }
    }

    #[test]
    fn sum_over_all_axes_large() {
        let x = Tensor::from_fn(&[1000, 1000], |i| {
            ((i * 2654435761) % 1000) as f64 / 997.0 - 0.4
        });
        let r = reduce(&x, &[0, 1], ReduceMode::Sum).unwrap().values.data()[0];
        let naive: f64 = x.data().iter().sum();
        assert!((r - naive).abs() <= 1e-9 * naive.abs().max(1.0));
    }
}
