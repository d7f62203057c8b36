//! Forward and backward kernels.
//!
//! Convolution is a valid, stride-1 cross-correlation. Every kernel that
//! produces new values checks them for finiteness before returning.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

fn check_dim(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}

fn conv_shapes(input: &Tensor, weight: &Tensor) -> Result<(Shape4, Shape4, usize, usize)> {
    let x = input.shape4()?;
    let w = weight.shape4()?;
    check_dim("conv2d", "input channels", w.channels, x.channels)?;
    if w.height > x.height || w.width > x.width || w.height == 0 || w.width == 0 {
        return Err(Error::InvalidShape(format!(
            "conv2d: kernel {}x{} does not fit input {}x{}",
            w.height, w.width, x.height, x.width
        )));
    }
    Ok((x, w, x.height - w.height + 1, x.width - w.width + 1))
}

/// `out[b,o,y,x] = bias[o] + sum_{c,i,j} input[b,c,y+i,x+j] * weight[o,c,i,j]`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (x, w, oh, ow) = conv_shapes(input, weight)?;
    check_dim("conv2d", "bias length", w.batch, bias.len())?;
    let (cin, cout, kh, kw) = (x.channels, w.batch, w.height, w.width);
    let inp = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; x.batch * cout * oh * ow];
    for b in 0..x.batch {
        for o in 0..cout {
            let plane = &mut out[(b * cout + o) * oh * ow..(b * cout + o + 1) * oh * ow];
            plane.fill(bias.data()[o]);
            for c in 0..cin {
                let src = &inp[(b * cin + c) * x.height * x.width..][..x.height * x.width];
                for i in 0..kh {
                    for j in 0..kw {
                        let k = wt[((o * cin + c) * kh + i) * kw + j];
                        for y in 0..oh {
                            let row = &src[(y + i) * x.width + j..][..ow];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for (d, s) in dst.iter_mut().zip(row) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![x.batch, cout, oh, ow], out)?.ensure_finite("conv2d")
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (x, w, oh, ow) = conv_shapes(input, weight)?;
    let g = grad_out.shape4()?;
    check_dim("conv2d backward", "batch", x.batch, g.batch)?;
    check_dim("conv2d backward", "output channels", w.batch, g.channels)?;
    check_dim("conv2d backward", "output height", oh, g.height)?;
    check_dim("conv2d backward", "output width", ow, g.width)?;
    let (cin, cout, kh, kw) = (x.channels, w.batch, w.height, w.width);
    let inp = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gi = vec![0.0f32; input.len()];
    let mut gw = vec![0.0f32; weight.len()];
    let mut gb = vec![0.0f32; cout];
    for b in 0..x.batch {
        for o in 0..cout {
            let gplane = &go[(b * cout + o) * oh * ow..][..oh * ow];
            gb[o] += gplane.iter().sum::<f32>();
            for c in 0..cin {
                let base = (b * cin + c) * x.height * x.width;
                for i in 0..kh {
                    for j in 0..kw {
                        let widx = ((o * cin + c) * kh + i) * kw + j;
                        let k = wt[widx];
                        let mut acc = 0.0f32;
                        for y in 0..oh {
                            let grow = &gplane[y * ow..(y + 1) * ow];
                            let off = base + (y + i) * x.width + j;
                            let srow = &inp[off..off + ow];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f32>();
                            let drow = &mut gi[off..off + ow];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += k * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gi)?.ensure_finite("conv2d backward")?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?.ensure_finite("conv2d backward")?,
        bias: Tensor::new(vec![cout], gb)?.ensure_finite("conv2d backward")?,
    })
}

/// Non-overlapping max pooling. Returns the pooled tensor and, for every
/// output element, the flat index of the selected input element. Ties go to
/// the first maximum in row-major window order.
pub fn maxpool2d_forward(input: &Tensor, ph: usize, pw: usize) -> Result<(Tensor, Vec<usize>)> {
    let x = input.shape4()?;
    if ph == 0 || pw == 0 || x.height % ph != 0 || x.width % pw != 0 {
        return Err(Error::InvalidShape(format!(
            "maxpool: {}x{} map is not divisible into {}x{} windows",
            x.height, x.width, ph, pw
        )));
    }
    let (oh, ow) = (x.height / ph, x.width / pw);
    let data = input.data();
    let mut out = Vec::with_capacity(x.batch * x.channels * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for plane in 0..x.batch * x.channels {
        let base = plane * x.height * x.width;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + y * ph * x.width + xo * pw;
                for i in 0..ph {
                    for j in 0..pw {
                        let k = base + (y * ph + i) * x.width + xo * pw + j;
                        if data[k] > data[best] {
                            best = k;
                        }
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![x.batch, x.channels, oh, ow], out)?, idx))
}

/// Routes each upstream gradient to the input element its window selected.
pub fn maxpool2d_backward(grad_out: &Tensor, indices: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    check_dim("maxpool backward", "index count", grad_out.len(), indices.len())?;
    let mut gi = Tensor::zeros(input_shape);
    let dst = gi.data_mut();
    for (&k, &g) in indices.iter().zip(grad_out.data()) {
        if k >= dst.len() {
            return Err(Error::InvalidArgument(format!(
                "maxpool backward: index {k} outside input of {} elements",
                dst.len()
            )));
        }
        dst[k] += g;
    }
    Ok(gi)
}

/// `out = input · weightᵀ + bias` for `input: [B,D]`, `weight: [U,D]`.
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, d) = input.dims2()?;
    let (u, wd) = weight.dims2()?;
    check_dim("fc", "input width", wd, d)?;
    check_dim("fc", "bias length", u, bias.len())?;
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(b * u);
    for row in x.chunks_exact(d.max(1)).take(b) {
        for (o, wrow) in w.chunks_exact(d.max(1)).take(u).enumerate() {
            let dot: f32 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.push(bias.data()[o] + dot);
        }
    }
    Tensor::new(vec![b, u], out)?.ensure_finite("fc")
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn fc_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let (b, d) = input.dims2()?;
    let (u, wd) = weight.dims2()?;
    check_dim("fc backward", "input width", wd, d)?;
    let (gb_rows, gu) = grad_out.dims2()?;
    check_dim("fc backward", "batch", b, gb_rows)?;
    check_dim("fc backward", "units", u, gu)?;
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gi = vec![0.0f32; b * d];
    let mut gw = vec![0.0f32; u * d];
    let mut gbias = vec![0.0f32; u];
    for r in 0..b {
        let xrow = &x[r * d..(r + 1) * d];
        let girow = &mut gi[r * d..(r + 1) * d];
        for o in 0..u {
            let gv = g[r * u + o];
            gbias[o] += gv;
            let wrow = &w[o * d..(o + 1) * d];
            let gwrow = &mut gw[o * d..(o + 1) * d];
            for k in 0..d {
                gwrow[k] += gv * xrow[k];
                girow[k] += gv * wrow[k];
            }
        }
    }
    Ok(FcGrads {
        input: Tensor::new(vec![b, d], gi)?.ensure_finite("fc backward")?,
        weight: Tensor::new(vec![u, d], gw)?.ensure_finite("fc backward")?,
        bias: Tensor::new(vec![u], gbias)?.ensure_finite("fc backward")?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given the pre-activation values.
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_dim("relu backward", "length", pre_activation.len(), grad_out.len())?;
    let data = pre_activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}

/// Row-wise softmax over `[B,U]`, stabilized by subtracting the row max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, u) = logits.dims2()?;
    if u == 0 {
        return Err(Error::InvalidShape("softmax over zero units".into()));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(u) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out.ensure_finite("softmax")
}

fn check_labels(u: usize, labels: &[usize]) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&l| l >= u) {
        return Err(Error::LabelOutOfRange { label, classes: u });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f32> {
    let (b, u) = probs.dims2()?;
    check_dim("cross entropy", "batch", b, labels.len())?;
    check_labels(u, labels)?;
    if b == 0 {
        return Ok(0.0);
    }
    let total: f64 = probs
        .data()
        .chunks_exact(u)
        .zip(labels)
        .map(|(row, &l)| -f64::from(row[l].max(f32::MIN_POSITIVE)).ln())
        .sum();
    Ok((total / b as f64) as f32)
}

/// Gradient of mean cross-entropy with respect to the pre-softmax logits:
/// `(probs - onehot(labels)) / B`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, u) = probs.dims2()?;
    check_dim("cross entropy backward", "batch", b, labels.len())?;
    check_labels(u, labels)?;
    let scale = 1.0 / b.max(1) as f32;
    let mut grad = probs.clone();
    for (row, &l) in grad.data_mut().chunks_exact_mut(u).zip(labels) {
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(grad)
}

/// `params ← params − lr · grads`.
pub fn sgd_step(params: &mut Tensor, grads: &Tensor, lr: f32) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::InvalidShape(format!(
            "sgd: parameter shape {:?} vs gradient shape {:?}",
            params.shape(),
            grads.shape()
        )));
    }
    for (p, g) in params.data_mut().iter_mut().zip(grads.data()) {
        *p -= lr * g;
    }
    if !params.all_finite() {
        return Err(Error::NonFinite { op: "sgd" });
    }
    Ok(())
}
