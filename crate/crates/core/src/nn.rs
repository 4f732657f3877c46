//! Layer kernels with hand-written backward passes, and plain SGD.
//!
//! Kernels are stateless: `backward` recomputes whatever it needs from the
//! forward input, so callers keep only the per-layer inputs of a pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_acc, matmul_at_b_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Weight `[in_dim, out_dim]`, bias `[out_dim]`.
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    /// Valid (unpadded) convolution over `[N, C, H, W]`.
    /// Weight `[in_ch, kernel, kernel, out_ch]`, bias `[out_ch]`.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Non-overlapping max pooling (stride = kernel, trailing rows dropped).
    MaxPool2d {
        kernel: usize,
    },
    Flatten,
    /// Linear classifier producing logits; pair with [`softmax_cross_entropy`].
    SoftmaxCrossEntropyHead {
        in_dim: usize,
        classes: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxCrossEntropyHead { .. } => "softmax_ce_head",
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { in_dim, out_dim } => vec![vec![in_dim, out_dim], vec![out_dim]],
            LayerKind::SoftmaxCrossEntropyHead { in_dim, classes } => {
                vec![vec![in_dim, classes], vec![classes]]
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![in_ch, kernel, kernel, out_ch], vec![out_ch]],
            LayerKind::Relu | LayerKind::MaxPool2d { .. } | LayerKind::Flatten => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn has_params(&self) -> bool {
        !self.param_shapes().is_empty()
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { in_dim, .. } | LayerKind::SoftmaxCrossEntropyHead { in_dim, .. } => {
                in_dim
            }
            LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            _ => 0,
        }
    }

    /// Output shape for a given input shape (batch dimension included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |expected: String| Error::shape(self.name(), expected, input);
        match *self {
            LayerKind::Dense { in_dim, out_dim } => match input {
                [n, d] if *d == in_dim => Ok(vec![*n, out_dim]),
                _ => Err(err(format!("[N, {in_dim}]"))),
            },
            LayerKind::SoftmaxCrossEntropyHead { in_dim, classes } => match input {
                [n, d] if *d == in_dim => Ok(vec![*n, classes]),
                _ => Err(err(format!("[N, {in_dim}]"))),
            },
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => match input {
                [n, c, h, w] if *c == in_ch && *h >= kernel && *w >= kernel && stride > 0 => {
                    Ok(vec![
                        *n,
                        out_ch,
                        (h - kernel) / stride + 1,
                        (w - kernel) / stride + 1,
                    ])
                }
                _ => Err(err(format!("[N, {in_ch}, H>={kernel}, W>={kernel}]"))),
            },
            LayerKind::MaxPool2d { kernel } => match input {
                [n, c, h, w] if *h >= kernel && *w >= kernel && kernel > 0 => {
                    Ok(vec![*n, *c, h / kernel, w / kernel])
                }
                _ => Err(err(format!("[N, C, H>={kernel}, W>={kernel}]"))),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => match input {
                [n, rest @ ..] if !rest.is_empty() => Ok(vec![*n, rest.iter().product()]),
                _ => Err(err("[N, ...]".into())),
            },
        }
    }
}

/// A layer kind together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
}

impl Layer {
    pub fn new(kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let shapes = kind.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::shape(
                kind.name(),
                format!("parameter shapes {shapes:?}"),
                &params
                    .iter()
                    .flat_map(|p| p.shape().to_vec())
                    .collect::<Vec<_>>(),
            ));
        }
        Ok(Layer { kind, params })
    }

    /// Uniform fan-in initialisation, `U(-sqrt(1/fan_in), sqrt(1/fan_in))` for
    /// weights and biases alike.
    pub fn init<R: Rng + ?Sized>(kind: LayerKind, rng: &mut R) -> Self {
        let shapes = kind.param_shapes();
        let bound = if shapes.is_empty() {
            0.0
        } else {
            (1.0 / kind.fan_in() as f64).sqrt()
        };
        let params = shapes
            .iter()
            .map(|s| {
                let mut t = Tensor::zeros(s);
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                t
            })
            .collect();
        Layer { kind, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.kind.output_shape(input.shape())?;
        Ok(match self.kind {
            LayerKind::Dense { in_dim, out_dim }
            | LayerKind::SoftmaxCrossEntropyHead {
                in_dim,
                classes: out_dim,
            } => {
                let n = input.rows();
                let (w, b) = (self.params[0].data(), self.params[1].data());
                let mut out = Vec::with_capacity(n * out_dim);
                for _ in 0..n {
                    out.extend_from_slice(b);
                }
                matmul_acc(input.data(), w, &mut out, n, in_dim, out_dim);
                Tensor::new(out_shape, out)?
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => conv_forward(
                input,
                &self.params,
                in_ch,
                out_ch,
                kernel,
                stride,
                &out_shape,
            )?,
            LayerKind::Relu => input.map(|x| if x <= 0.0 { 0.0 } else { x }),
            LayerKind::MaxPool2d { kernel } => {
                let (out, _) = maxpool(input, kernel, &out_shape);
                out
            }
            LayerKind::Flatten => input.clone().reshape(&out_shape)?,
        })
    }

    /// Returns `(input_grad, param_grads)` given the forward input and the
    /// gradient with respect to the forward output.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let out_shape = self.kind.output_shape(input.shape())?;
        if grad_out.shape() != out_shape.as_slice() {
            return Err(Error::shape(
                format!("{} backward", self.kind.name()),
                format!("upstream gradient {out_shape:?}"),
                grad_out.shape(),
            ));
        }
        match self.kind {
            LayerKind::Dense { in_dim, out_dim }
            | LayerKind::SoftmaxCrossEntropyHead {
                in_dim,
                classes: out_dim,
            } => {
                let n = input.rows();
                let g = grad_out.data();
                let mut dw = vec![0.0; in_dim * out_dim];
                matmul_at_b_acc(input.data(), g, &mut dw, n, in_dim, out_dim);
                let mut db = vec![0.0; out_dim];
                for r in 0..n {
                    for (d, &gv) in db.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                        *d += gv;
                    }
                }
                let mut dx = vec![0.0; n * in_dim];
                matmul_a_bt(g, self.params[0].data(), &mut dx, n, in_dim, out_dim);
                Ok((
                    Tensor::new(input.shape().to_vec(), dx)?,
                    vec![
                        Tensor::new(vec![in_dim, out_dim], dw)?,
                        Tensor::new(vec![out_dim], db)?,
                    ],
                ))
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => conv_backward(input, grad_out, &self.params, in_ch, out_ch, kernel, stride),
            LayerKind::Relu => {
                let dx = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::new(input.shape().to_vec(), dx)?, Vec::new()))
            }
            LayerKind::MaxPool2d { kernel } => {
                let (_, argmax) = maxpool(input, kernel, &out_shape);
                let mut dx = vec![0.0; input.len()];
                for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                    dx[src] += g;
                }
                Ok((Tensor::new(input.shape().to_vec(), dx)?, Vec::new()))
            }
            LayerKind::Flatten => Ok((grad_out.clone().reshape(input.shape())?, Vec::new())),
        }
    }
}

/// Unfold one sample `[C, H, W]` into `[OH*OW, C*k*k]` patches.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let patch = c * k * k;
    let mut cols = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            let mut j = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let base = ci * h * w + (oy * stride + ky) * w + ox * stride;
                    row[j..j + k].copy_from_slice(&x[base..base + k]);
                    j += k;
                }
            }
        }
    }
    cols
}

fn conv_forward(
    input: &Tensor,
    params: &[Tensor],
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    out_shape: &[usize],
) -> Result<Tensor> {
    let (n, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let patch = in_ch * k * k;
    let (wt, bias) = (params[0].data(), params[1].data());
    let mut out = vec![0.0; n * out_ch * oh * ow];
    let mut tmp = vec![0.0; oh * ow * out_ch];
    for s in 0..n {
        let cols = im2col(input.row(s), in_ch, h, w, k, stride, oh, ow);
        for p in 0..oh * ow {
            tmp[p * out_ch..(p + 1) * out_ch].copy_from_slice(bias);
        }
        matmul_acc(&cols, wt, &mut tmp, oh * ow, patch, out_ch);
        let dst = &mut out[s * out_ch * oh * ow..(s + 1) * out_ch * oh * ow];
        for p in 0..oh * ow {
            for o in 0..out_ch {
                dst[o * oh * ow + p] = tmp[p * out_ch + o];
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out)
}

fn conv_backward(
    input: &Tensor,
    grad_out: &Tensor,
    params: &[Tensor],
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let patch = in_ch * k * k;
    let wt = params[0].data();
    let mut dw = vec![0.0; patch * out_ch];
    let mut db = vec![0.0; out_ch];
    let mut dx = vec![0.0; input.len()];
    let mut g_cols = vec![0.0; oh * ow * out_ch];
    let mut d_cols = vec![0.0; oh * ow * patch];
    for s in 0..n {
        let g = grad_out.row(s);
        for o in 0..out_ch {
            for p in 0..oh * ow {
                let v = g[o * oh * ow + p];
                g_cols[p * out_ch + o] = v;
                db[o] += v;
            }
        }
        let cols = im2col(input.row(s), in_ch, h, w, k, stride, oh, ow);
        matmul_at_b_acc(&cols, &g_cols, &mut dw, oh * ow, patch, out_ch);
        matmul_a_bt(&g_cols, wt, &mut d_cols, oh * ow, patch, out_ch);
        let dxs = &mut dx[s * in_ch * h * w..(s + 1) * in_ch * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &d_cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                let mut j = 0;
                for ci in 0..in_ch {
                    for ky in 0..k {
                        let base = ci * h * w + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            dxs[base + kx] += row[j + kx];
                        }
                        j += k;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        vec![
            Tensor::new(vec![in_ch, k, k, out_ch], dw)?,
            Tensor::new(vec![out_ch], db)?,
        ],
    ))
}

/// Pooled output and, for every output element, the flat input index of its max.
fn maxpool(input: &Tensor, k: usize, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * w + ox * k + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), out).expect("pool shape"),
        argmax,
    )
}

/// Forward through a chain of layers.
pub fn forward_chain<'a>(
    layers: impl IntoIterator<Item = &'a Layer>,
    input: &Tensor,
) -> Result<Tensor> {
    let mut x = input.clone();
    for layer in layers {
        x = layer.forward(&x)?;
    }
    Ok(x)
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer labels, with the
/// gradient of that mean with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    let c = logits.row_len();
    if logits.shape().len() != 2 || labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("[{}, C] logits", labels.len()),
            logits.shape(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &mut grad.data_mut()[r * c..(r + 1) * c];
        let p = row[label];
        // clamp without f64::max, which would turn a NaN probability into a finite loss
        loss -= if p < f64::MIN_POSITIVE {
            f64::MIN_POSITIVE
        } else {
            p
        }
        .ln();
        row[label] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    for g in grad.data_mut() {
        *g *= inv;
    }
    Ok((loss * inv, grad))
}

/// Parameters updated together under one learning-rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub tensors: Vec<Tensor>,
    pub lr_scale: f64,
}

/// In-place `theta -= lr * g`.
pub fn sgd_update(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd", format!("{:?}", p.shape()), g.shape()));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// `theta <- theta - base_lr * lr_scale * g` for every group.
pub fn sgd_step(groups: &mut [ParamGroup], grads: &[Vec<Tensor>], base_lr: f64) -> Result<()> {
    if groups.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} groups but {} gradient lists",
            groups.len(),
            grads.len()
        )));
    }
    for (group, g) in groups.iter_mut().zip(grads) {
        sgd_update(&mut group.tensors, g, base_lr * group.lr_scale)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity() {
        let layer = Layer::new(
            LayerKind::Dense {
                in_dim: 2,
                out_dim: 2,
            },
            vec![t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2], &[0.0, 0.0])],
        )
        .unwrap();
        let out = layer.forward(&t(&[1, 2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_forward_and_backward() {
        let relu = Layer::new(LayerKind::Relu, vec![]).unwrap();
        let out = relu.forward(&t(&[1, 3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let (dx, pg) = relu
            .backward(&t(&[1, 2], &[-1.0, 2.0]), &t(&[1, 2], &[1.0, 1.0]))
            .unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0]);
        assert!(pg.is_empty());
        // gradient at exactly zero is zero
        let (dx0, _) = relu
            .backward(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[5.0]))
            .unwrap();
        assert_eq!(dx0.data(), &[0.0]);
    }

    #[test]
    fn conv_all_ones() {
        let kind = LayerKind::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 2,
            stride: 1,
        };
        let layer = Layer::new(
            kind,
            vec![Tensor::filled(&[1, 2, 2, 1], 1.0), Tensor::zeros(&[1])],
        )
        .unwrap();
        let out = layer.forward(&Tensor::filled(&[1, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_stride_and_channels_match_direct_sum() {
        let kind = LayerKind::Conv2d {
            in_ch: 2,
            out_ch: 3,
            kernel: 2,
            stride: 2,
        };
        let mut rng = rng_for(3, &[]);
        let layer = Layer::init(kind, &mut rng);
        let x = Layer::init(
            LayerKind::Dense {
                in_dim: 50,
                out_dim: 1,
            },
            &mut rng,
        )
        .params[0]
            .clone()
            .reshape(&[1, 2, 5, 5])
            .unwrap();
        let out = layer.forward(&x).unwrap();
        assert_eq!(out.shape(), &[1, 3, 2, 2]);
        let w = layer.params[0].data();
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = layer.params[1].data()[o];
                    for c in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let xv = x.data()[c * 25 + (oy * 2 + ky) * 5 + ox * 2 + kx];
                                s += xv * w[((c * 2 + ky) * 2 + kx) * 3 + o];
                            }
                        }
                    }
                    assert!((out.data()[o * 4 + oy * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_param_grad_is_outer_product() {
        let layer = Layer::init(
            LayerKind::Dense {
                in_dim: 3,
                out_dim: 2,
            },
            &mut rng_for(1, &[]),
        );
        let x = t(&[1, 3], &[0.5, -1.0, 2.0]);
        let up = t(&[1, 2], &[1.5, -0.25]);
        let (_, grads) = layer.backward(&x, &up).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(grads[0].data()[i * 2 + o], x.data()[i] * up.data()[o]);
            }
        }
        assert_eq!(grads[1].data(), up.data());
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let pool = Layer::new(LayerKind::MaxPool2d { kernel: 2 }, vec![]).unwrap();
        let x = t(&[1, 1, 2, 2], &[1.0, 3.0, 2.0, 0.0]);
        assert_eq!(pool.forward(&x).unwrap().data(), &[3.0]);
        let (dx, _) = pool.backward(&x, &t(&[1, 1, 1, 1], &[7.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_layer() {
        let layer = Layer::init(
            LayerKind::Dense {
                in_dim: 3,
                out_dim: 2,
            },
            &mut rng_for(1, &[]),
        );
        let err = layer
            .forward(&Tensor::zeros(&[2, 4]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("dense") && err.contains("[2, 4]"), "{err}");
        let conv = LayerKind::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
        };
        assert!(conv.output_shape(&[1, 1, 2, 2]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = t(&[2, 3], &[1000.0, 1.0, -5.0, 0.1, 0.2, 0.3]);
        let p = softmax(&logits);
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(p.all_finite());
    }

    #[test]
    fn sgd_arithmetic_and_freeze() {
        let mut groups = vec![
            ParamGroup {
                tensors: vec![t(&[1], &[1.0])],
                lr_scale: 1.0,
            },
            ParamGroup {
                tensors: vec![t(&[1], &[1.0])],
                lr_scale: 0.0,
            },
            ParamGroup {
                tensors: vec![t(&[1], &[1.0])],
                lr_scale: 0.1,
            },
        ];
        let g = vec![vec![t(&[1], &[0.5])]; 3];
        sgd_step(&mut groups, &g, 0.01).unwrap();
        assert!((groups[0].tensors[0].data()[0] - 0.995).abs() < 1e-15);
        assert_eq!(groups[1].tensors[0].data()[0].to_bits(), 1.0f64.to_bits());
        // slow-lr 0.1 under base 1e-2 is an effective step of 1e-3
        assert!((groups[2].tensors[0].data()[0] - (1.0 - 1e-3 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let kind = LayerKind::Dense {
            in_dim: 16,
            out_dim: 4,
        };
        let a = Layer::init(kind, &mut rng_for(9, &[2]));
        let b = Layer::init(kind, &mut rng_for(9, &[2]));
        assert_eq!(a, b);
        let bound = 0.25;
        assert!(a
            .params
            .iter()
            .flat_map(|p| p.data())
            .all(|v| v.abs() <= bound));
    }
}
