use serde::{Deserialize, Serialize};

use crate::error::{CfpError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

#[inline]
fn sigmoid<T: Element>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation_forward<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Silu => x.map(|v| v * sigmoid(v)),
    }
}

/// Vector-Jacobian product; ReLU uses subgradient 0 at the origin.
pub fn activation_backward<T: Element>(x: &Tensor<T>, kind: Activation, grad_out: &Tensor<T>) -> Tensor<T> {
    let d: Vec<T> = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let local = match kind {
                Activation::Relu => {
                    if v > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => {
                    let s = sigmoid(v);
                    s * (T::one() - s)
                }
                Activation::Silu => {
                    let s = sigmoid(v);
                    s * (T::one() + v * (T::one() - s))
                }
            };
            g * local
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), d)
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(CfpError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub fn softmax_forward<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(y.shape(), axis).expect("validated in forward");
    let (yd, gd) = (y.data(), grad_out.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot = (0..len).fold(T::zero(), |a, k| a + yd[at(k)] * gd[at(k)]);
            for k in 0..len {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

pub fn elementwise<T: Element>(x: &Tensor<T>, y: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(CfpError::ShapeMismatch {
            op: "elementwise",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| match kind {
            Binary::Add => a + b,
            Binary::Mul => a * b,
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Whether a channel weight vector is shared across the batch or per sample.
fn channel_weight_layout<T: Copy>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, bool)> {
    let (b, c, h, wd) = x.dims4("channel_broadcast_mul")?;
    let per_sample = match w.numel() {
        n if n == c && w.shape() == [c] => false,
        n if n == b * c && (w.shape() == [b, c] || w.shape() == [b, c, 1, 1]) => true,
        _ => {
            return Err(CfpError::ShapeMismatch {
                op: "channel_broadcast_mul",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            })
        }
    };
    Ok((b, c, h * wd, per_sample))
}

/// Multiply every spatial position of channel `c` by `w[c]`.
///
/// `w` is either `[C]` (shared) or `[B, C]` / `[B, C, 1, 1]` (per sample).
pub fn channel_broadcast_mul<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, plane, per_sample) = channel_weight_layout(x, w)?;
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let wv = w.data()[if per_sample { i } else { i % c }];
        chunk.iter_mut().for_each(|v| *v = *v * wv);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn channel_broadcast_mul_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (_, c, plane, per_sample) = channel_weight_layout(x, w).expect("validated in forward");
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    for (i, (xs, gs)) in x
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .enumerate()
    {
        let wi = if per_sample { i } else { i % c };
        let wv = w.data()[wi];
        let mut acc = T::zero();
        for (j, (&xv, &g)) in xs.iter().zip(gs).enumerate() {
            gx[i * plane + j] = g * wv;
            acc = acc + g * xv;
        }
        gw[wi] = gw[wi] + acc;
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
    )
}

/// Multiply sample `b` (leading axis) by `factors[b]`.
pub fn scale_samples<T: Element>(x: &Tensor<T>, factors: &[f64]) -> Result<Tensor<T>> {
    let batch = x.shape()[0];
    if factors.len() != batch {
        return Err(CfpError::InvalidArgument(format!(
            "{} sample factors for batch of {batch}",
            factors.len()
        )));
    }
    let per = x.numel() / batch;
    let mut out = x.to_vec();
    for (chunk, &f) in out.chunks_exact_mut(per).zip(factors) {
        let f = T::lit(f);
        chunk.iter_mut().for_each(|v| *v = *v * f);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `y = x Wᵀ + b` over the last axis.
pub fn linear_forward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (d_out, d_in) = match weight.shape() {
        &[o, i] => (o, i),
        s => {
            return Err(CfpError::Rank {
                op: "linear weight",
                expected: 2,
                shape: s.to_vec(),
            })
        }
    };
    let last = *x.shape().last().expect("tensors have rank >= 1");
    if last != d_in {
        return Err(CfpError::ChannelMismatch {
            op: "linear",
            expected: d_in,
            got: last,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(CfpError::ShapeMismatch {
                op: "linear bias",
                lhs: b.shape().to_vec(),
                rhs: vec![d_out],
            });
        }
    }
    let wd = weight.data();
    let rows = x.numel() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for row in x.data().chunks_exact(d_in) {
        for o in 0..d_out {
            let wrow = &wd[o * d_in..][..d_in];
            let dot = row.iter().zip(wrow).fold(T::zero(), |a, (&p, &q)| a + p * q);
            out.push(dot + bias.map_or(T::zero(), |b| b.data()[o]));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    Ok(Tensor::from_parts(shape, out))
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    let wd = weight.data();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); d_out];
    for (r, (row, grow)) in x
        .data()
        .chunks_exact(d_in)
        .zip(grad_out.data().chunks_exact(d_out))
        .enumerate()
    {
        for (o, &g) in grow.iter().enumerate() {
            gb[o] = gb[o] + g;
            for i in 0..d_in {
                gx[r * d_in + i] = gx[r * d_in + i] + g * wd[o * d_in + i];
                gw[o * d_in + i] = gw[o * d_in + i] + g * row[i];
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        has_bias.then(|| Tensor::from_parts(vec![d_out], gb)),
    )
}
