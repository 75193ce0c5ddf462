use crate::error::{CfpError, Result};
use crate::ops::pointwise::axis_layout;
use crate::tensor::{Element, Tensor};

/// Replicate every pixel into a 2x2 block.
pub fn upsample_nearest2x<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("upsample_nearest2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(x.numel() * 4);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / 2) * w..][..w];
            for ox in 0..ow {
                out.push(row[ox / 2]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
}

pub fn upsample_nearest2x_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let ow = 2 * w;
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (p, gplane) in grad_out.data().chunks_exact(4 * h * w).enumerate() {
        for (i, &g) in gplane.iter().enumerate() {
            let (oy, ox) = (i / ow, i % ow);
            let idx = p * h * w + (oy / 2) * w + ox / 2;
            gx[idx] = gx[idx] + g;
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Stack `[B, C_i, H, W]` maps along the channel axis in argument order.
pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| CfpError::InvalidArgument("concat of zero tensors".into()))?;
    let (b, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for x in xs {
        let (xb, xc, xh, xw) = x.dims4("concat_channels")?;
        if (xb, xh, xw) != (b, h, w) {
            return Err(CfpError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        total += xc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for x in xs {
            let c = x.shape()[1];
            out.extend_from_slice(&x.data()[bi * c * plane..][..c * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![b, total, h, w], out))
}

pub fn concat_channels_backward<T: Element>(channels: &[usize], grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let g = grad_out
                .slice_channels(start, start + c)
                .expect("concat split within bounds");
            start += c;
            g
        })
        .collect()
}

/// `[B, C, H, W] -> [B, H, W, C]`.
pub fn to_channels_last<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4("to_channels_last")?;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for p in 0..h * w {
            for ci in 0..c {
                out.push(xd[(bi * c + ci) * h * w + p]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, h, w, c], out))
}

/// `[B, H, W, C] -> [B, C, H, W]`.
pub fn to_channels_first<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4("to_channels_first")?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for p in 0..h * w {
            for ci in 0..c {
                out[(bi * c + ci) * h * w + p] = xd[(bi * h * w + p) * c + ci];
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

/// Mean along `axis`, removing it.
pub fn mean_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let scale = T::lit(1.0 / len as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + xd[(o * len + k) * inner + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * scale);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn mean_axis_backward<T: Element>(input_shape: &[usize], axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(input_shape, axis).expect("validated in forward");
    let scale = T::lit(1.0 / len as f64);
    let gd = grad_out.data();
    let mut gx = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            gx.extend(gd[o * inner..][..inner].iter().map(|&g| g * scale));
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}
