use crate::error::{CfpError, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(CfpError::InvalidArgument(format!("eps must be positive, got {eps}")))
    }
}

fn check_channel_vec<T: Copy>(op: &'static str, v: &Tensor<T>, channels: usize) -> Result<()> {
    if v.shape() != [channels] {
        return Err(CfpError::ShapeMismatch {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    Ok(())
}

/// Saved context of a group-norm forward.
pub struct GroupNormCtx<T> {
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` for every `(batch, group)`.
    pub inv_std: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormCtx<T>)> {
    let (b, c, h, w) = x.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(CfpError::Groups {
            op: "group_norm",
            channels: c,
            groups,
        });
    }
    check_eps(eps)?;
    check_channel_vec("group_norm gamma", gamma, c)?;
    check_channel_vec("group_norm beta", beta, c)?;
    let per_group = c / groups;
    let plane = h * w;
    let span = per_group * plane;
    let count = T::lit(span as f64);
    let xd = x.data();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(b * groups);
    for (bg, chunk) in xd.chunks_exact(span).enumerate() {
        let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / count;
        let var = chunk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / count;
        let inv = T::one() / (var + T::lit(eps)).sqrt();
        inv_std.push(inv);
        let g = bg % groups;
        for (j, &v) in chunk.iter().enumerate() {
            let ch = g * per_group + j / plane;
            let n = (v - mean) * inv;
            xhat[bg * span + j] = n;
            out[bg * span + j] = n * gamma.data()[ch] + beta.data()[ch];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), out),
        GroupNormCtx {
            normalized: Tensor::from_parts(shape, xhat),
            inv_std,
        },
    ))
}

/// Gradients `(input, gamma, beta)`.
pub fn group_norm_backward<T: Element>(
    ctx: &GroupNormCtx<T>,
    groups: usize,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = ctx.normalized.shape();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let per_group = c / groups;
    let span = per_group * plane;
    let count = T::lit(span as f64);
    let xhat = ctx.normalized.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); xhat.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for bg in 0..xhat.len() / span {
        let g = bg % groups;
        let base = bg * span;
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..span {
            let ch = g * per_group + j / plane;
            let dy = gy[base + j];
            let dxhat = dy * gamma.data()[ch];
            mean_dxhat = mean_dxhat + dxhat;
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat[base + j];
            ggamma[ch] = ggamma[ch] + dy * xhat[base + j];
            gbeta[ch] = gbeta[ch] + dy;
        }
        mean_dxhat = mean_dxhat / count;
        mean_dxhat_xhat = mean_dxhat_xhat / count;
        let inv = ctx.inv_std[bg];
        for j in 0..span {
            let ch = g * per_group + j / plane;
            let dxhat = gy[base + j] * gamma.data()[ch];
            gx[base + j] = inv * (dxhat - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

/// `(channels, inner)` for a tensor normalized along axis 1.
fn axis1_layout<T: Copy>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(CfpError::Rank {
            op: "batch_norm",
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    Ok((x.shape()[1], x.shape()[2..].iter().product()))
}

/// Inference-mode batch norm along axis 1 with fixed running statistics.
/// Works for `[B, C]`, `[B, K, C]` and `[B, C, H, W]` alike.
pub fn batch_norm_forward<T: Element>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (c, inner) = axis1_layout(x)?;
    check_eps(eps)?;
    for (op, v) in [
        ("batch_norm mean", mean),
        ("batch_norm var", var),
        ("batch_norm gamma", gamma),
        ("batch_norm beta", beta),
    ] {
        check_channel_vec(op, v, c)?;
    }
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma.data()[ch] / (var.data()[ch] + T::lit(eps)).sqrt())
        .collect();
    let mut out = x.to_vec();
    for (i, chunk) in out.chunks_exact_mut(inner).enumerate() {
        let ch = i % c;
        let (m, s, bt) = (mean.data()[ch], scale[ch], beta.data()[ch]);
        for v in chunk {
            *v = (*v - m) * s + bt;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradients `(input, gamma, beta)`; running statistics are constants.
pub fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, inner) = (x.shape()[1], x.shape()[2..].iter().product::<usize>());
    let inv: Vec<T> = (0..c)
        .map(|ch| T::one() / (var.data()[ch] + T::lit(eps)).sqrt())
        .collect();
    let mut gx = vec![T::zero(); x.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for (i, (xs, gs)) in x
        .data()
        .chunks_exact(inner)
        .zip(grad_out.data().chunks_exact(inner))
        .enumerate()
    {
        let ch = i % c;
        let m = mean.data()[ch];
        let k = gamma.data()[ch] * inv[ch];
        for (j, (&xv, &gy)) in xs.iter().zip(gs).enumerate() {
            gx[i * inner + j] = gy * k;
            ggamma[ch] = ggamma[ch] + gy * (xv - m) * inv[ch];
            gbeta[ch] = gbeta[ch] + gy;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}
