//! Soft-assignment residual aggregation against a learnable codebook.
//!
//! For every sample and pixel `x_i` (a `C`-vector), each codeword `b_k` gets the
//! assignment weight
//!
//! ```text
//! a_ik = exp(-s_k |x_i - b_k|^2) / sum_j exp(-s_j |x_i - b_j|^2)
//! ```
//!
//! and the per-codeword encoding is `e_k = sum_i a_ik (x_i - b_k)`.

use crate::error::{CfpError, Result};
use crate::tensor::{Element, Tensor};

struct Dims {
    batch: usize,
    channels: usize,
    pixels: usize,
    codes: usize,
}

fn resolve<T: Element>(x: &Tensor<T>, codewords: &Tensor<T>, scales: &Tensor<T>) -> Result<Dims> {
    let (batch, channels, h, w) = x.dims4("codebook_aggregate")?;
    let (codes, dim) = match codewords.shape() {
        &[k, c] => (k, c),
        s => {
            return Err(CfpError::Rank {
                op: "codebook codewords",
                expected: 2,
                shape: s.to_vec(),
            })
        }
    };
    if codes == 0 {
        return Err(CfpError::EmptyCodebook);
    }
    if dim != channels {
        return Err(CfpError::ChannelMismatch {
            op: "codebook_aggregate",
            expected: dim,
            got: channels,
        });
    }
    if scales.shape() != [codes] {
        return Err(CfpError::ShapeMismatch {
            op: "codebook scales",
            lhs: scales.shape().to_vec(),
            rhs: vec![codes],
        });
    }
    Ok(Dims {
        batch,
        channels,
        pixels: h * w,
        codes,
    })
}

/// Pixel `i` of sample `b` as a contiguous channel vector.
fn gather_pixel<T: Element>(xd: &[T], d: &Dims, b: usize, i: usize, buf: &mut [T]) {
    for (c, slot) in buf.iter_mut().enumerate() {
        *slot = xd[(b * d.channels + c) * d.pixels + i];
    }
}

/// Squared distances of one pixel to every codeword, written into `dist`.
fn distances<T: Element>(pixel: &[T], codewords: &[T], dist: &mut [T]) {
    let c = pixel.len();
    for (k, slot) in dist.iter_mut().enumerate() {
        let code = &codewords[k * c..][..c];
        *slot = pixel
            .iter()
            .zip(code)
            .fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q));
    }
}

/// In-place softmax of `-s_k * dist_k` over `k`.
fn assign<T: Element>(dist: &[T], scales: &[T], weights: &mut [T]) {
    let mut max = T::neg_infinity();
    for ((w, &dk), &sk) in weights.iter_mut().zip(dist).zip(scales) {
        *w = -(sk * dk);
        max = max.max(*w);
    }
    let mut total = T::zero();
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total = total + *w;
    }
    for w in weights.iter_mut() {
        *w = *w / total;
    }
}

/// Assignment weights `[B, N, K]` of every pixel to every codeword.
pub fn assignment_weights<T: Element>(x: &Tensor<T>, codewords: &Tensor<T>, scales: &Tensor<T>) -> Result<Tensor<T>> {
    let d = resolve(x, codewords, scales)?;
    let mut pixel = vec![T::zero(); d.channels];
    let mut dist = vec![T::zero(); d.codes];
    let mut out = vec![T::zero(); d.batch * d.pixels * d.codes];
    for b in 0..d.batch {
        for i in 0..d.pixels {
            gather_pixel(x.data(), &d, b, i, &mut pixel);
            distances(&pixel, codewords.data(), &mut dist);
            let row = &mut out[(b * d.pixels + i) * d.codes..][..d.codes];
            assign(&dist, scales.data(), row);
        }
    }
    Ok(Tensor::from_parts(vec![d.batch, d.pixels, d.codes], out))
}

/// Aggregated residuals `[B, K, C]` plus the assignment weights `[B, N, K]`.
pub fn codebook_aggregate<T: Element>(
    x: &Tensor<T>,
    codewords: &Tensor<T>,
    scales: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = resolve(x, codewords, scales)?;
    let weights = assignment_weights(x, codewords, scales)?;
    let (cd, wd) = (codewords.data(), weights.data());
    let mut pixel = vec![T::zero(); d.channels];
    let mut out = vec![T::zero(); d.batch * d.codes * d.channels];
    for b in 0..d.batch {
        for i in 0..d.pixels {
            gather_pixel(x.data(), &d, b, i, &mut pixel);
            for k in 0..d.codes {
                let a = wd[(b * d.pixels + i) * d.codes + k];
                let dst = &mut out[(b * d.codes + k) * d.channels..][..d.channels];
                let code = &cd[k * d.channels..][..d.channels];
                for ((o, &p), &q) in dst.iter_mut().zip(&pixel).zip(code) {
                    *o = *o + a * (p - q);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![d.batch, d.codes, d.channels], out),
        weights,
    ))
}

pub struct CodebookGrads<T> {
    pub input: Tensor<T>,
    pub codewords: Tensor<T>,
    pub scales: Tensor<T>,
}

pub fn codebook_aggregate_backward<T: Element>(
    x: &Tensor<T>,
    codewords: &Tensor<T>,
    scales: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<CodebookGrads<T>> {
    let d = resolve(x, codewords, scales)?;
    let (cd, sd, wd, gd) = (codewords.data(), scales.data(), weights.data(), grad_out.data());
    let c = d.channels;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gcode = vec![T::zero(); codewords.numel()];
    let mut gscale = vec![T::zero(); d.codes];
    let mut pixel = vec![T::zero(); c];
    let mut resid = vec![T::zero(); d.codes * c];
    let mut dist = vec![T::zero(); d.codes];
    let mut g_assign = vec![T::zero(); d.codes];
    let mut g_pixel = vec![T::zero(); c];
    for b in 0..d.batch {
        for i in 0..d.pixels {
            gather_pixel(x.data(), &d, b, i, &mut pixel);
            let a = &wd[(b * d.pixels + i) * d.codes..][..d.codes];
            for k in 0..d.codes {
                let r = &mut resid[k * c..][..c];
                let g = &gd[(b * d.codes + k) * c..][..c];
                let mut dot = T::zero();
                let mut sq = T::zero();
                for ch in 0..c {
                    r[ch] = pixel[ch] - cd[k * c + ch];
                    dot = dot + g[ch] * r[ch];
                    sq = sq + r[ch] * r[ch];
                }
                g_assign[k] = dot;
                dist[k] = sq;
            }
            // softmax VJP
            let mean = a.iter().zip(&g_assign).fold(T::zero(), |acc, (&ak, &gk)| acc + ak * gk);
            g_pixel.fill(T::zero());
            for k in 0..d.codes {
                let g_logit = a[k] * (g_assign[k] - mean);
                gscale[k] = gscale[k] - g_logit * dist[k];
                let coef = g_logit * T::lit(-2.0) * sd[k];
                let g = &gd[(b * d.codes + k) * c..][..c];
                let r = &resid[k * c..][..c];
                for ch in 0..c {
                    let g_r = a[k] * g[ch] + coef * r[ch];
                    g_pixel[ch] = g_pixel[ch] + g_r;
                    gcode[k * c + ch] = gcode[k * c + ch] - g_r;
                }
            }
            for ch in 0..c {
                let idx = (b * c + ch) * d.pixels + i;
                gx[idx] = gx[idx] + g_pixel[ch];
            }
        }
    }
    Ok(CodebookGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        codewords: Tensor::from_parts(codewords.shape().to_vec(), gcode),
        scales: Tensor::from_parts(vec![d.codes], gscale),
    })
}
