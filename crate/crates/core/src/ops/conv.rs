//! Grouped 2-D cross-correlation with zero padding.
//!
//! Depthwise convolution is the `groups == in_channels == out_channels` case.

use crate::error::{CfpError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        ConvGeometry {
            groups: channels,
            ..Self::same(kernel)
        }
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.geo.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.geo.groups
    }
}

pub fn output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    let err = CfpError::NonIntegralOutput {
        input,
        kernel,
        stride,
        padding,
    };
    if stride == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return Err(err);
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn resolve<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<ConvDims> {
    let (batch, in_ch, h, w) = x.dims4("conv2d")?;
    let (out_ch, in_per_group, kh, kw) = weight.dims4("conv2d weight")?;
    if geo.groups == 0 || in_ch % geo.groups != 0 || out_ch % geo.groups != 0 {
        return Err(CfpError::Groups {
            op: "conv2d",
            channels: in_ch,
            groups: geo.groups,
        });
    }
    if in_per_group * geo.groups != in_ch {
        return Err(CfpError::ChannelMismatch {
            op: "conv2d",
            expected: in_per_group * geo.groups,
            got: in_ch,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(CfpError::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![out_ch],
            });
        }
    }
    let oh = output_size(h, kh, geo.stride, geo.padding)?;
    let ow = output_size(w, kw, geo.stride, geo.padding)?;
    Ok(ConvDims {
        batch,
        in_ch,
        out_ch,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        geo,
    })
}

/// Output indices `o` for which `o * stride + k - pad` lands inside `0..input`.
#[inline]
fn valid_outputs(out_len: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o*stride + k - pad <= input - 1
    let hi = if input + pad > k {
        ((input - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = resolve(x, weight, bias, geo)?;
    if !x.all_finite() {
        return Err(CfpError::NonFinite("conv2d input"));
    }
    let xd = x.data();
    let wd = weight.data();
    let (s, p) = (geo.stride, geo.padding);
    let out_plane = d.oh * d.ow;
    let mut out = vec![T::zero(); d.batch * d.out_ch * out_plane];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let g = o / d.out_per_group();
            let dst = &mut out[(b * d.out_ch + o) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                dst.fill(bias.data()[o]);
            }
            for icg in 0..d.in_per_group() {
                let ic = g * d.in_per_group() + icg;
                let src = &xd[(b * d.in_ch + ic) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_outputs(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let wv = wd[((o * d.in_per_group() + icg) * d.kh + ky) * d.kw + kx];
                        let (ox0, ox1) = valid_outputs(d.ow, d.w, kx, s, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = &src[iy * d.w..][..d.w];
                            let drow = &mut dst[oy * d.ow..][..d.ow];
                            for ox in ox0..ox1 {
                                drow[ox] = drow[ox] + wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.batch, d.out_ch, d.oh, d.ow], out))
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let d = resolve(x, weight, None, geo)?;
    let (s, p) = (geo.stride, geo.padding);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let out_plane = d.oh * d.ow;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); d.out_ch];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let g = o / d.out_per_group();
            let gplane = &gd[(b * d.out_ch + o) * out_plane..][..out_plane];
            if has_bias {
                gb[o] = gplane.iter().fold(gb[o], |acc, &v| acc + v);
            }
            for icg in 0..d.in_per_group() {
                let ic = g * d.in_per_group() + icg;
                let base = (b * d.in_ch + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_outputs(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let widx = ((o * d.in_per_group() + icg) * d.kh + ky) * d.kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = valid_outputs(d.ow, d.w, kx, s, p);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let row = base + iy * d.w;
                            for ox in ox0..ox1 {
                                let ix = row + ox * s + kx - p;
                                let gv = gplane[oy * d.ow + ox];
                                acc = acc + gv * xd[ix];
                                gx[ix] = gx[ix] + gv * wv;
                            }
                        }
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        bias: has_bias.then(|| Tensor::from_parts(vec![d.out_ch], gb)),
    })
}
