//! Naive 64-bit reference implementations and random instance builders.
#![allow(dead_code)]

use cfp_core::evc::{Codebook, EvcConfig, EvcParams};
use cfp_core::nn::{BatchNorm, ConvSpec, GroupNorm, Init, InitStyle, Linear};
use cfp_core::ops::{self, ConvGeometry};
use cfp_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randomized(seed: u64) -> Init {
    Init::new(rng(seed), InitStyle::Randomized)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng).unwrap()
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn max_abs_diff(actual: &Tensor, expected: &[f64]) -> f64 {
    assert_eq!(actual.numel(), expected.len(), "length mismatch");
    actual
        .data()
        .iter()
        .zip(expected)
        .map(|(&a, &e)| (f64::from(a) - e).abs())
        .fold(0.0, f64::max)
}

pub fn small_evc_config(in_channels: usize, channels: usize, codewords: usize) -> EvcConfig {
    EvcConfig {
        channels,
        codewords,
        ..EvcConfig::new(in_channels)
    }
}

pub fn evc_params(cfg: &EvcConfig, seed: u64, style: InitStyle) -> EvcParams {
    EvcParams::seeded(cfg, rng(seed), style).unwrap()
}

/// Direct grouped cross-correlation with zero padding.
pub fn conv2d_ref(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let xv = f64s(x);
    let wv = f64s(w);
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| f64::from(bb.data()[o]));
                    for icg in 0..cpg {
                        let ic = g * cpg + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * cpg + icg) * kh + ky) * kw + kx;
                                acc += xv[xi] * wv[wi];
                            }
                        }
                    }
                    out[((n * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// `y = x W^T + b` over the last axis.
pub fn linear_ref(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let xv = f64s(x);
    let wv = f64s(w);
    let mut out = Vec::new();
    for row in xv.chunks(din) {
        for o in 0..dout {
            let dot: f64 = (0..din).map(|i| row[i] * wv[o * din + i]).sum();
            out.push(dot + bias.map_or(0.0, |b| f64::from(b.data()[o])));
        }
    }
    out
}

pub fn group_norm_ref(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cpg = c / groups;
    let plane = h * w;
    let xv = f64s(x);
    let mut out = vec![0.0; xv.len()];
    for n in 0..b {
        for g in 0..groups {
            let start = (n * c + g * cpg) * plane;
            let vals = &xv[start..start + cpg * plane];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for (j, v) in vals.iter().enumerate() {
                let ch = g * cpg + j / plane;
                let norm = (v - mean) / (var + eps).sqrt();
                out[start + j] = norm * f64::from(gamma.data()[ch]) + f64::from(beta.data()[ch]);
            }
        }
    }
    out
}

pub fn batch_norm_ref(x: &Tensor, bn: &BatchNorm) -> Vec<f64> {
    let inner: usize = x.shape()[2..].iter().product();
    bn_apply(&f64s(x), x.shape()[1], inner, bn)
}

/// Inference batch norm over axis 1 of a row-major `[B, C, inner]` buffer.
pub fn bn_apply(vals: &[f64], c: usize, inner: usize, bn: &BatchNorm) -> Vec<f64> {
    vals.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / inner) % c;
            let m = f64::from(bn.running_mean.data()[ch]);
            let var = f64::from(bn.running_var.data()[ch]);
            let g = f64::from(bn.gamma.data()[ch]);
            let bt = f64::from(bn.beta.data()[ch]);
            (v - m) / (var + bn.eps).sqrt() * g + bt
        })
        .collect()
}

/// Per-pixel softmax assignment weights `[B, N, K]`.
pub fn assignment_ref(x: &Tensor, cb: &Codebook) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = h * w;
    let k = cb.codes();
    let xv = f64s(x);
    let bv = f64s(&cb.codewords);
    let sv = f64s(&cb.scales);
    let mut out = Vec::with_capacity(b * n * k);
    for s in 0..b {
        for i in 0..n {
            let logits: Vec<f64> = (0..k)
                .map(|kk| {
                    let d2: f64 = (0..c).map(|ch| (xv[(s * c + ch) * n + i] - bv[kk * c + ch]).powi(2)).sum();
                    -sv[kk] * d2
                })
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            out.extend(logits.iter().map(|l| l.exp() / denom));
        }
    }
    out
}

/// Per-codeword encodings `[B, K, C]`.
pub fn aggregate_ref(x: &Tensor, cb: &Codebook) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = h * w;
    let k = cb.codes();
    let xv = f64s(x);
    let bv = f64s(&cb.codewords);
    let a = assignment_ref(x, cb);
    let mut out = vec![0.0; b * k * c];
    for s in 0..b {
        for kk in 0..k {
            for ch in 0..c {
                out[(s * k + kk) * c + ch] = (0..n)
                    .map(|i| a[(s * n + i) * k + kk] * (xv[(s * c + ch) * n + i] - bv[kk * c + ch]))
                    .sum();
            }
        }
    }
    out
}

/// `mean_k relu(BN_k(e_k))`, shape `[B, C]`.
pub fn lvc_encode_ref(x: &Tensor, cb: &Codebook, bn: &BatchNorm) -> Vec<f64> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let k = cb.codes();
    let e = aggregate_ref(x, cb);
    let mut out = vec![0.0; b * c];
    for s in 0..b {
        for kk in 0..k {
            let m = f64::from(bn.running_mean.data()[kk]);
            let var = f64::from(bn.running_var.data()[kk]);
            let g = f64::from(bn.gamma.data()[kk]);
            let bt = f64::from(bn.beta.data()[kk]);
            for ch in 0..c {
                let v = (e[(s * k + kk) * c + ch] - m) / (var + bn.eps).sqrt() * g + bt;
                out[s * c + ch] += v.max(0.0) / k as f64;
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

/// Random conv instance with dims at most 8: `(x, spec)`.
pub fn random_conv(rng: &mut ChaCha8Rng, depthwise: bool) -> (Tensor, ConvSpec) {
    loop {
        let b = rng.gen_range(1..=2);
        let cin = rng.gen_range(1..=8);
        let groups = if depthwise {
            cin
        } else {
            *[1, 2, 4].iter().filter(|&&g| cin % g == 0).last().unwrap().min(&rng.gen_range(1..=4))
        };
        let groups = if cin % groups == 0 { groups } else { 1 };
        let cout = if depthwise { cin } else { groups * rng.gen_range(1..=8 / groups) };
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        if (h + 2 * pad) < k || (w + 2 * pad) < k {
            continue;
        }
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            continue;
        }
        let weight = rand_tensor(rng, &[cout, cin / groups, k, k]);
        let bias = rng.gen_bool(0.7).then(|| rand_tensor(rng, &[cout]));
        let x = rand_tensor(rng, &[b, cin, h, w]);
        return (
            x,
            ConvSpec {
                weight,
                bias,
                stride,
                padding: pad,
                groups,
            },
        );
    }
}

pub fn conv_check(x: &Tensor, c: &ConvSpec) -> f64 {
    let geo = ConvGeometry {
        stride: c.stride,
        padding: c.padding,
        groups: c.groups,
    };
    let y = ops::conv2d_forward(x, &c.weight, c.bias.as_ref(), geo).unwrap();
    max_abs_diff(&y, &conv2d_ref(x, &c.weight, c.bias.as_ref(), c.stride, c.padding, c.groups))
}

pub fn random_linear(rng: &mut ChaCha8Rng) -> (Tensor, Linear) {
    let din = rng.gen_range(1..=8);
    let dout = rng.gen_range(1..=8);
    let rows = rng.gen_range(1..=4);
    let lead = rng.gen_range(1..=3);
    let x = rand_tensor(rng, &[lead, rows, din]);
    let mut init = Init::new(rng.clone(), InitStyle::Randomized);
    let _ = rng.gen::<u64>();
    (x, Linear::new(&mut init, din, dout))
}

pub fn linear_check(x: &Tensor, l: &Linear) -> f64 {
    let y = ops::linear_forward(x, &l.weight, l.bias.as_ref()).unwrap();
    max_abs_diff(&y, &linear_ref(x, &l.weight, l.bias.as_ref()))
}

pub fn random_group_norm(rng: &mut ChaCha8Rng) -> (Tensor, GroupNorm) {
    let groups = rng.gen_range(1..=4);
    let c = groups * rng.gen_range(1..=8 / groups);
    let shape = [rng.gen_range(1..=2), c, rng.gen_range(1..=8), rng.gen_range(1..=8)];
    let x = Tensor::uniform(&shape, -3.0, 3.0, rng).unwrap();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(rng.gen()), InitStyle::Randomized);
    (x, GroupNorm::new(&mut init, c, groups, 1e-5).unwrap())
}

pub fn group_norm_check(x: &Tensor, gn: &GroupNorm) -> f64 {
    let (y, _) = ops::group_norm_forward(x, gn.groups, &gn.gamma, &gn.beta, gn.eps).unwrap();
    max_abs_diff(&y, &group_norm_ref(x, gn.groups, &gn.gamma, &gn.beta, gn.eps))
}

pub fn random_batch_norm(rng: &mut ChaCha8Rng) -> (Tensor, BatchNorm) {
    let c = rng.gen_range(1..=8);
    let shape = [rng.gen_range(1..=2), c, rng.gen_range(1..=8), rng.gen_range(1..=8)];
    let x = rand_tensor(rng, &shape);
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(rng.gen()), InitStyle::Randomized);
    (x, BatchNorm::new(&mut init, c, 1e-5))
}

pub fn batch_norm_check(x: &Tensor, bn: &BatchNorm) -> f64 {
    let y = ops::batch_norm_forward(x, &bn.running_mean, &bn.running_var, &bn.gamma, &bn.beta, bn.eps).unwrap();
    max_abs_diff(&y, &batch_norm_ref(x, bn))
}

pub fn random_lvc_encode(rng: &mut ChaCha8Rng) -> (Tensor, Codebook, BatchNorm) {
    let k = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=8);
    let shape = [rng.gen_range(1..=2), c, rng.gen_range(1..=8), rng.gen_range(1..=8)];
    let x = rand_tensor(rng, &shape);
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(rng.gen()), InitStyle::Randomized);
    let cb = Codebook::new(&mut init, k, c).unwrap();
    (x, cb, BatchNorm::new(&mut init, k, 1e-5))
}

pub fn lvc_encode_check(x: &Tensor, cb: &Codebook, bn: &BatchNorm) -> f64 {
    let mut g = cfp_core::Eval::<f32>::new();
    let e = cfp_core::evc::lvc_encode(&mut g, "lvc", x, cb, bn).unwrap();
    max_abs_diff(&e, &lvc_encode_ref(x, cb, bn))
}

pub fn conv_bn_act_ref(x: &Tensor, p: &cfp_core::nn::ConvBnAct) -> Vec<f64> {
    let c = &p.conv;
    let y = conv2d_ref(x, &c.weight, c.bias.as_ref(), c.stride, c.padding, c.groups);
    let inner = y.len() / (x.shape()[0] * c.out_channels());
    bn_apply(&y, c.out_channels(), inner, &p.bn)
        .into_iter()
        .map(|v| match p.activation {
            ops::Activation::Relu => v.max(0.0),
            ops::Activation::Silu => silu(v),
            ops::Activation::Sigmoid => sigmoid(v),
        })
        .collect()
}

/// `x + scale2 * fc2(silu(fc1(GN(x))))` evaluated pixel by pixel.
pub fn channel_mlp_ref(x: &Tensor, p: &cfp_core::evc::MlpBlockParams) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = h * w;
    let normed = group_norm_ref(x, p.gn2.groups, &p.gn2.gamma, &p.gn2.beta, p.gn2.eps);
    let w1 = f64s(&p.fc1.weight);
    let b1 = f64s(p.fc1.bias.as_ref().unwrap());
    let w2 = f64s(&p.fc2.weight);
    let b2 = f64s(p.fc2.bias.as_ref().unwrap());
    let hidden = b1.len();
    let xv = f64s(x);
    let mut out = xv.clone();
    for s in 0..b {
        for i in 0..n {
            let v: Vec<f64> = (0..c).map(|ch| normed[(s * c + ch) * n + i]).collect();
            let hdn: Vec<f64> = (0..hidden)
                .map(|j| silu((0..c).map(|ch| w1[j * c + ch] * v[ch]).sum::<f64>() + b1[j]))
                .collect();
            for ch in 0..c {
                let o = (0..hidden).map(|j| w2[ch * hidden + j] * hdn[j]).sum::<f64>() + b2[ch];
                out[(s * c + ch) * n + i] += f64::from(p.scale2.data()[ch]) * o;
            }
        }
    }
    out
}

/// End-to-end LVC branch by brute force. Stage outputs are rounded to f32
/// between the convolution stages, as the kernels store them.
pub fn lvc_forward_ref(x: &Tensor, p: &cfp_core::evc::LvcParams) -> Vec<f64> {
    let shape = x.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let mut y = x.clone();
    for block in p.conv_block.iter().chain(std::iter::once(&p.cbr)) {
        y = to_tensor(&shape, &conv_bn_act_ref(&y, block));
    }
    let e = lvc_encode_ref(&y, &p.codebook, &p.phi_bn);
    let f = linear_ref(&to_tensor(&[b, c], &e), &p.fc.weight, p.fc.bias.as_ref());
    let g = conv2d_ref(&to_tensor(&[b, c, 1, 1], &f), &p.proj.weight, p.proj.bias.as_ref(), 1, 0, 1);
    let plane = shape[2] * shape[3];
    f64s(x)
        .iter()
        .enumerate()
        .map(|(i, &v)| v + v * sigmoid(g[i / plane]))
        .collect()
}

/// Largest `|sum_k a_ik - 1|` over pixels, and whether `K = 1` rows are
/// exactly one, for random instances with `K` codewords.
pub fn assignment_row_error(codes: usize, instances: u64, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..instances {
        let c = r.gen_range(1..=8);
        let shape = [r.gen_range(1..=2), c, r.gen_range(1..=8), r.gen_range(1..=8)];
        let x = Tensor::uniform(&shape, -2.0, 2.0, &mut r).unwrap();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(r.gen()), InitStyle::Randomized);
        let cb = Codebook::new(&mut init, codes, c).unwrap();
        let a = ops::assignment_weights(&x, &cb.codewords, &cb.scales).unwrap();
        for row in a.data().chunks(codes) {
            let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
            worst = worst.max((total - 1.0).abs());
            if codes == 1 && row[0] != 1.0 {
                exact = false;
            }
        }
    }
    (worst, exact)
}

/// `max |e - e_perm|` under a joint permutation of codewords, smoothing
/// factors and the per-codeword batch-norm channels.
pub fn codebook_permutation_gap(seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let (k, c) = (r.gen_range(2..=6), r.gen_range(1..=8));
    let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
    let x = rand_tensor(&mut r, &[2, c, h, w]);
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(r.gen()), InitStyle::Randomized);
    let cb = Codebook::new(&mut init, k, c).unwrap();
    let bn = BatchNorm::new(&mut init, k, 1e-5);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut r);
    let rows = |t: &Tensor, width: usize| {
        let mut v = Vec::with_capacity(t.numel());
        for &p in &perm {
            v.extend_from_slice(&t.data()[p * width..(p + 1) * width]);
        }
        Tensor::new(t.shape().to_vec(), v).unwrap()
    };
    let cb_p = Codebook::from_parts(rows(&cb.codewords, c), rows(&cb.scales, 1)).unwrap();
    let bn_p = BatchNorm {
        running_mean: rows(&bn.running_mean, 1),
        running_var: rows(&bn.running_var, 1),
        gamma: rows(&bn.gamma, 1),
        beta: rows(&bn.beta, 1),
        eps: bn.eps,
    };
    let mut g = cfp_core::Eval::<f32>::new();
    let e = cfp_core::evc::lvc_encode(&mut g, "lvc", &x, &cb, &bn).unwrap();
    let e_p = cfp_core::evc::lvc_encode(&mut g, "lvc", &x, &cb_p, &bn_p).unwrap();
    e.max_abs_diff(&e_p).unwrap()
}

/// `max |MLP(x) - x|` with both channel scales zeroed, on a random block.
pub fn zero_scale_identity_gap(seed: u64) -> f64 {
    let cfg = small_evc_config(4, 8, 4);
    let mut p = evc_params(&cfg, seed, InitStyle::Randomized).mlp;
    p.scale1 = Tensor::zeros(&[8]).unwrap();
    p.scale2 = Tensor::zeros(&[8]).unwrap();
    let x = rand_tensor(&mut rng(seed + 1), &[2, 8, 5, 5]);
    let mut g = cfp_core::Eval::<f32>::new();
    let y = cfp_core::evc::lightweight_mlp_forward(&mut g, "mlp", &x, &p).unwrap();
    y.max_abs_diff(&x).unwrap()
}

/// Closes the LVC gate with a strongly negative projection bias. Returns
/// `(largest gate value, max |LVC(x) - x|)`.
pub fn closed_gate_gap(seed: u64) -> (f64, f64) {
    let cfg = small_evc_config(4, 8, 4);
    let mut p = evc_params(&cfg, seed, InitStyle::Randomized).lvc;
    p.fc.weight = Tensor::zeros(p.fc.weight.shape()).unwrap();
    p.fc.bias = Some(Tensor::zeros(&[8]).unwrap());
    p.proj.weight = Tensor::zeros(p.proj.weight.shape()).unwrap();
    p.proj.bias = Some(Tensor::full(&[8], -20.0).unwrap());
    let x = Tensor::uniform(&[2, 8, 5, 5], -3.0, 3.0, &mut rng(seed + 1)).unwrap();
    let mut g = cfp_core::Eval::<f32>::new();
    let y = cfp_core::evc::lvc_forward(&mut g, "lvc", &x, &p).unwrap();
    let mut g = cfp_core::Eval::<f32>::new();
    let e = Tensor::zeros(&[2, 8]).unwrap();
    let w = cfp_core::evc::lvc_gate(&mut g, "lvc", &e, &p).unwrap();
    let w_max = w.data().iter().fold(0.0f64, |m, &v| m.max(f64::from(v)));
    (w_max, y.max_abs_diff(&x).unwrap())
}

/// Monte-Carlo view of stochastic depth on the depthwise residual branch.
pub struct DropPathStats {
    pub rate: f64,
    pub trials: usize,
    /// Summed branch contribution in eval mode.
    pub eval: f64,
    /// Mean kept contribution before the `1 / (1 - p)` rescale, and its z-score
    /// against `(1 - p) * eval`.
    pub raw_mean: f64,
    pub raw_z: f64,
    /// Mean rescaled contribution and its z-score against `eval`.
    pub rescaled_mean: f64,
    pub rescaled_z: f64,
}

pub fn droppath_stats(rate: f64, trials: usize, seed: u64) -> DropPathStats {
    use cfp_core::{Eval, Mode};
    let cfg = small_evc_config(4, 4, 2);
    let mut p = evc_params(&cfg, seed, InitStyle::Randomized).mlp;
    p.droppath1 = rate;
    let x = rand_tensor(&mut rng(seed + 1), &[1, 4, 3, 3]);
    let contribution = |y: &Tensor| y.data().iter().zip(x.data()).map(|(&a, &b)| f64::from(a) - f64::from(b)).sum::<f64>();
    let mut g = Eval::<f32>::new();
    let eval = contribution(&cfp_core::evc::dconv_block_forward(&mut g, "mlp", &x, &p).unwrap());
    let mut g = Eval::<f32>::with_mode(Mode::Train(rng(seed + 2)));
    let samples: Vec<f64> = (0..trials)
        .map(|_| contribution(&cfp_core::evc::dconv_block_forward(&mut g, "mlp", &x, &p).unwrap()))
        .collect();
    let z = |values: &[f64], target: f64| {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (mean - target) / (var / n).sqrt())
    };
    let (rescaled_mean, rescaled_z) = z(&samples, eval);
    let raw: Vec<f64> = samples.iter().map(|v| v * (1.0 - rate)).collect();
    let (raw_mean, raw_z) = z(&raw, (1.0 - rate) * eval);
    DropPathStats {
        rate,
        trials,
        eval,
        raw_mean,
        raw_z,
        rescaled_mean,
        rescaled_z,
    }
}

/// Default-config pyramid with channels `(256, 512, 1024)` at sizes
/// `(32, 16, 8)`, levels 2 to 4.
pub fn default_pyramid(seed: u64) -> cfp_core::gcr::Pyramid {
    let mut r = rng(seed);
    let tensors = [(256, 32), (512, 16), (1024, 8)]
        .iter()
        .map(|&(c, s)| rand_tensor(&mut r, &[1, c, s, s]))
        .collect();
    cfp_core::gcr::Pyramid::from_deepest_last(tensors).unwrap()
}

pub fn default_cfp_params(gcr: &cfp_core::gcr::GcrConfig, seed: u64) -> cfp_core::gcr::CfpParams {
    cfp_core::gcr::CfpParams::seeded(
        &EvcConfig::new(1024),
        gcr,
        &[(2, 256), (3, 512), (4, 1024)],
        rng(seed),
        InitStyle::Default,
    )
    .unwrap()
}

pub struct ShapeContract {
    /// `(level, output shape)` under the default wiring.
    pub shapes: Vec<(usize, Vec<usize>)>,
    pub sizes_preserved: bool,
    pub all_stem_width: bool,
    /// With nothing regulated, levels 2 and 3 come back bit-identical.
    pub empty_set_passthrough: bool,
    pub empty_set_deepest_changed: bool,
}

pub fn gcr_shape_contract(seed: u64) -> ShapeContract {
    use cfp_core::gcr::{cfp_forward, GcrConfig};
    let input = default_pyramid(seed);
    let cfg = GcrConfig::default();
    let out = cfp_forward(&input, &default_cfp_params(&cfg, seed + 1), &cfg).unwrap();
    let shapes: Vec<(usize, Vec<usize>)> = out.levels().iter().map(|l| (l.index, l.tensor.shape().to_vec())).collect();
    let sizes_preserved = out
        .levels()
        .iter()
        .zip(input.levels())
        .all(|(o, i)| o.index == i.index && o.tensor.shape()[2..] == i.tensor.shape()[2..]);
    let all_stem_width = out.levels().iter().all(|l| l.tensor.shape()[1] == 256);

    let empty = GcrConfig {
        regulated_levels: Vec::new(),
        ..GcrConfig::default()
    };
    let out = cfp_forward(&input, &default_cfp_params(&empty, seed + 1), &empty).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let empty_set_passthrough = [2, 3].iter().all(|&l| {
        let (a, b) = (out.get(l).unwrap(), input.get(l).unwrap());
        a.shape() == b.shape() && bits(a) == bits(b)
    });
    let empty_set_deepest_changed = out.get(4).unwrap().shape() == [1, 256, 8, 8];
    ShapeContract {
        shapes,
        sizes_preserved,
        all_stem_width,
        empty_set_passthrough,
        empty_set_deepest_changed,
    }
}

/// Closed-form trainable parameter count of one EVC block.
pub fn evc_params_formula(cin: u64, c: u64, expansion: u64, codes: u64, dconv_k: u64) -> u64 {
    let conv = |i: u64, o: u64, k: u64| o * i * k * k + o;
    let bn = |ch: u64| 2 * ch;
    let stem = conv(cin, c, 7) + bn(c);
    let hidden = expansion * c;
    let mlp = bn(c) + (c * dconv_k * dconv_k + c) + c + bn(c) + (c * hidden + hidden) + (hidden * c + c) + c;
    let lvc = 2 * (conv(c, c, 1) + bn(c)) + 2 * (conv(c, c, 3) + bn(c)) + (codes * c + codes) + bn(codes) + (c * c + c) + conv(c, c, 1);
    stem + mlp + lvc + conv(2 * c, c, 1)
}

/// Closed-form FLOPs of one EVC block on `[b, cin, h, w]` under the
/// documented per-element constants.
pub fn evc_flops_formula(b: u64, cin: u64, c: u64, h: u64, w: u64, expansion: u64, codes: u64, dconv_k: u64) -> u64 {
    let n = h * w;
    let p = b * n;
    let conv = |i: u64, o: u64, k: u64| 2 * p * o * i * k * k + p * o;
    let hidden = expansion * c;
    let stem = conv(cin, c, 7) + 2 * p * c + p * c;
    let mlp = 8 * p * c
        + (2 * p * c * dconv_k * dconv_k + p * c)
        + 2 * p * c
        + 8 * p * c
        + (2 * p * c * hidden + p * hidden)
        + 5 * p * hidden
        + (2 * p * hidden * c + p * c)
        + 2 * p * c;
    let cbr = |k: u64| conv(c, c, k) + 2 * p * c + p * c;
    let encode = b * (4 * n * codes * c + n * codes);
    let phi = 2 * b * codes * c + b * codes * c + b * codes * c;
    let gate = (2 * b * c * c + b * c) + (2 * b * c * c + b * c) + 4 * b * c;
    let lvc = cbr(1) + cbr(3) + cbr(1) + cbr(3) + encode + phi + gate + 2 * p * c;
    stem + mlp + lvc + conv(2 * c, c, 1)
}

/// `(label, closed form, reported)` for a set of hand-checkable configurations.
pub fn cost_hand_checks() -> Vec<(String, u64, u64)> {
    use cfp_core::analysis::{count_flops, count_params};
    use cfp_core::nn::{ConvBnAct, ConvSpec, GroupNorm, Linear};
    let mut init = randomized(0);
    let mut out = Vec::new();
    let mut check = |label: &str, expected: u64, got: u64| out.push((label.to_owned(), expected, got));

    let stem = ConvSpec::same(&mut init, 64, 256, 7, 1, true).unwrap();
    check("stem conv 7x7 64->256 params", 803_072, count_params(&stem, "stem").params);
    check(
        "stem conv 7x7 64->256 flops at 8x8",
        2 * 64 * 256 * 64 * 49 + 64 * 256,
        count_flops(&stem, "stem", &[1, 64, 8, 8]).unwrap().flops,
    );
    let cb = Codebook::new(&mut init, 64, 256).unwrap();
    check("codebook K=64 C=256 params", 16_448, count_params(&cb, "codebook").params);
    let unit = ConvSpec::same(&mut init, 1, 1, 1, 1, true).unwrap();
    check("1x1 conv flops", 3, count_flops(&unit, "c", &[1, 1, 1, 1]).unwrap().flops);
    let fc = Linear::new(&mut init, 256, 1024);
    check("linear 256->1024 params", 263_168, count_params(&fc, "fc").params);
    check(
        "linear 256->1024 flops over 3x5 rows",
        15 * (2 * 256 * 1024 + 1024),
        count_flops(&fc, "fc", &[3, 5, 256]).unwrap().flops,
    );
    let dw = ConvSpec::same(&mut init, 32, 32, 3, 32, false).unwrap();
    check("depthwise 3x3 C=32 params", 288, count_params(&dw, "dw").params);
    check(
        "depthwise 3x3 C=32 flops at 2x16x16",
        2 * 512 * 32 * 9,
        count_flops(&dw, "dw", &[2, 32, 16, 16]).unwrap().flops,
    );
    let gn = GroupNorm::new(&mut init, 64, 32, 1e-5).unwrap();
    check("group_norm C=64 params", 128, count_params(&gn, "gn").params);
    check("group_norm flops at 1x64x4x4", 8 * 1024, count_flops(&gn, "gn", &[1, 64, 4, 4]).unwrap().flops);
    let cba = ConvBnAct::new(&mut init, 16, 8, 3, 1e-5).unwrap();
    let r = count_flops(&cba, "cbr", &[1, 16, 5, 5]).unwrap();
    check("conv-bn-relu 3x3 16->8 params", 8 * 16 * 9 + 8 + 16, r.params);
    check("conv-bn-relu 3x3 16->8 statistics", 16, r.statistics);
    check("conv-bn-relu 3x3 16->8 flops at 5x5", 2 * 25 * 8 * 16 * 9 + 25 * 8 + 3 * 25 * 8, r.flops);

    for &(cin, c, e, k, dk, b, h, w) in &[
        (1024u64, 256u64, 4u64, 64u64, 1u64, 1u64, 20u64, 20u64),
        (64, 16, 2, 4, 3, 2, 6, 5),
        (8, 8, 4, 1, 1, 3, 4, 4),
    ] {
        let cfg = EvcConfig {
            channels: c as usize,
            mlp_expansion: e as usize,
            codewords: k as usize,
            dconv_kernel: dk as usize,
            ..EvcConfig::new(cin as usize)
        };
        let p = EvcParams::new(&mut init, &cfg).unwrap();
        let label = format!("evc in={cin} C={c} e={e} K={k} dconv={dk}");
        check(&format!("{label} params"), evc_params_formula(cin, c, e, k, dk), count_params(&p, "evc").params);
        let shape = [b as usize, cin as usize, h as usize, w as usize];
        check(
            &format!("{label} flops at {shape:?}"),
            evc_flops_formula(b, cin, c, h, w, e, k, dk),
            count_flops(&p, "evc", &shape).unwrap().flops,
        );
    }
    out
}
