//! Explicit visual center: a stem, then a lightweight MLP branch and a
//! learnable visual center (LVC) branch run in parallel on the stem output,
//! concatenated along channels and projected back to the stem width.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CfpError, Result};
use crate::graph::{Eval, Graph};
use crate::nn::{join, BatchNorm, ConvBnAct, ConvSpec, GroupNorm, Init, InitStyle, Linear, Module, ParamKind};
use crate::ops::{Activation, DEFAULT_EPS};
use crate::tensor::Tensor;

/// Structural hyper-parameters of one EVC block.
#[derive(Clone, Debug, PartialEq)]
pub struct EvcConfig {
    pub in_channels: usize,
    /// Stem width `C`; both branches and the fused output carry `C` channels.
    pub channels: usize,
    pub mlp_expansion: usize,
    pub dconv_kernel: usize,
    /// Upper bound on group-norm groups; the block uses `min(this, C)`.
    pub groupnorm_groups: usize,
    pub codewords: usize,
    pub droppath: f64,
    pub eps: f64,
}

impl EvcConfig {
    pub fn new(in_channels: usize) -> Self {
        EvcConfig {
            in_channels,
            channels: 256,
            mlp_expansion: 4,
            dconv_kernel: 1,
            groupnorm_groups: 32,
            codewords: 64,
            droppath: 0.0,
            eps: DEFAULT_EPS,
        }
    }

    pub fn effective_groups(&self) -> usize {
        self.groupnorm_groups.min(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CfpError::InvalidArgument(msg));
        if self.in_channels == 0 || self.channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.codewords == 0 {
            return Err(CfpError::EmptyCodebook);
        }
        if self.mlp_expansion == 0 {
            return bad("mlp expansion must be positive".into());
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return bad(format!("droppath rate {} outside [0, 1)", self.droppath));
        }
        let groups = self.effective_groups();
        if groups == 0 || self.channels % groups != 0 {
            return Err(CfpError::Groups {
                op: "evc group_norm",
                channels: self.channels,
                groups,
            });
        }
        Ok(())
    }
}

/// 7x7 convolution + batch norm + ReLU smoothing the deepest feature map.
pub type StemParams = ConvBnAct;

pub fn stem_new(init: &mut Init, in_channels: usize, channels: usize, eps: f64) -> Result<StemParams> {
    ConvBnAct::new(init, in_channels, channels, 7, eps)
}

pub fn stem_forward<G: Graph>(g: &mut G, name: &str, x: &G::Value, p: &StemParams) -> Result<G::Value> {
    p.forward(g, name, x)
}

/// Per-sample keep-and-rescale factors: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn droppath_factors(rng: &mut ChaCha8Rng, batch: usize, rate: f64) -> Vec<f64> {
    (0..batch)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
        .collect()
}

/// Stochastic depth on a residual branch. Identity in eval mode.
pub fn droppath<G: Graph>(g: &mut G, branch: &G::Value, rate: f64) -> Result<G::Value> {
    if rate <= 0.0 {
        return Ok(branch.clone());
    }
    let batch = g.shape(branch)[0];
    match g.train_rng() {
        Some(rng) => {
            let factors = droppath_factors(rng, batch, rate);
            g.scale_samples(branch, &factors)
        }
        None => Ok(branch.clone()),
    }
}

/// Depthwise-convolution residual module followed by the channel-MLP residual
/// module, each with layer scaling and droppath on its branch.
#[derive(Clone, Debug)]
pub struct MlpBlockParams {
    pub gn1: GroupNorm,
    pub dconv: ConvSpec,
    pub scale1: Tensor,
    pub droppath1: f64,
    pub gn2: GroupNorm,
    pub fc1: Linear,
    pub hidden_activation: Activation,
    pub fc2: Linear,
    pub scale2: Tensor,
    pub droppath2: f64,
}

impl MlpBlockParams {
    pub fn new(init: &mut Init, cfg: &EvcConfig) -> Result<Self> {
        let c = cfg.channels;
        let groups = cfg.effective_groups();
        let hidden = c * cfg.mlp_expansion;
        Ok(MlpBlockParams {
            gn1: GroupNorm::new(init, c, groups, cfg.eps)?,
            dconv: ConvSpec::same(init, c, c, cfg.dconv_kernel, c, true)?,
            scale1: init.styled(&[c], 1e-6, 0.5, 1.5),
            droppath1: cfg.droppath,
            gn2: GroupNorm::new(init, c, groups, cfg.eps)?,
            fc1: Linear::new(init, c, hidden),
            hidden_activation: Activation::Silu,
            fc2: Linear::new(init, hidden, c),
            scale2: init.styled(&[c], 1e-6, 0.5, 1.5),
            droppath2: cfg.droppath,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale1.numel()
    }
}

impl Module for MlpBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.gn1.visit(&join(prefix, "gn1"), f);
        self.dconv.visit(&join(prefix, "dconv"), f);
        f(&join(prefix, "scale1"), ParamKind::Trainable, &self.scale1);
        self.gn2.visit(&join(prefix, "gn2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        f(&join(prefix, "scale2"), ParamKind::Trainable, &self.scale2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.gn1.visit_mut(&join(prefix, "gn1"), f);
        self.dconv.visit_mut(&join(prefix, "dconv"), f);
        f(&join(prefix, "scale1"), ParamKind::Trainable, &mut self.scale1);
        self.gn2.visit_mut(&join(prefix, "gn2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        f(&join(prefix, "scale2"), ParamKind::Trainable, &mut self.scale2);
    }
}

/// `x + droppath(scale1 * DConv(GN(x)))`.
pub fn dconv_block_forward<G: Graph>(g: &mut G, name: &str, x: &G::Value, p: &MlpBlockParams) -> Result<G::Value> {
    let y = p.gn1.forward(g, &join(name, "gn1"), x)?;
    let y = p.dconv.forward(g, &join(name, "dconv"), &y)?;
    let scale = g.leaf(&join(name, "scale1"), &p.scale1)?;
    let y = g.channel_mul(&y, &scale)?;
    let y = droppath(g, &y, p.droppath1)?;
    g.add(x, &y)
}

/// `x + droppath(scale2 * CMLP(GN(x)))` where the channel MLP runs
/// independently at every spatial position.
pub fn channel_mlp_block_forward<G: Graph>(
    g: &mut G,
    name: &str,
    x: &G::Value,
    p: &MlpBlockParams,
) -> Result<G::Value> {
    let y = p.gn2.forward(g, &join(name, "gn2"), x)?;
    let y = g.to_channels_last(&y)?;
    let y = p.fc1.forward(g, &join(name, "fc1"), &y)?;
    let y = g.activation(&y, p.hidden_activation)?;
    let y = p.fc2.forward(g, &join(name, "fc2"), &y)?;
    let y = g.to_channels_first(&y)?;
    let scale = g.leaf(&join(name, "scale2"), &p.scale2)?;
    let y = g.channel_mul(&y, &scale)?;
    let y = droppath(g, &y, p.droppath2)?;
    g.add(x, &y)
}

pub fn lightweight_mlp_forward<G: Graph>(
    g: &mut G,
    name: &str,
    x: &G::Value,
    p: &MlpBlockParams,
) -> Result<G::Value> {
    let y = dconv_block_forward(g, name, x, p)?;
    channel_mlp_block_forward(g, name, &y, p)
}

/// `K` codewords of dimension `C` with one smoothing factor each.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub codewords: Tensor,
    pub scales: Tensor,
}

impl Codebook {
    pub fn new(init: &mut Init, codes: usize, channels: usize) -> Result<Self> {
        if codes == 0 {
            return Err(CfpError::EmptyCodebook);
        }
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Codebook {
            codewords: init.uniform(&[codes, channels], bound),
            scales: init.styled(&[codes], 1.0, 0.5, 1.5),
        })
    }

    pub fn from_parts(codewords: Tensor, scales: Tensor) -> Result<Self> {
        match codewords.shape() {
            &[k, _] if scales.shape() == [k] => Ok(Codebook { codewords, scales }),
            _ => Err(CfpError::ShapeMismatch {
                op: "codebook",
                lhs: codewords.shape().to_vec(),
                rhs: scales.shape().to_vec(),
            }),
        }
    }

    pub fn codes(&self) -> usize {
        self.codewords.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codewords.shape()[1]
    }
}

impl Module for Codebook {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "codewords"), ParamKind::Trainable, &self.codewords);
        f(&join(prefix, "scales"), ParamKind::Trainable, &self.scales);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "codewords"), ParamKind::Trainable, &mut self.codewords);
        f(&join(prefix, "scales"), ParamKind::Trainable, &mut self.scales);
    }
}

#[derive(Clone, Debug)]
pub struct LvcParams {
    /// 1x1, 3x3, 1x1 convolutions, each with batch norm and ReLU.
    pub conv_block: [ConvBnAct; 3],
    /// 3x3 convolution + batch norm + ReLU.
    pub cbr: ConvBnAct,
    pub codebook: Codebook,
    /// Batch norm over the codeword axis of the `[B, K, C]` encodings.
    pub phi_bn: BatchNorm,
    pub fc: Linear,
    pub proj: ConvSpec,
}

impl LvcParams {
    pub fn new(init: &mut Init, cfg: &EvcConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(LvcParams {
            conv_block: [
                ConvBnAct::new(init, c, c, 1, cfg.eps)?,
                ConvBnAct::new(init, c, c, 3, cfg.eps)?,
                ConvBnAct::new(init, c, c, 1, cfg.eps)?,
            ],
            cbr: ConvBnAct::new(init, c, c, 3, cfg.eps)?,
            codebook: Codebook::new(init, cfg.codewords, c)?,
            phi_bn: BatchNorm::new(init, cfg.codewords, cfg.eps),
            fc: Linear::new(init, c, c),
            proj: ConvSpec::same(init, c, c, 1, 1, true)?,
        })
    }
}

impl Module for LvcParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (i, block) in self.conv_block.iter().enumerate() {
            block.visit(&join(prefix, &format!("conv_block.{i}")), f);
        }
        self.cbr.visit(&join(prefix, "cbr"), f);
        self.codebook.visit(&join(prefix, "codebook"), f);
        self.phi_bn.visit(&join(prefix, "phi_bn"), f);
        self.fc.visit(&join(prefix, "fc"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (i, block) in self.conv_block.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("conv_block.{i}")), f);
        }
        self.cbr.visit_mut(&join(prefix, "cbr"), f);
        self.codebook.visit_mut(&join(prefix, "codebook"), f);
        self.phi_bn.visit_mut(&join(prefix, "phi_bn"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Encodes `[B, C, H, W]` features into one `[B, C]` descriptor:
/// per-codeword soft-assigned residual sums, then batch norm over the
/// codeword axis, ReLU, and the mean over codewords.
pub fn lvc_encode<G: Graph>(
    g: &mut G,
    name: &str,
    x: &G::Value,
    codebook: &Codebook,
    phi_bn: &BatchNorm,
) -> Result<G::Value> {
    let codewords = g.leaf(&join(name, "codebook.codewords"), &codebook.codewords)?;
    let scales = g.leaf(&join(name, "codebook.scales"), &codebook.scales)?;
    let per_code = g.codebook_aggregate(x, &codewords, &scales)?;
    let y = phi_bn.forward(g, &join(name, "phi_bn"), &per_code)?;
    let y = g.activation(&y, Activation::Relu)?;
    g.mean_axis(&y, 1)
}

/// Channel gate `sigmoid(proj(fc(e)))` shaped `[B, C, 1, 1]`.
pub fn lvc_gate<G: Graph>(g: &mut G, name: &str, e: &G::Value, p: &LvcParams) -> Result<G::Value> {
    let shape = g.shape(e);
    let f = p.fc.forward(g, &join(name, "fc"), e)?;
    let f = g.reshape(&f, &[shape[0], shape[1], 1, 1])?;
    let f = p.proj.forward(g, &join(name, "proj"), &f)?;
    g.activation(&f, Activation::Sigmoid)
}

/// `x + x * gate(encode(CBR(ConvBlock(x))))`.
pub fn lvc_forward<G: Graph>(g: &mut G, name: &str, x: &G::Value, p: &LvcParams) -> Result<G::Value> {
    let mut y = x.clone();
    for (i, block) in p.conv_block.iter().enumerate() {
        y = block.forward(g, &join(name, &format!("conv_block.{i}")), &y)?;
    }
    let y = p.cbr.forward(g, &join(name, "cbr"), &y)?;
    let e = lvc_encode(g, name, &y, &p.codebook, &p.phi_bn)?;
    let w = lvc_gate(g, name, &e, p)?;
    let z = g.channel_mul(x, &w)?;
    g.add(x, &z)
}

#[derive(Clone, Debug)]
pub struct EvcParams {
    pub stem: StemParams,
    pub mlp: MlpBlockParams,
    pub lvc: LvcParams,
    /// 1x1 projection of the `2C` concatenation back to `C`.
    pub fuse_proj: ConvSpec,
}

impl EvcParams {
    pub fn new(init: &mut Init, cfg: &EvcConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(EvcParams {
            stem: stem_new(init, cfg.in_channels, c, cfg.eps)?,
            mlp: MlpBlockParams::new(init, cfg)?,
            lvc: LvcParams::new(init, cfg)?,
            fuse_proj: ConvSpec::same(init, 2 * c, c, 1, 1, true)?,
        })
    }

    pub fn seeded(cfg: &EvcConfig, rng: ChaCha8Rng, style: InitStyle) -> Result<Self> {
        Self::new(&mut Init::new(rng, style), cfg)
    }

    pub fn in_channels(&self) -> usize {
        self.stem.conv.in_channels()
    }

    pub fn channels(&self) -> usize {
        self.stem.conv.out_channels()
    }
}

impl Module for EvcParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.lvc.visit(&join(prefix, "lvc"), f);
        self.fuse_proj.visit(&join(prefix, "fuse_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.lvc.visit_mut(&join(prefix, "lvc"), f);
        self.fuse_proj.visit_mut(&join(prefix, "fuse_proj"), f);
    }
}

/// Intermediate values of one EVC pass.
pub struct EvcTrace<V> {
    pub stem: V,
    pub mlp: V,
    pub lvc: V,
    pub concat: V,
    pub output: V,
}

pub fn evc_forward_traced<G: Graph>(
    g: &mut G,
    name: &str,
    x4: &G::Value,
    p: &EvcParams,
) -> Result<EvcTrace<G::Value>> {
    let stem = stem_forward(g, &join(name, "stem"), x4, &p.stem)?;
    let mlp = lightweight_mlp_forward(g, &join(name, "mlp"), &stem, &p.mlp)?;
    let lvc = lvc_forward(g, &join(name, "lvc"), &stem, &p.lvc)?;
    let concat = g.concat_channels(&[mlp.clone(), lvc.clone()])?;
    let output = p.fuse_proj.forward(g, &join(name, "fuse_proj"), &concat)?;
    Ok(EvcTrace {
        stem,
        mlp,
        lvc,
        concat,
        output,
    })
}

pub fn evc_forward<G: Graph>(g: &mut G, name: &str, x4: &G::Value, p: &EvcParams) -> Result<G::Value> {
    Ok(evc_forward_traced(g, name, x4, p)?.output)
}

/// Eval-mode EVC on plain tensors.
pub fn evc(x4: &Tensor, p: &EvcParams) -> Result<Tensor> {
    let mut g = Eval::<f32>::new();
    evc_forward(&mut g, "evc", x4, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> EvcConfig {
        EvcConfig {
            channels: 4,
            codewords: 3,
            groupnorm_groups: 2,
            ..EvcConfig::new(3)
        }
    }

    fn init(seed: u64, style: InitStyle) -> Init {
        Init::new(ChaCha8Rng::seed_from_u64(seed), style)
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        assert!(cfg.validate().is_ok());
        cfg.codewords = 0;
        assert!(matches!(cfg.validate(), Err(CfpError::EmptyCodebook)));
        let mut cfg = small_cfg();
        cfg.droppath = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.channels = 6;
        cfg.groupnorm_groups = 4;
        assert!(matches!(cfg.validate(), Err(CfpError::Groups { .. })));
    }

    #[test]
    fn default_scales_start_near_identity() {
        let p = MlpBlockParams::new(&mut init(0, InitStyle::Default), &small_cfg()).unwrap();
        assert!(p.scale1.data().iter().all(|&v| v == 1e-6));
        assert_eq!(p.dconv.kernel(), (1, 1));
        assert!(p.dconv.is_depthwise());
    }

    #[test]
    fn stem_shape_contract() {
        let p = stem_new(&mut init(1, InitStyle::Default), 64, 256, DEFAULT_EPS).unwrap();
        let x = Tensor::uniform(&[1, 64, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let y = stem_forward(&mut Eval::<f32>::new(), "stem", &x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 256, 8, 8]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn droppath_eval_mode_is_identity() {
        let mut cfg = small_cfg();
        cfg.droppath = 0.7;
        let p = MlpBlockParams::new(&mut init(3, InitStyle::Randomized), &cfg).unwrap();
        let x = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let with_rate = dconv_block_forward(&mut Eval::<f32>::new(), "m", &x, &p).unwrap();
        let mut q = p.clone();
        q.droppath1 = 0.0;
        let without = dconv_block_forward(&mut Eval::<f32>::new(), "m", &x, &q).unwrap();
        assert_eq!(with_rate, without);
    }

    #[test]
    fn droppath_factors_are_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = droppath_factors(&mut rng, 1000, 0.25);
        assert!(f.iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
        let kept = f.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept));
    }

    #[test]
    fn evc_names_match_visit_names() {
        let cfg = small_cfg();
        let p = EvcParams::new(&mut init(5, InitStyle::Default), &cfg).unwrap();
        let mut tape = crate::tape::Tape::<f32>::new();
        let x = tape.leaf("input", &Tensor::zeros(&[1, 3, 4, 4]).unwrap()).unwrap();
        evc_forward(&mut tape, "evc", &x, &p).unwrap();
        let mut visited: Vec<String> = p
            .named_tensors("evc")
            .into_iter()
            .filter(|(_, k, _)| *k == ParamKind::Trainable)
            .map(|(n, _, _)| n)
            .collect();
        visited.push("input".into());
        visited.sort();
        let recorded: Vec<String> = tape.leaves().map(|(n, _)| n.to_owned()).collect();
        assert_eq!(recorded, visited);
    }
}
