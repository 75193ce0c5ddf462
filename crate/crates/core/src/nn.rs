//! Parameterised layers shared by the EVC and GCR blocks.

use rand_chacha::ChaCha8Rng;

use crate::error::{CfpError, Result};
use crate::graph::Graph;
use crate::ops::{Activation, ConvGeometry, DEFAULT_EPS};
use crate::tensor::Tensor;

/// Whether a stored tensor is trained or a fixed statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Statistic,
}

/// A named parameter tree. Names are dot-separated paths, identical to the
/// leaf names used when the block runs on a [`Graph`].
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor));

    /// `(name, kind, tensor)` for every stored tensor in visiting order.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, ParamKind, Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, k, t| out.push((n.to_owned(), k, t.clone())));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// How freshly built parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitStyle {
    /// Identity-like norms, unit codeword scales, near-zero channel scaling.
    #[default]
    Default,
    /// Every affine, statistic and scale drawn at random; used to exercise
    /// gradients and oracles away from the degenerate defaults.
    Randomized,
}

/// Seeded parameter initialiser.
pub struct Init {
    pub rng: ChaCha8Rng,
    pub style: InitStyle,
}

impl Init {
    pub fn new(rng: ChaCha8Rng, style: InitStyle) -> Self {
        Init { rng, style }
    }

    pub(crate) fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::uniform(shape, -bound, bound, &mut self.rng).expect("non-empty shape")
    }

    pub(crate) fn range(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::uniform(shape, lo, hi, &mut self.rng).expect("non-empty shape")
    }

    /// Fills with `value` by default, or uniform `[lo, hi)` when randomized.
    pub(crate) fn styled(&mut self, shape: &[usize], value: f32, lo: f64, hi: f64) -> Tensor {
        match self.style {
            InitStyle::Default => Tensor::full(shape, value).expect("non-empty shape"),
            InitStyle::Randomized => self.range(shape, lo, hi),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride-1 "same" convolution with uniform `±1/sqrt(fan_in)` weights.
    pub fn same(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize, groups: usize, bias: bool) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(CfpError::InvalidArgument(format!(
                "same-padding needs an odd kernel, got {kernel}"
            )));
        }
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(CfpError::Groups {
                op: "conv spec",
                channels: in_ch,
                groups,
            });
        }
        let fan_in = (in_ch / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = init.uniform(&[out_ch, in_ch / groups, kernel, kernel], bound);
        let bias = bias.then(|| init.uniform(&[out_ch], bound));
        Ok(ConvSpec {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, name: &str, x: &G::Value) -> Result<G::Value> {
        let w = g.leaf(&join(name, "weight"), &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.leaf(&join(name, "bias"), b)?),
            None => None,
        };
        g.conv2d(x, &w, b.as_ref(), self.geometry())
    }
}

impl Module for ConvSpec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }
}

/// Inference-mode batch norm over axis 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init, channels: usize, eps: f64) -> Self {
        let shape = [channels];
        BatchNorm {
            running_mean: init.styled(&shape, 0.0, -0.5, 0.5),
            running_var: init.styled(&shape, 1.0, 0.5, 1.5),
            gamma: init.styled(&shape, 1.0, 0.5, 1.5),
            beta: init.styled(&shape, 0.0, -0.5, 0.5),
            eps,
        }
    }

    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            running_mean: Tensor::zeros(&[channels]).expect("channels >= 1"),
            running_var: Tensor::ones(&[channels]).expect("channels >= 1"),
            gamma: Tensor::ones(&[channels]).expect("channels >= 1"),
            beta: Tensor::zeros(&[channels]).expect("channels >= 1"),
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward<G: Graph>(&self, g: &mut G, name: &str, x: &G::Value) -> Result<G::Value> {
        let mean = g.constant(&self.running_mean)?;
        let var = g.constant(&self.running_var)?;
        let gamma = g.leaf(&join(name, "weight"), &self.gamma)?;
        let beta = g.leaf(&join(name, "bias"), &self.beta)?;
        g.batch_norm(x, &mean, &var, &gamma, &beta, self.eps)
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "bias"), ParamKind::Trainable, &self.beta);
        f(&join(prefix, "running_mean"), ParamKind::Statistic, &self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Statistic, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "bias"), ParamKind::Trainable, &mut self.beta);
        f(&join(prefix, "running_mean"), ParamKind::Statistic, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::Statistic, &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(init: &mut Init, channels: usize, groups: usize, eps: f64) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(CfpError::Groups {
                op: "group_norm",
                channels,
                groups,
            });
        }
        Ok(GroupNorm {
            groups,
            gamma: init.styled(&[channels], 1.0, 0.5, 1.5),
            beta: init.styled(&[channels], 0.0, -0.5, 0.5),
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward<G: Graph>(&self, g: &mut G, name: &str, x: &G::Value) -> Result<G::Value> {
        let gamma = g.leaf(&join(name, "weight"), &self.gamma)?;
        let beta = g.leaf(&join(name, "bias"), &self.beta)?;
        g.group_norm(x, self.groups, &gamma, &beta, self.eps)
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.gamma);
        f(&join(prefix, "bias"), ParamKind::Trainable, &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "bias"), ParamKind::Trainable, &mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: init.uniform(&[d_out, d_in], bound),
            bias: Some(init.uniform(&[d_out], bound)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<G: Graph>(&self, g: &mut G, name: &str, x: &G::Value) -> Result<G::Value> {
        let w = g.leaf(&join(name, "weight"), &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.leaf(&join(name, "bias"), b)?),
            None => None,
        };
        g.linear(x, &w, b.as_ref())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }
}

/// Convolution, inference batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: ConvSpec,
    pub bn: BatchNorm,
    pub activation: Activation,
}

impl ConvBnAct {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize, eps: f64) -> Result<Self> {
        Ok(ConvBnAct {
            conv: ConvSpec::same(init, in_ch, out_ch, kernel, 1, true)?,
            bn: BatchNorm::new(init, out_ch, eps),
            activation: Activation::Relu,
        })
    }

    pub fn forward<G: Graph>(&self, g: &mut G, name: &str, x: &G::Value) -> Result<G::Value> {
        let y = self.conv.forward(g, &join(name, "conv"), x)?;
        let y = self.bn.forward(g, &join(name, "bn"), &y)?;
        g.activation(&y, self.activation)
    }
}

impl Module for ConvBnAct {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
