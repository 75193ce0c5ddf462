//! The op surface every block is written against.
//!
//! Blocks call into a [`Graph`] instead of the kernels directly, so one forward
//! definition serves three purposes: plain evaluation ([`Eval`]), gradient
//! recording ([`Tape`](crate::tape::Tape)) and finite-difference probing
//! (an `Eval<f64>` with a [`Perturbation`]).

use rand_chacha::ChaCha8Rng;

use crate::error::{CfpError, Result};
use crate::ops::{self, Activation, Binary, ConvGeometry};
use crate::tensor::{Element, Tensor};

pub trait Graph {
    type Elem: Element;
    type Value: Clone;

    /// A named differentiable leaf (parameter or input). Requesting the same
    /// name twice yields the same leaf.
    fn leaf(&mut self, name: &str, t: &Tensor<f32>) -> Result<Self::Value>;
    /// A non-differentiable value such as running statistics.
    fn constant(&mut self, t: &Tensor<f32>) -> Result<Self::Value>;
    fn value(&self, v: &Self::Value) -> Tensor<Self::Elem>;
    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        geo: ConvGeometry,
    ) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, weight: &Self::Value, bias: Option<&Self::Value>) -> Result<Self::Value>;
    fn group_norm(
        &mut self,
        x: &Self::Value,
        groups: usize,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    #[allow(clippy::too_many_arguments)]
    fn batch_norm(
        &mut self,
        x: &Self::Value,
        mean: &Self::Value,
        var: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    fn activation(&mut self, x: &Self::Value, kind: Activation) -> Result<Self::Value>;
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn upsample2x(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn concat_channels(&mut self, xs: &[Self::Value]) -> Result<Self::Value>;
    fn binary(&mut self, x: &Self::Value, y: &Self::Value, kind: Binary) -> Result<Self::Value>;
    fn channel_mul(&mut self, x: &Self::Value, w: &Self::Value) -> Result<Self::Value>;
    fn scale_samples(&mut self, x: &Self::Value, factors: &[f64]) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn to_channels_last(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn to_channels_first(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn mean_axis(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    /// Soft-assignment residual aggregation, `[B,C,H,W] -> [B,K,C]`.
    fn codebook_aggregate(
        &mut self,
        x: &Self::Value,
        codewords: &Self::Value,
        scales: &Self::Value,
    ) -> Result<Self::Value>;
    /// Sum of all elements as a `[1]` tensor.
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// The droppath RNG when running in train mode; `None` in eval mode.
    fn train_rng(&mut self) -> Option<&mut ChaCha8Rng>;

    fn add(&mut self, x: &Self::Value, y: &Self::Value) -> Result<Self::Value> {
        self.binary(x, y, Binary::Add)
    }

    fn mul(&mut self, x: &Self::Value, y: &Self::Value) -> Result<Self::Value> {
        self.binary(x, y, Binary::Mul)
    }
}

/// Forward mode: eval (droppath is the identity) or train with a seeded RNG.
#[derive(Clone, Debug, Default)]
pub enum Mode {
    #[default]
    Eval,
    Train(ChaCha8Rng),
}

impl Mode {
    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }
}

/// Shift of one element of one named leaf, used for finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub name: String,
    pub index: usize,
    pub delta: f64,
}

pub(crate) fn finite<T: Element>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(CfpError::NonFinite(op))
    }
}

/// Pure evaluation: computes values and records nothing.
#[derive(Default)]
pub struct Eval<T = f32> {
    mode: Mode,
    perturbation: Option<Perturbation>,
    /// Sign of every ReLU input seen so far, when a perturbation is active.
    relu_pattern: Vec<bool>,
    _elem: std::marker::PhantomData<T>,
}

impl<T: Element> Eval<T> {
    pub fn new() -> Self {
        Eval {
            mode: Mode::Eval,
            perturbation: None,
            relu_pattern: Vec::new(),
            _elem: std::marker::PhantomData,
        }
    }

    pub fn with_mode(mode: Mode) -> Self {
        Eval { mode, ..Self::new() }
    }

    pub fn perturbed(p: Perturbation) -> Self {
        Eval {
            perturbation: Some(p),
            ..Self::new()
        }
    }

    /// Which side of the kink every ReLU input fell on during a perturbed
    /// pass; two passes with equal patterns lie on one linear piece.
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }
}

impl<T: Element> Graph for Eval<T> {
    type Elem = T;
    type Value = Tensor<T>;

    fn leaf(&mut self, name: &str, t: &Tensor<f32>) -> Result<Tensor<T>> {
        let v = finite("leaf", T::from_f32_tensor(t))?;
        match &self.perturbation {
            Some(p) if p.name == name => {
                let mut data = v.to_vec();
                let slot = data.get_mut(p.index).ok_or_else(|| {
                    CfpError::InvalidArgument(format!("perturbation index {} out of range for {name}", p.index))
                })?;
                *slot = *slot + T::lit(p.delta);
                Tensor::new(v.shape().to_vec(), data)
            }
            _ => Ok(v),
        }
    }

    fn constant(&mut self, t: &Tensor<f32>) -> Result<Tensor<T>> {
        finite("constant", T::from_f32_tensor(t))
    }

    fn value(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }

    fn shape(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geo: ConvGeometry) -> Result<Tensor<T>> {
        finite("conv2d", ops::conv2d_forward(x, w, b, geo)?)
    }

    fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        finite("linear", ops::linear_forward(x, w, b)?)
    }

    fn group_norm(
        &mut self,
        x: &Tensor<T>,
        groups: usize,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        finite("group_norm", ops::group_norm_forward(x, groups, gamma, beta, eps)?.0)
    }

    fn batch_norm(
        &mut self,
        x: &Tensor<T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        finite("batch_norm", ops::batch_norm_forward(x, mean, var, gamma, beta, eps)?)
    }

    fn activation(&mut self, x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
        if kind == Activation::Relu && self.perturbation.is_some() {
            self.relu_pattern.extend(x.data().iter().map(|&v| v > T::zero()));
        }
        finite("activation", ops::activation_forward(x, kind))
    }

    fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        finite("softmax", ops::softmax_forward(x, axis)?)
    }

    fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::upsample_nearest2x(x)
    }

    fn concat_channels(&mut self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        ops::concat_channels(&refs)
    }

    fn binary(&mut self, x: &Tensor<T>, y: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        finite("elementwise", ops::elementwise(x, y, kind)?)
    }

    fn channel_mul(&mut self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        finite("channel_broadcast_mul", ops::channel_broadcast_mul(x, w)?)
    }

    fn scale_samples(&mut self, x: &Tensor<T>, factors: &[f64]) -> Result<Tensor<T>> {
        finite("scale_samples", ops::scale_samples(x, factors)?)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.reshape(shape)
    }

    fn to_channels_last(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::to_channels_last(x)
    }

    fn to_channels_first(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::to_channels_first(x)
    }

    fn mean_axis(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        ops::mean_axis(x, axis)
    }

    fn codebook_aggregate(&mut self, x: &Tensor<T>, codewords: &Tensor<T>, scales: &Tensor<T>) -> Result<Tensor<T>> {
        finite("codebook_aggregate", ops::codebook_aggregate(x, codewords, scales)?.0)
    }

    fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        finite("sum", Tensor::scalar(x.sum()))
    }

    fn train_rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.mode.rng()
    }
}
