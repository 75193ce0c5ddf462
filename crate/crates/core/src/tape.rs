//! Append-only recording tape with reverse-mode gradients.
//!
//! Every recorded node owns its forward value plus whatever context its
//! vector-Jacobian product needs. Inputs of a node always have smaller ids,
//! so a single reverse sweep visits nodes in a valid order.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{CfpError, Result};
use crate::graph::{finite, Graph, Mode};
use crate::ops::codebook::codebook_aggregate_backward;
use crate::ops::conv::conv2d_backward;
use crate::ops::layout::{concat_channels_backward, mean_axis_backward, upsample_nearest2x_backward};
use crate::ops::norm::{batch_norm_backward, group_norm_backward, GroupNormCtx};
use crate::ops::pointwise::{activation_backward, channel_broadcast_mul_backward, linear_backward, softmax_backward};
use crate::ops::{self, Activation, Binary, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        gamma: Var,
        beta: Var,
        x: Var,
        groups: usize,
        ctx: GroupNormCtx<T>,
    },
    BatchNorm {
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Upsample {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Binary {
        x: Var,
        y: Var,
        kind: Binary,
    },
    ChannelMul {
        x: Var,
        w: Var,
    },
    ScaleSamples {
        x: Var,
        factors: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    ChannelsLast {
        x: Var,
    },
    ChannelsFirst {
        x: Var,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Codebook {
        x: Var,
        codewords: Var,
        scales: Var,
        weights: Tensor<T>,
    },
    Sum {
        x: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                ..
            } => vec![*x, *mean, *var, *gamma, *beta],
            Op::Concat { xs } => xs.clone(),
            Op::Binary { x, y, .. } => vec![*x, *y],
            Op::ChannelMul { x, w } => vec![*x, *w],
            Op::Codebook {
                x, codewords, scales, ..
            } => vec![*x, *codewords, *scales],
            Op::Activation { x, .. }
            | Op::Softmax { x, .. }
            | Op::Upsample { x }
            | Op::ScaleSamples { x, .. }
            | Op::Reshape { x }
            | Op::ChannelsLast { x }
            | Op::ChannelsFirst { x }
            | Op::Mean { x, .. }
            | Op::Sum { x } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar with respect to every named leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.by_name.get_mut(name)
    }
}

/// A single-owner recording graph.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    leaves: BTreeMap<String, Var>,
    mode: Mode,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
            mode: Mode::Eval,
        }
    }

    pub fn with_mode(mode: Mode) -> Self {
        Tape { mode, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Named leaves in name order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.leaves.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let id = self.nodes.len();
        assert!(
            op.inputs().iter().all(|v| v.0 < id),
            "tape inputs must precede their node"
        );
        let value = finite(op_name, value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar `output`. Leaves that do not influence the
    /// output receive zero gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.val(output);
        if out.numel() != 1 {
            return Err(CfpError::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_parts(out.shape().to_vec(), vec![T::one()]));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.vjp(node, &g)?;
            for (input, grad) in contributions {
                assert!(input.0 < id, "cycle on tape");
                accumulate(&mut grads[input.0], grad);
            }
            // leaves keep their gradient
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let by_name = self
            .leaves
            .iter()
            .map(|(name, &var)| {
                let g = grads[var.0].take().unwrap_or_else(|| {
                    let v = self.val(var);
                    Tensor::from_parts(v.shape().to_vec(), vec![T::zero(); v.numel()])
                });
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_name })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        Ok(match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Conv { x, w, b, geo } => {
                let grads = conv2d_backward(self.val(*x), self.val(*w), b.is_some(), *geo, g)?;
                let mut out = vec![(*x, grads.input), (*w, grads.weight)];
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = linear_backward(self.val(*x), self.val(*w), b.is_some(), g);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let (Some(b), Some(gb)) = (b, gb) {
                    out.push((*b, gb));
                }
                out
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                ctx,
            } => {
                let (gx, gg, gb) = group_norm_backward(ctx, *groups, self.val(*gamma), g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNorm {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let (gx, gg, gb) = batch_norm_backward(
                    self.val(*x),
                    self.val(*mean),
                    self.val(*var),
                    self.val(*gamma),
                    *eps,
                    g,
                );
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Activation { x, kind } => vec![(*x, activation_backward(self.val(*x), *kind, g))],
            Op::Softmax { x, axis } => vec![(*x, softmax_backward(&node.value, *axis, g))],
            Op::Upsample { x } => vec![(*x, upsample_nearest2x_backward(self.val(*x).shape(), g))],
            Op::Concat { xs } => {
                let channels: Vec<usize> = xs.iter().map(|v| self.val(*v).shape()[1]).collect();
                xs.iter().copied().zip(concat_channels_backward(&channels, g)).collect()
            }
            Op::Binary { x, y, kind } => match kind {
                Binary::Add => vec![(*x, g.clone()), (*y, g.clone())],
                Binary::Mul => vec![
                    (*x, ops::elementwise(g, self.val(*y), Binary::Mul)?),
                    (*y, ops::elementwise(g, self.val(*x), Binary::Mul)?),
                ],
            },
            Op::ChannelMul { x, w } => {
                let (gx, gw) = channel_broadcast_mul_backward(self.val(*x), self.val(*w), g);
                vec![(*x, gx), (*w, gw)]
            }
            Op::ScaleSamples { x, factors } => vec![(*x, ops::scale_samples(g, factors)?)],
            Op::Reshape { x } => vec![(*x, g.reshape(self.val(*x).shape())?)],
            Op::ChannelsLast { x } => vec![(*x, ops::to_channels_first(g)?)],
            Op::ChannelsFirst { x } => vec![(*x, ops::to_channels_last(g)?)],
            Op::Mean { x, axis } => vec![(*x, mean_axis_backward(self.val(*x).shape(), *axis, g))],
            Op::Codebook {
                x,
                codewords,
                scales,
                weights,
            } => {
                let grads = codebook_aggregate_backward(
                    self.val(*x),
                    self.val(*codewords),
                    self.val(*scales),
                    weights,
                    g,
                )?;
                vec![
                    (*x, grads.input),
                    (*codewords, grads.codewords),
                    (*scales, grads.scales),
                ]
            }
            Op::Sum { x } => {
                let shape = self.val(*x).shape().to_vec();
                let n = self.val(*x).numel();
                vec![(*x, Tensor::from_parts(shape, vec![g.data()[0]; n]))]
            }
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    *slot = Some(match slot.take() {
        None => grad,
        Some(prev) => ops::elementwise(&prev, &grad, Binary::Add).expect("gradient shapes agree"),
    });
}

impl<T: Element> Graph for Tape<T> {
    type Elem = T;
    type Value = Var;

    fn leaf(&mut self, name: &str, t: &Tensor<f32>) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let v = self.push("leaf", T::from_f32_tensor(t), Op::Leaf)?;
        self.leaves.insert(name.to_owned(), v);
        Ok(v)
    }

    fn constant(&mut self, t: &Tensor<f32>) -> Result<Var> {
        self.push("constant", T::from_f32_tensor(t), Op::Constant)
    }

    fn value(&self, v: &Var) -> Tensor<T> {
        self.val(*v).clone()
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.val(*v).shape().to_vec()
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geo: ConvGeometry) -> Result<Var> {
        let y = ops::conv2d_forward(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), geo)?;
        self.push(
            "conv2d",
            y,
            Op::Conv {
                x: *x,
                w: *w,
                b: b.copied(),
                geo,
            },
        )
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = ops::linear_forward(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        self.push(
            "linear",
            y,
            Op::Linear {
                x: *x,
                w: *w,
                b: b.copied(),
            },
        )
    }

    fn group_norm(&mut self, x: &Var, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (y, ctx) = ops::group_norm_forward(self.val(*x), groups, self.val(*gamma), self.val(*beta), eps)?;
        self.push(
            "group_norm",
            y,
            Op::GroupNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
                groups,
                ctx,
            },
        )
    }

    fn batch_norm(&mut self, x: &Var, mean: &Var, var: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let y = ops::batch_norm_forward(
            self.val(*x),
            self.val(*mean),
            self.val(*var),
            self.val(*gamma),
            self.val(*beta),
            eps,
        )?;
        self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x: *x,
                mean: *mean,
                var: *var,
                gamma: *gamma,
                beta: *beta,
                eps,
            },
        )
    }

    fn activation(&mut self, x: &Var, kind: Activation) -> Result<Var> {
        let y = ops::activation_forward(self.val(*x), kind);
        self.push("activation", y, Op::Activation { x: *x, kind })
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = ops::softmax_forward(self.val(*x), axis)?;
        self.push("softmax", y, Op::Softmax { x: *x, axis })
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let y = ops::upsample_nearest2x(self.val(*x))?;
        self.push("upsample_nearest2x", y, Op::Upsample { x: *x })
    }

    fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| self.val(*v)).collect();
        let y = ops::concat_channels(&refs)?;
        self.push("concat_channels", y, Op::Concat { xs: xs.to_vec() })
    }

    fn binary(&mut self, x: &Var, y: &Var, kind: Binary) -> Result<Var> {
        let z = ops::elementwise(self.val(*x), self.val(*y), kind)?;
        self.push("elementwise", z, Op::Binary { x: *x, y: *y, kind })
    }

    fn channel_mul(&mut self, x: &Var, w: &Var) -> Result<Var> {
        let y = ops::channel_broadcast_mul(self.val(*x), self.val(*w))?;
        self.push("channel_broadcast_mul", y, Op::ChannelMul { x: *x, w: *w })
    }

    fn scale_samples(&mut self, x: &Var, factors: &[f64]) -> Result<Var> {
        let y = ops::scale_samples(self.val(*x), factors)?;
        self.push(
            "scale_samples",
            y,
            Op::ScaleSamples {
                x: *x,
                factors: factors.to_vec(),
            },
        )
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(*x).reshape(shape)?;
        self.push("reshape", y, Op::Reshape { x: *x })
    }

    fn to_channels_last(&mut self, x: &Var) -> Result<Var> {
        let y = ops::to_channels_last(self.val(*x))?;
        self.push("to_channels_last", y, Op::ChannelsLast { x: *x })
    }

    fn to_channels_first(&mut self, x: &Var) -> Result<Var> {
        let y = ops::to_channels_first(self.val(*x))?;
        self.push("to_channels_first", y, Op::ChannelsFirst { x: *x })
    }

    fn mean_axis(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = ops::mean_axis(self.val(*x), axis)?;
        self.push("mean_axis", y, Op::Mean { x: *x, axis })
    }

    fn codebook_aggregate(&mut self, x: &Var, codewords: &Var, scales: &Var) -> Result<Var> {
        let (y, weights) = ops::codebook_aggregate(self.val(*x), self.val(*codewords), self.val(*scales))?;
        self.push(
            "codebook_aggregate",
            y,
            Op::Codebook {
                x: *x,
                codewords: *codewords,
                scales: *scales,
                weights,
            },
        )
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.val(*x).sum());
        self.push("sum", y, Op::Sum { x: *x })
    }

    fn train_rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.mode.rng()
    }
}
