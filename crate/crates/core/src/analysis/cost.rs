//! Parameter and FLOP accounting.
//!
//! Convention: one multiply-accumulate is two FLOPs; bias adds, normalisation,
//! activations and residual arithmetic are counted with the per-element
//! constants below. Layout ops (concat, upsample, reshape, permute) and
//! eval-mode droppath are free.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{CfpError, Result};
use crate::evc::{EvcParams, LvcParams, MlpBlockParams};
use crate::gcr::{upsample_steps, CfpParams, GcrConfig};
use crate::nn::{join, BatchNorm, ConvBnAct, ConvSpec, GroupNorm, Linear, Module, ParamKind};
use crate::ops::conv::output_size;
use crate::ops::Activation;

pub const BATCH_NORM_FLOPS_PER_ELEMENT: u64 = 2;
pub const GROUP_NORM_FLOPS_PER_ELEMENT: u64 = 8;
pub const RELU_FLOPS_PER_ELEMENT: u64 = 1;
pub const SIGMOID_FLOPS_PER_ELEMENT: u64 = 4;
pub const SILU_FLOPS_PER_ELEMENT: u64 = 5;
/// Residual add, channel scaling and gating multiply.
pub const ELEMENTWISE_FLOPS_PER_ELEMENT: u64 = 1;
/// Squared distances `|x_i - b_k|^2`: `2·N·K·C` per sample.
pub const CODEBOOK_DISTANCE_FLOPS_PER_ENTRY: u64 = 2;
/// Normalised assignment weights: `N·K` per sample.
pub const CODEBOOK_SOFTMAX_FLOPS_PER_WEIGHT: u64 = 1;
/// Weighted residual accumulation `sum_i a_ik (x_i - b_k)`: `2·N·K·C` per sample.
pub const CODEBOOK_ACCUMULATE_FLOPS_PER_ENTRY: u64 = 2;
/// Mean over codewords: one add per `[B, K, C]` element.
pub const MEAN_FLOPS_PER_ELEMENT: u64 = 1;

pub const CONVENTION: &str = "1 MAC = 2 FLOPs; bias adds counted; batch_norm 2/elem; group_norm 8/elem; \
relu 1/elem; sigmoid 4/elem; silu 5/elem; residual add, channel scale and gate 1/elem; \
codebook: 2NKC distances + NK softmax + 2NKC accumulate per sample; mean over codewords 1/elem; \
concat, upsample, reshape, permute and eval-mode droppath are free; running statistics are \
reported separately from trainable parameters";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub statistics: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub convention: &'static str,
    pub params: u64,
    pub statistics: u64,
    pub flops: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    fn from_entries(breakdown: Vec<CostEntry>) -> Self {
        CostReport {
            convention: CONVENTION,
            params: breakdown.iter().map(|e| e.params).sum(),
            statistics: breakdown.iter().map(|e| e.statistics).sum(),
            flops: breakdown.iter().map(|e| e.flops).sum(),
            breakdown,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.breakdown.iter().find(|e| e.name == name)
    }

    /// Sum of every breakdown entry whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> CostEntry {
        let mut acc = CostEntry {
            name: prefix.to_owned(),
            params: 0,
            statistics: 0,
            flops: 0,
        };
        for e in self.breakdown.iter().filter(|e| e.name.starts_with(prefix)) {
            acc.params += e.params;
            acc.statistics += e.statistics;
            acc.flops += e.flops;
        }
        acc
    }

    /// Indented `key: value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cost_report:");
        let _ = writeln!(s, "  convention: {}", self.convention);
        let _ = writeln!(s, "  params: {}", self.params);
        let _ = writeln!(s, "  statistics: {}", self.statistics);
        let _ = writeln!(s, "  flops: {}", self.flops);
        let _ = writeln!(s, "  breakdown:");
        for e in &self.breakdown {
            let _ = writeln!(s, "    {}:", e.name);
            let _ = writeln!(s, "      params: {}", e.params);
            let _ = writeln!(s, "      statistics: {}", e.statistics);
            let _ = writeln!(s, "      flops: {}", e.flops);
        }
        s
    }
}

fn parent(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(p, _)| p)
}

/// Structure-only parameter count, grouped by owning layer.
pub fn count_params(module: &dyn Module, prefix: &str) -> CostReport {
    let mut entries: Vec<CostEntry> = Vec::new();
    module.visit(prefix, &mut |name, kind, t| {
        let owner = parent(name);
        let idx = match entries.iter().position(|e| e.name == owner) {
            Some(i) => i,
            None => {
                entries.push(CostEntry {
                    name: owner.to_owned(),
                    params: 0,
                    statistics: 0,
                    flops: 0,
                });
                entries.len() - 1
            }
        };
        let n = t.numel() as u64;
        match kind {
            ParamKind::Trainable => entries[idx].params += n,
            ParamKind::Statistic => entries[idx].statistics += n,
        }
    });
    CostReport::from_entries(entries)
}

/// Collects breakdown entries while walking a block with concrete shapes.
#[derive(Default)]
pub struct CostSink {
    entries: Vec<CostEntry>,
}

impl CostSink {
    pub fn push(&mut self, name: impl Into<String>, params: u64, statistics: u64, flops: u64) {
        self.entries.push(CostEntry {
            name: name.into(),
            params,
            statistics,
            flops,
        });
    }

    pub fn finish(self) -> CostReport {
        CostReport::from_entries(self.entries)
    }
}

/// A block whose cost can be derived from its structure and an input shape.
pub trait Costed {
    /// Records entries under `name` and returns the output shape.
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>>;
}

pub fn count_flops<C: Costed + ?Sized>(block: &C, name: &str, input: &[usize]) -> Result<CostReport> {
    let mut sink = CostSink::default();
    block.cost(name, input, &mut sink)?;
    Ok(sink.finish())
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(CfpError::Rank {
            op: "cost",
            expected: 4,
            shape: shape.to_vec(),
        }),
    }
}

pub fn activation_flops(kind: Activation) -> u64 {
    match kind {
        Activation::Relu => RELU_FLOPS_PER_ELEMENT,
        Activation::Sigmoid => SIGMOID_FLOPS_PER_ELEMENT,
        Activation::Silu => SILU_FLOPS_PER_ELEMENT,
    }
}

impl Costed for ConvSpec {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let (b, c, h, w) = dims4(input)?;
        if c != self.in_channels() {
            return Err(CfpError::ChannelMismatch {
                op: "conv cost",
                expected: self.in_channels(),
                got: c,
            });
        }
        let (kh, kw) = self.kernel();
        let oh = output_size(h, kh, self.stride, self.padding)?;
        let ow = output_size(w, kw, self.stride, self.padding)?;
        let out = self.out_channels() as u64;
        let positions = (b * oh * ow) as u64;
        let macs = positions * out * (c / self.groups) as u64 * (kh * kw) as u64;
        let bias_adds = if self.bias.is_some() { positions * out } else { 0 };
        let params = self.weight.numel() as u64 + self.bias.as_ref().map_or(0, |t| t.numel() as u64);
        sink.push(name, params, 0, 2 * macs + bias_adds);
        Ok(vec![b, self.out_channels(), oh, ow])
    }
}

impl Costed for Linear {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let last = *input.last().unwrap_or(&0);
        if last != self.d_in() {
            return Err(CfpError::ChannelMismatch {
                op: "linear cost",
                expected: self.d_in(),
                got: last,
            });
        }
        let rows = numel(input) / last as u64;
        let (d_in, d_out) = (self.d_in() as u64, self.d_out() as u64);
        let bias_adds = if self.bias.is_some() { rows * d_out } else { 0 };
        let params = d_in * d_out + if self.bias.is_some() { d_out } else { 0 };
        sink.push(name, params, 0, 2 * rows * d_in * d_out + bias_adds);
        let mut out = input.to_vec();
        *out.last_mut().expect("rank >= 1") = self.d_out();
        Ok(out)
    }
}

impl Costed for BatchNorm {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let c = self.channels() as u64;
        sink.push(name, 2 * c, 2 * c, BATCH_NORM_FLOPS_PER_ELEMENT * numel(input));
        Ok(input.to_vec())
    }
}

impl Costed for GroupNorm {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let c = self.channels() as u64;
        sink.push(name, 2 * c, 0, GROUP_NORM_FLOPS_PER_ELEMENT * numel(input));
        Ok(input.to_vec())
    }
}

impl Costed for ConvBnAct {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let y = self.conv.cost(&join(name, "conv"), input, sink)?;
        let y = self.bn.cost(&join(name, "bn"), &y, sink)?;
        sink.push(join(name, "act"), 0, 0, activation_flops(self.activation) * numel(&y));
        Ok(y)
    }
}

impl Costed for MlpBlockParams {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let (b, c, h, w) = dims4(input)?;
        let n = numel(input);
        let y = self.gn1.cost(&join(name, "gn1"), input, sink)?;
        self.dconv.cost(&join(name, "dconv"), &y, sink)?;
        sink.push(join(name, "scale1"), c as u64, 0, ELEMENTWISE_FLOPS_PER_ELEMENT * n);
        sink.push(join(name, "residual1"), 0, 0, ELEMENTWISE_FLOPS_PER_ELEMENT * n);
        self.gn2.cost(&join(name, "gn2"), input, sink)?;
        let hidden = self.fc1.cost(&join(name, "fc1"), &[b, h, w, c], sink)?;
        sink.push(
            join(name, "hidden_act"),
            0,
            0,
            activation_flops(self.hidden_activation) * numel(&hidden),
        );
        self.fc2.cost(&join(name, "fc2"), &hidden, sink)?;
        sink.push(join(name, "scale2"), c as u64, 0, ELEMENTWISE_FLOPS_PER_ELEMENT * n);
        sink.push(join(name, "residual2"), 0, 0, ELEMENTWISE_FLOPS_PER_ELEMENT * n);
        Ok(input.to_vec())
    }
}

impl Costed for LvcParams {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let (b, c, h, w) = dims4(input)?;
        let n = numel(input);
        let mut y = input.to_vec();
        for (i, block) in self.conv_block.iter().enumerate() {
            y = block.cost(&join(name, &format!("conv_block.{i}")), &y, sink)?;
        }
        y = self.cbr.cost(&join(name, "cbr"), &y, sink)?;
        let k = self.codebook.codes() as u64;
        let (bb, cc, pixels) = (b as u64, y[1] as u64, (h * w) as u64);
        let encode = bb
            * (CODEBOOK_DISTANCE_FLOPS_PER_ENTRY * pixels * k * cc
                + CODEBOOK_SOFTMAX_FLOPS_PER_WEIGHT * pixels * k
                + CODEBOOK_ACCUMULATE_FLOPS_PER_ENTRY * pixels * k * cc);
        sink.push(join(name, "codebook"), k * cc + k, 0, encode);
        self.phi_bn.cost(&join(name, "phi_bn"), &[b, k as usize, c], sink)?;
        sink.push(join(name, "phi_act"), 0, 0, RELU_FLOPS_PER_ELEMENT * bb * k * cc);
        sink.push(join(name, "phi_mean"), 0, 0, MEAN_FLOPS_PER_ELEMENT * bb * k * cc);
        self.fc.cost(&join(name, "fc"), &[b, c], sink)?;
        self.proj.cost(&join(name, "proj"), &[b, c, 1, 1], sink)?;
        sink.push(join(name, "gate"), 0, 0, SIGMOID_FLOPS_PER_ELEMENT * bb * cc);
        sink.push(join(name, "scale"), 0, 0, ELEMENTWISE_FLOPS_PER_ELEMENT * n);
        sink.push(join(name, "residual"), 0, 0, ELEMENTWISE_FLOPS_PER_ELEMENT * n);
        Ok(input.to_vec())
    }
}

impl Costed for EvcParams {
    fn cost(&self, name: &str, input: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        let x_in = self.stem.cost(&join(name, "stem"), input, sink)?;
        self.mlp.cost(&join(name, "mlp"), &x_in, sink)?;
        self.lvc.cost(&join(name, "lvc"), &x_in, sink)?;
        let mut cat = x_in.clone();
        cat[1] *= 2;
        self.fuse_proj.cost(&join(name, "fuse_proj"), &cat, sink)
    }
}

/// Cost of a full pyramid pass; `inputs` are `(level, shape)` pairs.
pub fn count_cfp_flops(p: &CfpParams, cfg: &GcrConfig, inputs: &[(usize, Vec<usize>)]) -> Result<CostReport> {
    let mut shapes: Vec<(usize, Vec<usize>)> = inputs.to_vec();
    shapes.sort_by_key(|(l, _)| *l);
    let deepest = shapes.last().map(|(l, _)| *l).ok_or(CfpError::MissingLevel(4))?;
    cfg.validate(deepest)?;
    let mut sink = CostSink::default();
    for r in 0..cfg.repeat {
        let tag = if cfg.repeat > 1 { format!("pass{r}.") } else { String::new() };
        let deep_shape = shapes.last().expect("non-empty").1.clone();
        let reg = p.evc.cost(&format!("{tag}evc"), &deep_shape, &mut sink)?;
        shapes.last_mut().expect("non-empty").1 = reg.clone();
        for level in cfg.top_down() {
            let slot = shapes
                .iter()
                .position(|(l, _)| *l == level)
                .ok_or(CfpError::MissingLevel(level))?;
            let lp = p.level(level)?;
            let base = format!("{tag}gcr.level{level}");
            let lat = lp.lateral.cost(&join(&base, "lateral"), &shapes[slot].1, &mut sink)?;
            upsample_steps((lat[2], lat[3]), (reg[2], reg[3]))?;
            let mut cat = lat.clone();
            cat[1] += reg[1];
            shapes[slot].1 = lp.fuse.cost(&join(&base, "fuse"), &cat, &mut sink)?;
        }
    }
    Ok(sink.finish())
}
