//! Tape gradients against central finite differences, both in `f64`.
//!
//! A block's outputs are reduced to a scalar with fixed random projections,
//! `L = sum_o <out_o, r_o>`, so every output element contributes.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CfpError, Result};
use crate::graph::{Eval, Graph, Perturbation};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// Anything that can be run on a [`Graph`] in eval mode.
pub trait Differentiable {
    fn forward<G: Graph>(&self, g: &mut G) -> Result<Vec<G::Value>>;
}

/// Scales the analytic gradient of one leaf, to prove the checker notices.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultInjection {
    pub leaf: String,
    pub factor: f64,
}

/// Central finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h^4)`.
    #[default]
    FivePoint,
}

impl Stencil {
    /// `(multiple of h, weight)` pairs; the estimate is `sum w f(x + m h) / h`.
    fn taps(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tol: f64,
    pub h: f64,
    pub stencil: Stencil,
    pub projection_seed: u64,
    pub fault: Option<FaultInjection>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tol: 1e-3,
            h: 1e-3,
            stencil: Stencil::default(),
            projection_seed: 0x5eed,
            fault: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose stencil had to shrink below `h` to avoid a ReLU kink.
    pub reduced_steps: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub block: String,
    pub tol: f64,
    pub h: f64,
    pub stencil: Stencil,
    pub leaves: Vec<LeafReport>,
    pub passed: bool,
}

impl GradReport {
    pub fn worst(&self) -> Option<&LeafReport> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failing(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| !l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |l| l.max_rel_error)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}:", self.block);
        let _ = writeln!(s, "  passed: {}", self.passed);
        let _ = writeln!(s, "  max_rel_error: {:.3e}", self.max_rel_error());
        for l in self.failing() {
            let _ = writeln!(s, "  failed: {}", l.name);
            let _ = writeln!(s, "    index: {}", l.worst_index);
            let _ = writeln!(s, "    rel_error: {:.3e}", l.max_rel_error);
            let _ = writeln!(s, "    analytic: {:.9e}", l.analytic);
            let _ = writeln!(s, "    numeric: {:.9e}", l.numeric);
        }
        s
    }
}

fn projections(shapes: &[Vec<usize>], seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng)).collect()
}

fn projected_loss<G: Graph>(g: &mut G, outputs: &[G::Value], r: &[Tensor]) -> Result<G::Value> {
    let mut total: Option<G::Value> = None;
    for (v, r) in outputs.iter().zip(r) {
        let rc = g.constant(r)?;
        let prod = g.mul(v, &rc)?;
        let s = g.sum(&prod)?;
        total = Some(match total {
            Some(t) => g.add(&t, &s)?,
            None => s,
        });
    }
    total.ok_or_else(|| CfpError::InvalidArgument("block produced no outputs".into()))
}

/// Loss value and tape gradients of every leaf.
pub fn analytic_gradients<B: Differentiable + ?Sized>(block: &B, seed: u64) -> Result<(f64, Gradients<f64>)> {
    let mut tape = Tape::<f64>::new();
    let outs = block.forward(&mut tape)?;
    let shapes: Vec<_> = outs.iter().map(|v| tape.shape(v)).collect();
    let r = projections(&shapes, seed)?;
    let loss = projected_loss(&mut tape, &outs, &r)?;
    let value = tape.value(&loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Loss under one perturbation, with the ReLU sign pattern it produced.
fn perturbed_loss<B: Differentiable + ?Sized>(block: &B, r: &[Tensor], p: Perturbation) -> Result<(f64, Vec<bool>)> {
    let mut g = Eval::<f64>::perturbed(p);
    let outs = block.forward(&mut g)?;
    let loss = projected_loss(&mut g, &outs, r)?;
    Ok((loss.data()[0], g.relu_pattern().to_vec()))
}

/// Smallest step tried when a stencil straddles a ReLU kink.
const MIN_STEP: f64 = 1e-7;

/// Central difference starting at step `h`, shrunk tenfold while any tap
/// lands on a different linear piece than the unperturbed point.
/// Returns the estimate and the step actually used.
fn central_difference<B: Differentiable + ?Sized>(
    block: &B,
    r: &[Tensor],
    leaf: &str,
    index: usize,
    base: &[bool],
    h: f64,
    stencil: Stencil,
) -> Result<(f64, f64)> {
    let mut step = h;
    loop {
        let mut acc = 0.0;
        let mut smooth = true;
        for &(m, w) in stencil.taps() {
            let p = Perturbation {
                name: leaf.to_owned(),
                index,
                delta: m * step,
            };
            let (loss, pattern) = perturbed_loss(block, r, p)?;
            acc += w * loss;
            smooth &= pattern == base;
        }
        if smooth || step / 10.0 < MIN_STEP {
            return Ok((acc / step, step));
        }
        step /= 10.0;
    }
}

pub fn grad_check<B: Differentiable + ?Sized>(name: &str, block: &B, opts: &GradCheckOptions) -> Result<GradReport> {
    let (_, mut grads) = analytic_gradients(block, opts.projection_seed)?;
    if let Some(fault) = &opts.fault {
        let g = grads
            .get_mut(&fault.leaf)
            .ok_or_else(|| CfpError::MissingParam(fault.leaf.clone()))?;
        *g = g.map(|v| v * fault.factor);
    }
    let shapes = {
        let mut eval = Eval::<f64>::new();
        let outs = block.forward(&mut eval)?;
        outs.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
    };
    let r = projections(&shapes, opts.projection_seed)?;
    let mut leaves = Vec::new();
    for (leaf, grad) in grads.iter() {
        let (_, base) = perturbed_loss(
            block,
            &r,
            Perturbation {
                name: leaf.to_owned(),
                index: 0,
                delta: 0.0,
            },
        )?;
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        let mut reduced_steps = 0;
        for (index, &analytic) in grad.data().iter().enumerate() {
            let (numeric, step) = central_difference(block, &r, leaf, index, &base, opts.h, opts.stencil)?;
            if step < opts.h {
                reduced_steps += 1;
            }
            let err = relative_error(analytic, numeric);
            if err > worst.0 || index == 0 {
                worst = (err, index, analytic, numeric);
            }
        }
        leaves.push(LeafReport {
            name: leaf.to_owned(),
            numel: grad.numel(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            reduced_steps,
            passed: worst.0 <= opts.tol,
        });
    }
    let passed = leaves.iter().all(|l| l.passed);
    Ok(GradReport {
        block: name.to_owned(),
        tol: opts.tol,
        h: opts.h,
        stencil: opts.stencil,
        leaves,
        passed,
    })
}
