//! Centralized feature pyramid neck.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`ops`]: dense `f32`/`f64` tensors and the forward/backward kernels.
//! * [`graph`], [`tape`]: the op surface blocks are written against, with a pure
//!   evaluator and a reverse-mode recording tape.
//! * [`nn`], [`evc`], [`gcr`]: parameterised layers, the explicit visual center
//!   and the global centralized regulation over a feature pyramid.
//! * [`analysis`]: parameter/FLOP accounting, gradient checking, latency stats.
//! * [`io`], [`cli`]: the `CFT1` tensor container, run configs and the `cfp` binary.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod evc;
pub mod gcr;
pub mod graph;
pub mod io;
pub mod nn;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{CfpError, Result};
pub use graph::{Eval, Graph, Mode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
