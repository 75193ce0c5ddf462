//! Cost accounting, gradient checking and latency measurement.

pub mod bench;
pub mod cost;
pub mod gradcheck;
pub mod suite;

pub use bench::{bench_latency, latency_stats, LatencyStats};
pub use cost::{count_cfp_flops, count_flops, count_params, CostEntry, CostReport, Costed};
pub use gradcheck::{grad_check, relative_error, Differentiable, FaultInjection, GradCheckOptions, GradReport, Stencil};
pub use suite::{run_suite, standard_suite, SuiteConfig};
