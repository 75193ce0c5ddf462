//! Forward-only latency sampling.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{CfpError, Result};

/// Population statistics over timed iterations, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub iters: usize,
    pub warmup: usize,
    pub pinned: bool,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "latency:");
        let _ = writeln!(s, "  iters: {}", self.iters);
        let _ = writeln!(s, "  warmup: {}", self.warmup);
        let _ = writeln!(s, "  pinned: {}", self.pinned);
        for (k, v) in [
            ("mean_ms", self.mean_ms),
            ("p50_ms", self.p50_ms),
            ("p95_ms", self.p95_ms),
            ("min_ms", self.min_ms),
            ("max_ms", self.max_ms),
        ] {
            let _ = writeln!(s, "  {k}: {v:.4}");
        }
        s
    }
}

/// Nearest-rank percentile of sorted samples, `q` in `(0, 100]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Summarises raw samples (milliseconds). Panics on an empty slice.
pub fn latency_stats(samples_ms: &[f64], warmup: usize, pinned: bool) -> LatencyStats {
    assert!(!samples_ms.is_empty(), "no latency samples");
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    LatencyStats {
        iters: samples_ms.len(),
        warmup,
        pinned,
        mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        p50_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
    }
}

/// Restricts the calling thread to the first CPU it may run on. Returns
/// whether pinning took effect.
#[cfg(target_os = "linux")]
pub fn pin_to_one_cpu() -> bool {
    // SAFETY: cpu_set_t is plain data; both calls only read/write the set we own.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return false;
        }
        let Some(cpu) = (0..libc::CPU_SETSIZE as usize).find(|&c| libc::CPU_ISSET(c, &set)) else {
            return false;
        };
        let mut one: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut one);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &one) == 0
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_to_one_cpu() -> bool {
    false
}

/// Times `f` on the current thread: `warmup` discarded calls, then `iters`
/// recorded ones.
pub fn bench_latency<F: FnMut() -> Result<()>>(warmup: usize, iters: usize, mut f: F) -> Result<LatencyStats> {
    if iters == 0 {
        return Err(CfpError::InvalidArgument("bench needs at least one iteration".into()));
    }
    let pinned = pin_to_one_cpu();
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(latency_stats(&samples, warmup, pinned))
}
