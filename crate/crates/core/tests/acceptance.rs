//! Acceptance criteria, one test each. Every test writes a single
//! `PASS`/`FAIL` line straight to stdout so the verdicts show up even when
//! libtest captures output.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use cfp_core::analysis::{count_flops, run_suite, GradCheckOptions, SuiteConfig};
use cfp_core::evc::EvcConfig;
use cfp_core::gcr::{cfp_forward, GcrConfig};
use cfp_core::io::RunConfig;
use cfp_core::nn::InitStyle;
use common::*;

const ORACLE_TOL: f64 = 1e-5;
const INSTANCES: u64 = 25;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id:>2} {verdict} {name}: {detail}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn bits(t: &cfp_core::Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn c01_oracle_equivalence() {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let mut r = rng(100);
    for _ in 0..INSTANCES {
        let (x, c) = random_conv(&mut r, false);
        worst[0] = worst[0].max(conv_check(&x, &c));
        let (x, c) = random_conv(&mut r, true);
        worst[1] = worst[1].max(conv_check(&x, &c));
        let (x, l) = random_linear(&mut r);
        worst[2] = worst[2].max(linear_check(&x, &l));
        let (x, gn) = random_group_norm(&mut r);
        worst[3] = worst[3].max(group_norm_check(&x, &gn));
        let (x, cb, bn) = random_lvc_encode(&mut r);
        worst[4] = worst[4].max(lvc_encode_check(&x, &cb, &bn));
    }
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|&w| w <= ORACLE_TOL) && elapsed < Duration::from_secs(10);
    let detail = format!(
        "{INSTANCES} instances/op, max |d| conv={:.1e} dwconv={:.1e} linear={:.1e} gn={:.1e} lvc_encode={:.1e}, {:.2}s",
        worst[0],
        worst[1],
        worst[2],
        worst[3],
        worst[4],
        elapsed.as_secs_f64()
    );
    report(1, "oracle equivalence", ok, &detail);
}

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let reports = run_suite(&SuiteConfig::default(), &[0, 1, 2], &GradCheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0f64, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.block.as_str()).collect();
    let covers_top = ["evc@0", "cfp@0", "evc@2", "cfp@2"]
        .iter()
        .all(|b| reports.iter().any(|r| r.block == *b));
    let ok = failing.is_empty() && covers_top && worst <= 1e-3 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "{} block checks over 3 seeds, max rel err {worst:.2e}, failing {failing:?}, {:.1}s",
        reports.len(),
        elapsed.as_secs_f64()
    );
    report(2, "gradient suite", ok, &detail);
}

#[test]
fn c03_assignment_normalisation() {
    let mut worst = 0.0f64;
    let mut exact = true;
    for (i, k) in [1usize, 2, 64].into_iter().enumerate() {
        let (w, e) = assignment_row_error(k, 20, 300 + i as u64);
        worst = worst.max(w);
        exact &= e;
    }
    let ok = worst <= 1e-6 && exact;
    report(
        3,
        "assignment normalisation",
        ok,
        &format!("K in {{1,2,64}}: max |sum-1| {worst:.1e}, K=1 exactly 1: {exact}"),
    );
}

#[test]
fn c04_residual_identities() {
    let mlp_gap = (0..5).map(zero_scale_identity_gap).fold(0.0f64, f64::max);
    let (mut w_max, mut lvc_gap) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let (w, gap) = closed_gate_gap(seed);
        w_max = w_max.max(w);
        lvc_gap = lvc_gap.max(gap);
    }
    let ok = mlp_gap <= 1e-6 && w_max <= 1e-8 && lvc_gap <= 1e-6;
    let detail = format!("zero-scale MLP |d|={mlp_gap:.1e}, gate w={w_max:.1e} LVC |d|={lvc_gap:.1e}");
    report(4, "residual identities", ok, &detail);
}

#[test]
fn c05_codebook_permutation_invariance() {
    let gap = (0..20).map(codebook_permutation_gap).fold(0.0f64, f64::max);
    report(
        5,
        "codebook permutation invariance",
        gap <= 1e-6,
        &format!("20 seeds, max |d| {gap:.1e}"),
    );
}

#[test]
fn c06_gcr_shape_contract() {
    let c = gcr_shape_contract(600);
    let expected = vec![(2, vec![1, 256, 32, 32]), (3, vec![1, 256, 16, 16]), (4, vec![1, 256, 8, 8])];
    let ok = c.shapes == expected
        && c.sizes_preserved
        && c.all_stem_width
        && c.empty_set_passthrough
        && c.empty_set_deepest_changed;
    let detail = format!(
        "shapes {:?}, empty set leaves shallow levels bit-identical: {}",
        c.shapes, c.empty_set_passthrough
    );
    report(6, "gcr shape contract", ok, &detail);
}

#[test]
fn c07_config_defaults() {
    let parsed = RunConfig::parse("").unwrap();
    let default = RunConfig::default();
    let ok = parsed == default
        && default.lvc_codewords == 64
        && default.gcr_repeat == 1
        && EvcConfig::new(256).codewords == 64
        && GcrConfig::default().repeat == 1;
    let detail = format!("lvc.codewords={} gcr.repeat={}", default.lvc_codewords, default.gcr_repeat);
    report(7, "config defaults", ok, &detail);
}

#[test]
fn c08_cost_accounting() {
    let checks = cost_hand_checks();
    let mismatched: Vec<&str> = checks
        .iter()
        .filter(|(_, expected, got)| expected != got)
        .map(|(label, _, _)| label.as_str())
        .collect();
    let has_stem = checks.iter().any(|(_, expected, got)| *expected == 803_072 && got == expected);

    let mut exact_sums = true;
    let mut linear = true;
    for (seed, (cin, c, k)) in [(3usize, 8usize, 4usize), (16, 16, 2), (5, 4, 1)].into_iter().enumerate() {
        let cfg = EvcConfig {
            groupnorm_groups: 2,
            ..small_evc_config(cin, c, k)
        };
        let p = evc_params(&cfg, seed as u64, InitStyle::Default);
        let one = count_flops(&p, "evc", &[1, cin, 6, 5]).unwrap();
        for batch in [2usize, 3, 7] {
            let many = count_flops(&p, "evc", &[batch, cin, 6, 5]).unwrap();
            linear &= many.flops == batch as u64 * one.flops;
            exact_sums &= many.flops == many.breakdown.iter().map(|e| e.flops).sum::<u64>()
                && many.params == many.breakdown.iter().map(|e| e.params).sum::<u64>();
        }
    }
    let ok = checks.len() >= 5 && mismatched.is_empty() && has_stem && exact_sums && linear;
    let detail = format!(
        "{} hand checks (mismatched {mismatched:?}), breakdown exact: {exact_sums}, linear in batch: {linear}",
        checks.len()
    );
    report(8, "cost accounting", ok, &detail);
}

#[test]
fn c09_determinism() {
    use cfp_core::cli::run;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, "stem.channels = 8\nmlp.groupnorm_groups = 4\nlvc.codewords = 4\nseed = 3\n").unwrap();
    let cli = |args: Vec<String>| {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("cfp".to_string()).chain(args), &mut out, &mut err);
        assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    };
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let mut runs = Vec::new();
    for attempt in ["a", "b"] {
        let mut inputs = Vec::new();
        for (i, shape) in ["1,4,16,16", "1,8,8,8", "1,16,4,4"].iter().enumerate() {
            let file = p(&format!("{attempt}{i}.cft"));
            cli(vec!["gen".into(), "--shape".into(), shape.to_string(), "--seed".into(), i.to_string(), "--out".into(), file.clone()]);
            inputs.push(file);
        }
        let out_dir = p(&format!("out_{attempt}"));
        cli(vec![
            "forward".into(),
            "--config".into(),
            p("small.cfg"),
            "--inputs".into(),
            inputs.join(","),
            "--out-dir".into(),
            out_dir.clone(),
        ]);
        let mut files: Vec<Vec<u8>> = inputs.iter().map(|f| std::fs::read(f).unwrap()).collect();
        for name in ["X2.cft", "X3.cft", "X4.cft", "summary.json"] {
            files.push(std::fs::read(root.join(&out_dir).join(name)).unwrap());
        }
        runs.push(files);
    }
    let cli_identical = runs[0] == runs[1];

    let pyramid = default_pyramid(900);
    let gcr = GcrConfig::default();
    let params = default_cfp_params(&gcr, 901);
    let a = cfp_forward(&pyramid, &params, &gcr).unwrap();
    let b = cfp_forward(&pyramid, &params, &gcr).unwrap();
    let forward_identical = a
        .levels()
        .iter()
        .zip(b.levels())
        .all(|(x, y)| x.index == y.index && bits(&x.tensor) == bits(&y.tensor));
    let ok = cli_identical && forward_identical;
    let detail = format!("gen/forward files byte-identical: {cli_identical}, eval cfp_forward bit-identical: {forward_identical}");
    report(9, "determinism", ok, &detail);
}

#[test]
fn c10_droppath_statistics() {
    let start = Instant::now();
    let stats: Vec<DropPathStats> = [(0.1, 1000u64), (0.5, 1001)]
        .into_iter()
        .map(|(p, seed)| droppath_stats(p, 10_000, seed))
        .collect();
    let elapsed = start.elapsed();
    let ok = stats.iter().all(|s| s.raw_z.abs() <= 3.0 && s.rescaled_z.abs() <= 3.0) && elapsed < Duration::from_secs(30);
    let detail: Vec<String> = stats
        .iter()
        .map(|s| {
            format!(
                "p={} eval={:.4} kept mean={:.4} (z={:+.2} vs (1-p)*eval) rescaled mean={:.4} (z={:+.2} vs eval)",
                s.rate, s.eval, s.raw_mean, s.raw_z, s.rescaled_mean, s.rescaled_z
            )
        })
        .collect();
    let detail = format!("{} trials; {}; {:.1}s", stats[0].trials, detail.join("; "), elapsed.as_secs_f64());
    report(10, "droppath statistics", ok, &detail);
}
