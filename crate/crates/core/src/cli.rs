//! The `cfp` command line.
//!
//! Every failure prints one line `error: code=<exit> kind=<kind> msg=<text>`
//! to stderr and exits with 1 (usage), 2 (I/O or format) or 3 (numeric).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{bench_latency, count_cfp_flops, count_flops, run_suite, CostReport, GradCheckOptions};
use crate::error::{CfpError, Result};
use crate::evc::{evc_forward, EvcParams};
use crate::gcr::{cfp_forward_with_mode, CfpParams, Pyramid};
use crate::graph::Eval;
use crate::io::{load_params, read_tensor, save_params, write_atomic, write_tensor, RunConfig};
use crate::nn::InitStyle;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "cfp", version, about = "Centralized feature pyramid neck")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded uniform [-1, 1) tensor.
    Gen {
        #[arg(long)]
        shape: Shape,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pyramid neck on shallow-to-deep input levels.
    Forward {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated tensor files, shallowest first, deepest last.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Load parameters instead of seeding them.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also write the parameters used.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Parameter and FLOP counts. One shape costs the EVC block alone;
    /// several (shallow first) cost the whole neck.
    Stats {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "input-shape", required = true)]
        input_shapes: Vec<Shape>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Tape gradients against finite differences for every block.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Forward-only EVC latency.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Defaults to `1,<stem.channels>,8,8`.
        #[arg(long = "input-shape")]
        input_shape: Option<Shape>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

/// A `B,C,H,W`-style comma-separated shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let dims: Vec<usize> = s
            .split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if dims.contains(&0) {
            return Err(format!("every dimension of {s:?} must be positive"));
        }
        Ok(Shape(dims))
    }
}

fn shape4(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(CfpError::Rank {
            op: "input shape",
            expected: 4,
            shape: s.to_vec(),
        }),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

/// One line per failure, newline-free.
pub fn error_line(e: &CfpError) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error: code={} kind={} msg={}", e.exit_code(), e.kind(), msg)
}

#[derive(Serialize)]
struct LevelSummary {
    level: usize,
    file: String,
    shape: Vec<usize>,
    sum: f64,
    mean: f64,
    min: f32,
    max: f32,
}

#[derive(Serialize)]
struct ForwardSummary {
    mode: &'static str,
    seed: u64,
    params: usize,
    levels: Vec<LevelSummary>,
}

fn level_summary(level: usize, file: String, t: &Tensor) -> LevelSummary {
    let sum: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
    LevelSummary {
        level,
        file,
        shape: t.shape().to_vec(),
        sum,
        mean: sum / t.numel() as f64,
        min: t.data().iter().copied().fold(f32::INFINITY, f32::min),
        max: t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CfpError + '_ {
    move |e| CfpError::io(path, e)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn cmd_gen(shape: &[usize], seed: u64, path: &Path, out: &mut dyn Write) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::uniform(shape, -1.0, 1.0, &mut rng)?;
    write_tensor(path, &t)?;
    write_out(out, &format!("wrote {} shape={:?}\n", path.display(), t.shape()))
}

fn cmd_forward(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    out_dir: &Path,
    params_in: Option<&Path>,
    params_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let tensors = inputs.iter().map(read_tensor).collect::<Result<Vec<_>>>()?;
    let pyramid = Pyramid::from_deepest_last(tensors)?;
    let level_channels: Vec<(usize, usize)> = pyramid
        .levels()
        .iter()
        .map(|l| (l.index, l.tensor.shape()[1]))
        .collect();
    let evc_cfg = cfg.evc_config(0);
    let gcr = cfg.gcr_config();
    let mut params = CfpParams::seeded(
        &evc_cfg,
        &gcr,
        &level_channels,
        ChaCha8Rng::seed_from_u64(cfg.seed),
        InitStyle::Default,
    )?;
    if let Some(p) = params_in {
        load_params(p, &mut params)?;
    }
    let result = cfp_forward_with_mode(&pyramid, &params, &gcr, cfg.forward_mode())?;

    // everything is computed before the first file is written
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut levels = Vec::new();
    for l in result.levels() {
        let file = format!("X{}.cft", l.index);
        write_tensor(out_dir.join(&file), &l.tensor)?;
        levels.push(level_summary(l.index, file, &l.tensor));
    }
    let n_params = crate::analysis::count_params(&params, "").params as usize;
    let summary = ForwardSummary {
        mode: cfg.mode.as_str(),
        seed: cfg.seed,
        params: n_params,
        levels,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_atomic(&out_dir.join("summary.json"), json.as_bytes())?;
    if let Some(p) = params_out {
        save_params(p, &params)?;
    }
    for l in &summary.levels {
        write_out(out, &format!("X{}: shape={:?}\n", l.level, l.shape))?;
    }
    Ok(())
}

fn cost_report(cfg: &RunConfig, shapes: &[Vec<usize>]) -> Result<CostReport> {
    for s in shapes {
        shape4(s)?;
    }
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if let [only] = shapes {
        let p = EvcParams::seeded(&cfg.evc_config(only[1]), rng, InitStyle::Default)?;
        return count_flops(&p, "evc", only);
    }
    let first = crate::gcr::DEEPEST_LEVEL + 1 - shapes.len().min(crate::gcr::DEEPEST_LEVEL + 1);
    let levels: Vec<(usize, Vec<usize>)> = shapes.iter().enumerate().map(|(i, s)| (first + i, s.clone())).collect();
    let channels: Vec<(usize, usize)> = levels.iter().map(|(l, s)| (*l, s[1])).collect();
    let gcr = cfg.gcr_config();
    let p = CfpParams::seeded(&cfg.evc_config(0), &gcr, &channels, rng, InitStyle::Default)?;
    count_cfp_flops(&p, &gcr, &levels)
}

fn cmd_gradcheck(cfg: &RunConfig, n_seeds: u64, format: Format, out: &mut dyn Write) -> Result<()> {
    let seeds: Vec<u64> = (0..n_seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let reports = run_suite(&cfg.suite_config(), &seeds, &GradCheckOptions::default())?;
    match format {
        Format::Json => {
            let json = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
            write_out(out, &json)?;
        }
        Format::Text => {
            for r in &reports {
                let verdict = if r.passed { "pass" } else { "FAIL" };
                write_out(
                    out,
                    &format!("{:<28} {verdict} max_rel_error={:.3e}\n", r.block, r.max_rel_error()),
                )?;
                if !r.passed {
                    write_out(out, &r.to_text())?;
                }
            }
        }
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .flat_map(|r| r.failing().map(move |l| format!("{}:{}", r.block, l.name)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CfpError::GradCheckFailed(failed.join(",")))
    }
}

fn cmd_bench(
    cfg: &RunConfig,
    iters: usize,
    warmup: usize,
    shape: Option<Vec<usize>>,
    format: Format,
    out: &mut dyn Write,
) -> Result<()> {
    let shape = shape.unwrap_or_else(|| vec![1, cfg.stem_channels, 8, 8]);
    let (_, c, _, _) = shape4(&shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = EvcParams::seeded(&cfg.evc_config(c), rng.clone(), InitStyle::Default)?;
    let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng)?;
    let stats = bench_latency(warmup, iters, || {
        let mut g = Eval::<f32>::new();
        evc_forward(&mut g, "evc", &x, &p).map(drop)
    })?;
    let text = match format {
        Format::Text => format!("input_shape: {shape:?}\n{}", stats.to_text()),
        Format::Json => serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    };
    write_out(out, &text)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen { shape, seed, out: path } => cmd_gen(&shape.0, seed, &path, out),
        Command::Forward {
            config,
            inputs,
            out_dir,
            params,
            save_params,
        } => cmd_forward(
            &load_config(&config)?,
            &inputs,
            &out_dir,
            params.as_deref(),
            save_params.as_deref(),
            out,
        ),
        Command::Stats {
            config,
            input_shapes,
            format,
        } => {
            let shapes: Vec<Vec<usize>> = input_shapes.into_iter().map(|s| s.0).collect();
            let report = cost_report(&load_config(&config)?, &shapes)?;
            let text = match format {
                Format::Text => report.to_text(),
                Format::Json => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
            };
            write_out(out, &text)
        }
        Command::Gradcheck { config, seeds, format } => cmd_gradcheck(&load_config(&config)?, seeds, format, out),
        Command::Bench {
            config,
            iters,
            warmup,
            input_shape,
            format,
        } => cmd_bench(&load_config(&config)?, iters, warmup, input_shape.map(|s| s.0), format, out),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim_start_matches("error: ");
            let _ = writeln!(err, "error: code=1 kind=usage msg={first}");
            return 1;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            e.exit_code()
        }
    }
}
