//! Small-width instances of every op and block, for gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::evc::{
    channel_mlp_block_forward, dconv_block_forward, evc_forward, lightweight_mlp_forward, lvc_encode, lvc_forward,
    stem_forward, stem_new, Codebook, EvcConfig, EvcParams, LvcParams, MlpBlockParams, StemParams,
};
use crate::gcr::{cfp_forward_graph, gcr_regulate_level, CfpParams, GcrConfig, LevelParams};
use crate::graph::Graph;
use crate::nn::{BatchNorm, ConvSpec, GroupNorm, Init, InitStyle, Linear};
use crate::ops::{Activation, Binary};
use crate::tensor::Tensor;

use super::gradcheck::{grad_check, Differentiable, GradCheckOptions, GradReport};

/// Structural knobs of the suite; widths are kept small so finite
/// differences over every parameter stay cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub channels: usize,
    pub mlp_expansion: usize,
    pub dconv_kernel: usize,
    pub groupnorm_groups: usize,
    pub codewords: usize,
    pub eps: f64,
    pub gcr: GcrConfig,
    /// Spatial size of the deepest pyramid level.
    pub deepest_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            channels: 4,
            mlp_expansion: 4,
            dconv_kernel: 1,
            groupnorm_groups: 32,
            codewords: 4,
            eps: 1e-5,
            gcr: GcrConfig::default(),
            deepest_size: 4,
        }
    }
}

impl SuiteConfig {
    fn evc(&self, in_channels: usize) -> EvcConfig {
        EvcConfig {
            channels: self.channels,
            mlp_expansion: self.mlp_expansion,
            dconv_kernel: self.dconv_kernel,
            groupnorm_groups: self.groupnorm_groups,
            codewords: self.codewords,
            eps: self.eps,
            ..EvcConfig::new(in_channels)
        }
    }
}

pub enum Case {
    Conv { x: Tensor, conv: ConvSpec },
    Linear { x: Tensor, linear: Linear },
    GroupNorm { x: Tensor, gn: GroupNorm },
    BatchNorm { x: Tensor, bn: BatchNorm },
    Activation { x: Tensor, kind: Activation },
    Softmax { x: Tensor, axis: usize },
    Upsample { x: Tensor },
    Concat { a: Tensor, b: Tensor },
    ChannelMul { x: Tensor, w: Tensor },
    Binary { x: Tensor, y: Tensor, kind: Binary },
    Mean { x: Tensor, axis: usize },
    CodebookAggregate { x: Tensor, codebook: Codebook },
    LvcEncode { x: Tensor, codebook: Codebook, bn: BatchNorm },
    Stem { x: Tensor, p: StemParams },
    DconvBlock { x: Tensor, p: MlpBlockParams },
    ChannelMlpBlock { x: Tensor, p: MlpBlockParams },
    LightweightMlp { x: Tensor, p: MlpBlockParams },
    Lvc { x: Tensor, p: Box<LvcParams> },
    Evc { x: Tensor, p: Box<EvcParams> },
    RegulateLevel { shallow: Tensor, deep: Tensor, p: LevelParams },
    Cfp { levels: Vec<(usize, Tensor)>, p: Box<CfpParams>, gcr: GcrConfig },
}

impl Differentiable for Case {
    fn forward<G: Graph>(&self, g: &mut G) -> Result<Vec<G::Value>> {
        let one = |v: G::Value| Ok(vec![v]);
        match self {
            Case::Conv { x, conv } => {
                let x = g.leaf("input", x)?;
                one(conv.forward(g, "conv", &x)?)
            }
            Case::Linear { x, linear } => {
                let x = g.leaf("input", x)?;
                one(linear.forward(g, "linear", &x)?)
            }
            Case::GroupNorm { x, gn } => {
                let x = g.leaf("input", x)?;
                one(gn.forward(g, "gn", &x)?)
            }
            Case::BatchNorm { x, bn } => {
                let x = g.leaf("input", x)?;
                one(bn.forward(g, "bn", &x)?)
            }
            Case::Activation { x, kind } => {
                let x = g.leaf("input", x)?;
                one(g.activation(&x, *kind)?)
            }
            Case::Softmax { x, axis } => {
                let x = g.leaf("input", x)?;
                one(g.softmax(&x, *axis)?)
            }
            Case::Upsample { x } => {
                let x = g.leaf("input", x)?;
                one(g.upsample2x(&x)?)
            }
            Case::Concat { a, b } => {
                let a = g.leaf("a", a)?;
                let b = g.leaf("b", b)?;
                one(g.concat_channels(&[a, b])?)
            }
            Case::ChannelMul { x, w } => {
                let x = g.leaf("input", x)?;
                let w = g.leaf("scale", w)?;
                one(g.channel_mul(&x, &w)?)
            }
            Case::Binary { x, y, kind } => {
                let x = g.leaf("x", x)?;
                let y = g.leaf("y", y)?;
                one(g.binary(&x, &y, *kind)?)
            }
            Case::Mean { x, axis } => {
                let x = g.leaf("input", x)?;
                one(g.mean_axis(&x, *axis)?)
            }
            Case::CodebookAggregate { x, codebook } => {
                let x = g.leaf("input", x)?;
                let b = g.leaf("codebook.codewords", &codebook.codewords)?;
                let s = g.leaf("codebook.scales", &codebook.scales)?;
                one(g.codebook_aggregate(&x, &b, &s)?)
            }
            Case::LvcEncode { x, codebook, bn } => {
                let x = g.leaf("input", x)?;
                one(lvc_encode(g, "lvc", &x, codebook, bn)?)
            }
            Case::Stem { x, p } => {
                let x = g.leaf("input", x)?;
                one(stem_forward(g, "stem", &x, p)?)
            }
            Case::DconvBlock { x, p } => {
                let x = g.leaf("input", x)?;
                one(dconv_block_forward(g, "mlp", &x, p)?)
            }
            Case::ChannelMlpBlock { x, p } => {
                let x = g.leaf("input", x)?;
                one(channel_mlp_block_forward(g, "mlp", &x, p)?)
            }
            Case::LightweightMlp { x, p } => {
                let x = g.leaf("input", x)?;
                one(lightweight_mlp_forward(g, "mlp", &x, p)?)
            }
            Case::Lvc { x, p } => {
                let x = g.leaf("input", x)?;
                one(lvc_forward(g, "lvc", &x, p)?)
            }
            Case::Evc { x, p } => {
                let x = g.leaf("input", x)?;
                one(evc_forward(g, "evc", &x, p)?)
            }
            Case::RegulateLevel { shallow, deep, p } => {
                let s = g.leaf("shallow", shallow)?;
                let d = g.leaf("deep", deep)?;
                one(gcr_regulate_level(g, "gcr", &s, &d, p)?)
            }
            Case::Cfp { levels, p, gcr } => {
                let inputs = levels
                    .iter()
                    .map(|(l, t)| Ok((*l, g.leaf(&format!("input.x{l}"), t)?)))
                    .collect::<Result<Vec<_>>>()?;
                let out = cfp_forward_graph(g, inputs, p, gcr)?;
                Ok(out.into_iter().map(|(_, v)| v).collect())
            }
        }
    }
}

pub struct NamedCase {
    pub name: &'static str,
    pub case: Case,
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, so piecewise-linear kinks are never
/// straddled by a finite-difference step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let t = input(rng, shape)?;
    Ok(t.map(|v| v.signum() * (0.1 + v.abs())))
}

/// Every op and block at small width, with randomized parameters.
pub fn standard_suite(cfg: &SuiteConfig, seed: u64) -> Result<Vec<NamedCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15), InitStyle::Randomized);
    let c = cfg.channels;
    let s = cfg.deepest_size;
    let k = cfg.codewords;
    let evc_cfg = cfg.evc(c + 2);
    let groups = evc_cfg.effective_groups();

    let mut strided = ConvSpec::same(&mut init, 3, 4, 3, 1, true)?;
    strided.stride = 2;

    let mut cases = vec![
        NamedCase {
            name: "conv2d",
            case: Case::Conv {
                x: input(&mut rng, &[2, 3, 5, 5])?,
                conv: ConvSpec::same(&mut init, 3, 4, 3, 1, true)?,
            },
        },
        NamedCase {
            name: "conv2d_strided",
            case: Case::Conv {
                x: input(&mut rng, &[1, 3, 5, 5])?,
                conv: strided,
            },
        },
        NamedCase {
            name: "conv2d_grouped",
            case: Case::Conv {
                x: input(&mut rng, &[1, 4, 4, 4])?,
                conv: ConvSpec::same(&mut init, 4, 6, 3, 2, false)?,
            },
        },
        NamedCase {
            name: "depthwise_conv2d",
            case: Case::Conv {
                x: input(&mut rng, &[1, c, 5, 5])?,
                conv: ConvSpec::same(&mut init, c, c, 3, c, true)?,
            },
        },
        NamedCase {
            name: "linear",
            case: Case::Linear {
                x: input(&mut rng, &[2, 3, 5])?,
                linear: Linear::new(&mut init, 5, 4),
            },
        },
        NamedCase {
            name: "group_norm",
            case: Case::GroupNorm {
                x: input(&mut rng, &[2, c, 3, 3])?,
                gn: GroupNorm::new(&mut init, c, groups, cfg.eps)?,
            },
        },
        NamedCase {
            name: "batch_norm",
            case: Case::BatchNorm {
                x: input(&mut rng, &[2, c, 3, 3])?,
                bn: BatchNorm::new(&mut init, c, cfg.eps),
            },
        },
        NamedCase {
            name: "relu",
            case: Case::Activation {
                x: off_kink(&mut rng, &[2, 3, 4])?,
                kind: Activation::Relu,
            },
        },
        NamedCase {
            name: "sigmoid",
            case: Case::Activation {
                x: input(&mut rng, &[2, 3, 4])?,
                kind: Activation::Sigmoid,
            },
        },
        NamedCase {
            name: "silu",
            case: Case::Activation {
                x: input(&mut rng, &[2, 3, 4])?,
                kind: Activation::Silu,
            },
        },
        NamedCase {
            name: "softmax",
            case: Case::Softmax {
                x: input(&mut rng, &[2, 5, 3])?,
                axis: 1,
            },
        },
        NamedCase {
            name: "upsample2x",
            case: Case::Upsample {
                x: input(&mut rng, &[1, 2, 3, 3])?,
            },
        },
        NamedCase {
            name: "concat_channels",
            case: Case::Concat {
                a: input(&mut rng, &[2, 2, 3, 3])?,
                b: input(&mut rng, &[2, 3, 3, 3])?,
            },
        },
        NamedCase {
            name: "channel_mul",
            case: Case::ChannelMul {
                x: input(&mut rng, &[2, c, 3, 3])?,
                w: input(&mut rng, &[2, c, 1, 1])?,
            },
        },
        NamedCase {
            name: "elementwise_mul",
            case: Case::Binary {
                x: input(&mut rng, &[2, 3, 4])?,
                y: input(&mut rng, &[2, 3, 4])?,
                kind: Binary::Mul,
            },
        },
        NamedCase {
            name: "mean_axis",
            case: Case::Mean {
                x: input(&mut rng, &[2, 5, 3])?,
                axis: 1,
            },
        },
        NamedCase {
            name: "codebook_aggregate",
            case: Case::CodebookAggregate {
                x: input(&mut rng, &[2, c, 3, 3])?,
                codebook: Codebook::new(&mut init, k, c)?,
            },
        },
        NamedCase {
            name: "lvc_encode",
            case: Case::LvcEncode {
                x: input(&mut rng, &[2, c, 3, 3])?,
                codebook: Codebook::new(&mut init, k, c)?,
                bn: BatchNorm::new(&mut init, k, cfg.eps),
            },
        },
        NamedCase {
            name: "stem",
            case: Case::Stem {
                x: input(&mut rng, &[1, c + 2, s, s])?,
                p: stem_new(&mut init, c + 2, c, cfg.eps)?,
            },
        },
    ];
    let mlp = MlpBlockParams::new(&mut init, &evc_cfg)?;
    cases.push(NamedCase {
        name: "dconv_block",
        case: Case::DconvBlock {
            x: input(&mut rng, &[1, c, s, s])?,
            p: mlp.clone(),
        },
    });
    cases.push(NamedCase {
        name: "channel_mlp_block",
        case: Case::ChannelMlpBlock {
            x: input(&mut rng, &[1, c, s, s])?,
            p: mlp.clone(),
        },
    });
    cases.push(NamedCase {
        name: "lightweight_mlp",
        case: Case::LightweightMlp {
            x: input(&mut rng, &[1, c, s, s])?,
            p: mlp,
        },
    });
    cases.push(NamedCase {
        name: "lvc",
        case: Case::Lvc {
            x: input(&mut rng, &[1, c, s, s])?,
            p: Box::new(LvcParams::new(&mut init, &evc_cfg)?),
        },
    });
    cases.push(NamedCase {
        name: "evc",
        case: Case::Evc {
            x: input(&mut rng, &[1, c + 2, s, s])?,
            p: Box::new(EvcParams::new(&mut init, &evc_cfg)?),
        },
    });
    cases.push(NamedCase {
        name: "gcr_regulate_level",
        case: Case::RegulateLevel {
            shallow: input(&mut rng, &[1, c + 1, 2 * s, 2 * s])?,
            deep: input(&mut rng, &[1, c, s, s])?,
            p: LevelParams::new(&mut init, 3, c + 1, c)?,
        },
    });

    // distinct level widths unless repeated passes need every level at `c`
    let widths: [usize; 3] = if cfg.gcr.repeat > 1 { [c; 3] } else { [c + 3, c + 1, c + 2] };
    let level_channels = [(2, widths[0]), (3, widths[1]), (4, widths[2])];
    let levels = level_channels
        .iter()
        .map(|&(l, ch)| {
            let hw = s << (4 - l);
            Ok((l, input(&mut rng, &[1, ch, hw, hw])?))
        })
        .collect::<Result<Vec<_>>>()?;
    cases.push(NamedCase {
        name: "cfp",
        case: Case::Cfp {
            levels,
            p: Box::new(CfpParams::new(&mut init, &evc_cfg, &cfg.gcr, &level_channels)?),
            gcr: cfg.gcr.clone(),
        },
    });
    Ok(cases)
}

/// Runs the suite once per seed; reports are named `block@seed`.
pub fn run_suite(cfg: &SuiteConfig, seeds: &[u64], opts: &GradCheckOptions) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        let opts = GradCheckOptions {
            projection_seed: opts.projection_seed ^ seed,
            ..opts.clone()
        };
        for nc in standard_suite(cfg, seed)? {
            reports.push(grad_check(&format!("{}@{seed}", nc.name), &nc.case, &opts)?);
        }
    }
    Ok(reports)
}
