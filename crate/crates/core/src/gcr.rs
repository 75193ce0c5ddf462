//! Global centralized regulation: the EVC output of the deepest pyramid level
//! is upsampled into every regulated shallower level, concatenated with a
//! lateral projection of that level and fused back to the stem width.

use rand_chacha::ChaCha8Rng;

use crate::error::{CfpError, Result};
use crate::evc::{evc_forward, EvcConfig, EvcParams};
use crate::graph::{Eval, Graph, Mode};
use crate::nn::{join, ConvSpec, Init, InitStyle, Module, ParamKind};
use crate::tensor::Tensor;

/// Deepest level index of a five-level pyramid.
pub const DEEPEST_LEVEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub index: usize,
    pub tensor: Tensor,
}

impl PyramidLevel {
    /// Downsampling factor relative to the input image, `2^(index + 1)`.
    pub fn stride(&self) -> usize {
        1 << (self.index + 1)
    }
}

/// Feature maps ordered from shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn new(mut levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(CfpError::InvalidArgument("pyramid needs at least one level".into()));
        }
        levels.sort_by_key(|l| l.index);
        for l in &levels {
            l.tensor.dims4("pyramid level")?;
            if l.index > DEEPEST_LEVEL {
                return Err(CfpError::InvalidArgument(format!("level index {} above {DEEPEST_LEVEL}", l.index)));
            }
        }
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.index == b.index {
                return Err(CfpError::InvalidArgument(format!("duplicate level {}", a.index)));
            }
            let (ba, _, ha, wa) = a.tensor.dims4("pyramid level")?;
            let (bb, _, hb, wb) = b.tensor.dims4("pyramid level")?;
            if ba != bb {
                return Err(CfpError::ShapeMismatch {
                    op: "pyramid batch",
                    lhs: a.tensor.shape().to_vec(),
                    rhs: b.tensor.shape().to_vec(),
                });
            }
            if b.index == a.index + 1 && (ha != 2 * hb || wa != 2 * wb) {
                return Err(CfpError::SpatialRatio { shallow: ha, deep: hb });
            }
        }
        Ok(Pyramid { levels })
    }

    /// Consecutive levels ending at the deepest one: `tensors[last]` is level 4.
    pub fn from_deepest_last(tensors: Vec<Tensor>) -> Result<Self> {
        let n = tensors.len();
        if n == 0 || n > DEEPEST_LEVEL + 1 {
            return Err(CfpError::InvalidArgument(format!("expected 1..=5 pyramid levels, got {n}")));
        }
        let first = DEEPEST_LEVEL + 1 - n;
        Self::new(
            tensors
                .into_iter()
                .enumerate()
                .map(|(i, tensor)| PyramidLevel { index: first + i, tensor })
                .collect(),
        )
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.levels.iter().find(|l| l.index == index).map(|l| &l.tensor)
    }

    pub fn deepest(&self) -> &PyramidLevel {
        self.levels.last().expect("non-empty")
    }

    pub fn into_levels(self) -> Vec<PyramidLevel> {
        self.levels
    }
}

/// Regulation wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct GcrConfig {
    /// Levels regulated by the EVC output, processed deepest first.
    pub regulated_levels: Vec<usize>,
    /// Number of times the whole transform is applied.
    pub repeat: usize,
    /// Regulate level `i` from the fused output of level `i + 1` instead of
    /// directly from the EVC output.
    pub chained: bool,
}

impl Default for GcrConfig {
    fn default() -> Self {
        GcrConfig {
            regulated_levels: vec![3, 2],
            repeat: 1,
            chained: false,
        }
    }
}

impl GcrConfig {
    pub fn validate(&self, evc_level: usize) -> Result<()> {
        if self.repeat == 0 {
            return Err(CfpError::InvalidArgument("gcr repeat must be at least 1".into()));
        }
        for (i, &l) in self.regulated_levels.iter().enumerate() {
            if l >= evc_level {
                return Err(CfpError::InvalidArgument(format!(
                    "regulated level {l} is not shallower than the EVC level {evc_level}"
                )));
            }
            if self.regulated_levels[..i].contains(&l) {
                return Err(CfpError::InvalidArgument(format!("level {l} listed twice")));
            }
        }
        Ok(())
    }

    /// Regulated levels deepest first.
    pub fn top_down(&self) -> Vec<usize> {
        let mut v = self.regulated_levels.clone();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }
}

/// Per-level lateral and fusion projections.
#[derive(Clone, Debug)]
pub struct LevelParams {
    pub level: usize,
    /// 1x1, level channels -> C.
    pub lateral: ConvSpec,
    /// 1x1, 2C -> C.
    pub fuse: ConvSpec,
}

impl LevelParams {
    pub fn new(init: &mut Init, level: usize, in_channels: usize, channels: usize) -> Result<Self> {
        Ok(LevelParams {
            level,
            lateral: ConvSpec::same(init, in_channels, channels, 1, 1, true)?,
            fuse: ConvSpec::same(init, 2 * channels, channels, 1, 1, true)?,
        })
    }
}

/// Everything a centralized feature pyramid pass needs: one EVC block shared
/// across repetitions and one projection pair per regulated level.
#[derive(Clone, Debug)]
pub struct CfpParams {
    pub evc: EvcParams,
    pub levels: Vec<LevelParams>,
}

impl CfpParams {
    /// `level_channels` maps level index to its input channel count and must
    /// include the deepest level.
    pub fn new(init: &mut Init, evc_cfg: &EvcConfig, gcr: &GcrConfig, level_channels: &[(usize, usize)]) -> Result<Self> {
        let deepest = level_channels
            .iter()
            .map(|&(l, _)| l)
            .max()
            .ok_or_else(|| CfpError::InvalidArgument("no pyramid levels".into()))?;
        gcr.validate(deepest)?;
        let channels_of = |level: usize| {
            level_channels
                .iter()
                .find(|&&(l, _)| l == level)
                .map(|&(_, c)| c)
                .ok_or(CfpError::MissingLevel(level))
        };
        let mut cfg = evc_cfg.clone();
        cfg.in_channels = channels_of(deepest)?;
        let c = cfg.channels;
        if gcr.repeat > 1 {
            // parameters are shared across repetitions, so every level must
            // already carry the stem width
            for &(l, ch) in level_channels {
                if (l == deepest || gcr.regulated_levels.contains(&l)) && ch != c {
                    return Err(CfpError::ChannelMismatch {
                        op: "gcr repeat > 1",
                        expected: c,
                        got: ch,
                    });
                }
            }
        }
        let evc = EvcParams::new(init, &cfg)?;
        let levels = gcr
            .top_down()
            .into_iter()
            .map(|l| LevelParams::new(init, l, channels_of(l)?, c))
            .collect::<Result<_>>()?;
        Ok(CfpParams { evc, levels })
    }

    pub fn seeded(
        evc_cfg: &EvcConfig,
        gcr: &GcrConfig,
        level_channels: &[(usize, usize)],
        rng: ChaCha8Rng,
        style: InitStyle,
    ) -> Result<Self> {
        Self::new(&mut Init::new(rng, style), evc_cfg, gcr, level_channels)
    }

    pub fn level(&self, level: usize) -> Result<&LevelParams> {
        self.levels
            .iter()
            .find(|p| p.level == level)
            .ok_or(CfpError::MissingLevel(level))
    }

    pub fn channels(&self) -> usize {
        self.evc.channels()
    }
}

impl Module for CfpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.evc.visit(&join(prefix, "evc"), f);
        for lp in &self.levels {
            let base = join(prefix, &format!("gcr.level{}", lp.level));
            lp.lateral.visit(&join(&base, "lateral"), f);
            lp.fuse.visit(&join(&base, "fuse"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.evc.visit_mut(&join(prefix, "evc"), f);
        for lp in &mut self.levels {
            let base = join(prefix, &format!("gcr.level{}", lp.level));
            lp.lateral.visit_mut(&join(&base, "lateral"), f);
            lp.fuse.visit_mut(&join(&base, "fuse"), f);
        }
    }
}

/// Number of 2x upsamplings mapping `deep` onto `shallow`, at least one.
pub fn upsample_steps(shallow: (usize, usize), deep: (usize, usize)) -> Result<usize> {
    let err = CfpError::SpatialRatio {
        shallow: shallow.0,
        deep: deep.0,
    };
    let ratio = |s: usize, d: usize| (s % d == 0 && (s / d).is_power_of_two() && s / d >= 2).then(|| s / d);
    match (ratio(shallow.0, deep.0), ratio(shallow.1, deep.1)) {
        (Some(a), Some(b)) if a == b => Ok(a.trailing_zeros() as usize),
        _ => Err(err),
    }
}

/// `fuse(concat(lateral(shallow), upsample^m(deep_reg)))`.
pub fn gcr_regulate_level<G: Graph>(
    g: &mut G,
    name: &str,
    shallow: &G::Value,
    deep_reg: &G::Value,
    p: &LevelParams,
) -> Result<G::Value> {
    let s = g.shape(shallow);
    let d = g.shape(deep_reg);
    if s.len() != 4 || d.len() != 4 {
        return Err(CfpError::Rank {
            op: "gcr_regulate_level",
            expected: 4,
            shape: if s.len() != 4 { s } else { d },
        });
    }
    let steps = upsample_steps((s[2], s[3]), (d[2], d[3]))?;
    let lateral = p.lateral.forward(g, &join(name, "lateral"), shallow)?;
    let mut up = deep_reg.clone();
    for _ in 0..steps {
        up = g.upsample2x(&up)?;
    }
    let cat = g.concat_channels(&[lateral, up])?;
    p.fuse.forward(g, &join(name, "fuse"), &cat)
}

/// One regulation pass over `(level, value)` pairs sorted shallow to deep.
fn cfp_pass<G: Graph>(
    g: &mut G,
    levels: &[(usize, G::Value)],
    p: &CfpParams,
    cfg: &GcrConfig,
) -> Result<Vec<(usize, G::Value)>> {
    let (deepest, x_deep) = levels.last().cloned().ok_or(CfpError::MissingLevel(DEEPEST_LEVEL))?;
    let reg = evc_forward(g, "evc", &x_deep, &p.evc)?;
    let mut out: Vec<(usize, G::Value)> = levels.to_vec();
    *out.last_mut().expect("non-empty") = (deepest, reg.clone());
    let mut previous: Option<(usize, G::Value)> = None;
    for level in cfg.top_down() {
        let slot = out
            .iter()
            .position(|(l, _)| *l == level)
            .ok_or(CfpError::MissingLevel(level))?;
        let source = match &previous {
            Some((prev_level, v)) if cfg.chained && *prev_level == level + 1 => v.clone(),
            _ => reg.clone(),
        };
        let name = format!("gcr.level{level}");
        let fused = gcr_regulate_level(g, &name, &levels[slot].1, &source, p.level(level)?)?;
        out[slot].1 = fused.clone();
        previous = Some((level, fused));
    }
    Ok(out)
}

/// The full centralized feature pyramid, repeated `cfg.repeat` times with
/// shared parameters. Unregulated levels pass through untouched.
pub fn cfp_forward_graph<G: Graph>(
    g: &mut G,
    levels: Vec<(usize, G::Value)>,
    p: &CfpParams,
    cfg: &GcrConfig,
) -> Result<Vec<(usize, G::Value)>> {
    let deepest = levels.last().map(|(l, _)| *l).ok_or(CfpError::MissingLevel(DEEPEST_LEVEL))?;
    cfg.validate(deepest)?;
    let mut current = levels;
    for _ in 0..cfg.repeat {
        current = cfp_pass(g, &current, p, cfg)?;
    }
    Ok(current)
}

pub fn cfp_forward_with_mode(pyramid: &Pyramid, p: &CfpParams, cfg: &GcrConfig, mode: Mode) -> Result<Pyramid> {
    let mut g = Eval::<f32>::with_mode(mode);
    let levels = pyramid.levels().iter().map(|l| (l.index, l.tensor.clone())).collect();
    let out = cfp_forward_graph(&mut g, levels, p, cfg)?;
    Pyramid::new(
        out.into_iter()
            .map(|(index, tensor)| PyramidLevel { index, tensor })
            .collect(),
    )
}

/// Eval-mode pass on a [`Pyramid`].
pub fn cfp_forward(pyramid: &Pyramid, p: &CfpParams, cfg: &GcrConfig) -> Result<Pyramid> {
    cfp_forward_with_mode(pyramid, p, cfg, Mode::Eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_step_counts() {
        assert_eq!(upsample_steps((16, 16), (8, 8)).unwrap(), 1);
        assert_eq!(upsample_steps((32, 32), (8, 8)).unwrap(), 2);
        assert!(upsample_steps((24, 24), (8, 8)).is_err());
        assert!(upsample_steps((8, 8), (8, 8)).is_err());
        assert!(upsample_steps((16, 32), (8, 8)).is_err());
    }

    #[test]
    fn pyramid_validation() {
        let t = |h: usize| Tensor::<f32>::zeros(&[1, 2, h, h]).unwrap();
        assert!(Pyramid::from_deepest_last(vec![t(16), t(8), t(4)]).is_ok());
        assert!(matches!(
            Pyramid::from_deepest_last(vec![t(16), t(4)]),
            Err(CfpError::SpatialRatio { .. })
        ));
        let p = Pyramid::from_deepest_last(vec![t(16), t(8), t(4)]).unwrap();
        assert_eq!(p.levels()[0].index, 2);
        assert_eq!(p.levels()[0].stride(), 8);
        assert_eq!(p.deepest().stride(), 32);
    }

    #[test]
    fn config_rejects_deep_levels() {
        let cfg = GcrConfig {
            regulated_levels: vec![4],
            ..GcrConfig::default()
        };
        assert!(cfg.validate(4).is_err());
        assert!(GcrConfig {
            repeat: 0,
            ..GcrConfig::default()
        }
        .validate(4)
        .is_err());
        assert_eq!(GcrConfig::default().top_down(), vec![3, 2]);
    }
}
