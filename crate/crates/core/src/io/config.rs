//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::SuiteConfig;
use crate::error::{CfpError, Result};
use crate::evc::EvcConfig;
use crate::gcr::GcrConfig;
use crate::graph::Mode;
use crate::ops::DEFAULT_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Eval,
    Train,
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eval" => Ok(RunMode::Eval),
            "train" => Ok(RunMode::Train),
            _ => Err(format!("mode must be eval or train, got {s:?}")),
        }
    }
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Eval => "eval",
            RunMode::Train => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stem_channels: usize,
    pub mlp_expansion: usize,
    pub mlp_dconv_kernel: usize,
    pub mlp_groupnorm_groups: usize,
    pub lvc_codewords: usize,
    pub gcr_levels: Vec<usize>,
    pub gcr_repeat: usize,
    pub gcr_chained: bool,
    pub droppath: f64,
    pub eps: f64,
    pub seed: u64,
    pub mode: RunMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stem_channels: 256,
            mlp_expansion: 4,
            mlp_dconv_kernel: 1,
            mlp_groupnorm_groups: 32,
            lvc_codewords: 64,
            gcr_levels: vec![3, 2],
            gcr_repeat: 1,
            gcr_chained: false,
            droppath: 0.0,
            eps: DEFAULT_EPS,
            seed: 0,
            mode: RunMode::Eval,
        }
    }
}

pub const KEYS: [&str; 12] = [
    "stem.channels",
    "mlp.expansion",
    "mlp.dconv_kernel",
    "mlp.groupnorm_groups",
    "lvc.codewords",
    "gcr.levels",
    "gcr.repeat",
    "gcr.chained",
    "droppath",
    "eps",
    "seed",
    "mode",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| CfpError::Config {
        line,
        msg: format!("{key}: {e}"),
    })
}

fn levels(line: usize, raw: &str) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(line, "gcr.levels", p.trim())).collect()
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// unknown and repeated keys are errors. Missing keys keep their default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or_else(|| CfpError::Config {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            let (key, val) = (key.trim(), val.trim());
            if seen.contains(&key) {
                return Err(CfpError::Config {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            match key {
                "stem.channels" => cfg.stem_channels = value(line, key, val)?,
                "mlp.expansion" => cfg.mlp_expansion = value(line, key, val)?,
                "mlp.dconv_kernel" => cfg.mlp_dconv_kernel = value(line, key, val)?,
                "mlp.groupnorm_groups" => cfg.mlp_groupnorm_groups = value(line, key, val)?,
                "lvc.codewords" => cfg.lvc_codewords = value(line, key, val)?,
                "gcr.levels" => cfg.gcr_levels = levels(line, val)?,
                "gcr.repeat" => cfg.gcr_repeat = value(line, key, val)?,
                "gcr.chained" => cfg.gcr_chained = value(line, key, val)?,
                "droppath" => cfg.droppath = value(line, key, val)?,
                "eps" => cfg.eps = value(line, key, val)?,
                "seed" => cfg.seed = value(line, key, val)?,
                "mode" => cfg.mode = value(line, key, val)?,
                _ => return Err(CfpError::UnknownConfigKey(key.to_owned())),
            }
            seen.push(KEYS.iter().find(|k| **k == key).expect("matched above"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CfpError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, in canonical order; parsing the result yields `self`.
    pub fn to_text(&self) -> String {
        let levels: Vec<String> = self.gcr_levels.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "stem.channels = {}", self.stem_channels);
        let _ = writeln!(s, "mlp.expansion = {}", self.mlp_expansion);
        let _ = writeln!(s, "mlp.dconv_kernel = {}", self.mlp_dconv_kernel);
        let _ = writeln!(s, "mlp.groupnorm_groups = {}", self.mlp_groupnorm_groups);
        let _ = writeln!(s, "lvc.codewords = {}", self.lvc_codewords);
        let _ = writeln!(s, "gcr.levels = {}", levels.join(","));
        let _ = writeln!(s, "gcr.repeat = {}", self.gcr_repeat);
        let _ = writeln!(s, "gcr.chained = {}", self.gcr_chained);
        let _ = writeln!(s, "droppath = {:?}", self.droppath);
        let _ = writeln!(s, "eps = {:?}", self.eps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_dconv_kernel % 2 == 0 {
            return Err(CfpError::InvalidArgument(format!(
                "mlp.dconv_kernel must be odd, got {}",
                self.mlp_dconv_kernel
            )));
        }
        if !(self.eps > 0.0) {
            return Err(CfpError::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        self.evc_config(1).validate()?;
        self.gcr_config().validate(crate::gcr::DEEPEST_LEVEL)
    }

    pub fn evc_config(&self, in_channels: usize) -> EvcConfig {
        EvcConfig {
            in_channels,
            channels: self.stem_channels,
            mlp_expansion: self.mlp_expansion,
            dconv_kernel: self.mlp_dconv_kernel,
            groupnorm_groups: self.mlp_groupnorm_groups,
            codewords: self.lvc_codewords,
            droppath: self.droppath,
            eps: self.eps,
        }
    }

    pub fn gcr_config(&self) -> GcrConfig {
        GcrConfig {
            regulated_levels: self.gcr_levels.clone(),
            repeat: self.gcr_repeat,
            chained: self.gcr_chained,
        }
    }

    /// Forward mode; train mode draws droppath masks from a stream derived
    /// from the seed, separate from parameter initialisation.
    pub fn forward_mode(&self) -> Mode {
        match self.mode {
            RunMode::Eval => Mode::Eval,
            RunMode::Train => Mode::Train(ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1))),
        }
    }

    /// The structural knobs of this config at gradient-check width.
    pub fn suite_config(&self) -> SuiteConfig {
        let base = SuiteConfig::default();
        SuiteConfig {
            mlp_expansion: self.mlp_expansion,
            dconv_kernel: self.mlp_dconv_kernel,
            groupnorm_groups: self.mlp_groupnorm_groups,
            codewords: self.lvc_codewords.min(base.codewords),
            eps: self.eps,
            gcr: self.gcr_config(),
            ..base
        }
    }
}
