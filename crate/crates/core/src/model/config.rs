use crate::attention::DssaConfig;
use crate::error::{Error, Result};
use crate::ffn::GwsffnConfig;
use crate::tensor::conv_output_size;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub dim: usize,
    pub heads: usize,
    pub p: usize,
    pub ratio: usize,
    pub group: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// 3×3 stride-2 max pooling after the stem convolution.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub time_steps: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

pub const REGISTRY: [&str; 5] = ["Ti", "S", "M", "L", "Nano"];

/// Parameter counts in millions reported for the registry architectures.
pub fn reference_params_m(name: &str) -> Option<f64> {
    match name {
        "Ti" => Some(11.14),
        "S" => Some(17.76),
        "M" => Some(35.52),
        "L" => Some(60.38),
        _ => None,
    }
}

fn stage(dim: usize, heads: usize, p: usize, blocks: usize) -> StageSpec {
    StageSpec {
        dim,
        heads,
        p,
        ratio: 4,
        group: 64,
        blocks,
    }
}

fn imagenet(name: &str, dims: [usize; 3], heads: [usize; 3]) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        input_height: 224,
        input_width: 224,
        in_channels: 3,
        time_steps: 4,
        stem: StemSpec {
            kernel: 7,
            stride: 2,
            pad: 3,
            pool: true,
        },
        stages: vec![
            stage(dims[0], heads[0], 4, 1),
            stage(dims[1], heads[1], 2, 2),
            stage(dims[2], heads[2], 1, 3),
        ],
        num_classes: 1000,
    }
}

impl ModelConfig {
    /// Named architecture; matching is case-insensitive.
    pub fn registry(name: &str) -> Result<Self> {
        let canonical = REGISTRY
            .iter()
            .find(|r| r.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture {name:?}; expected one of {}",
                    REGISTRY.join(", ")
                ))
            })?;
        Ok(match *canonical {
            "Ti" => imagenet("Ti", [64, 192, 384], [1, 3, 6]),
            "S" => imagenet("S", [64, 256, 512], [1, 4, 8]),
            "M" => imagenet("M", [64, 384, 768], [1, 6, 12]),
            "L" => imagenet("L", [128, 512, 1024], [1, 8, 16]),
            _ => ModelConfig {
                name: "Nano".into(),
                input_height: 32,
                input_width: 32,
                in_channels: 3,
                time_steps: 4,
                stem: StemSpec {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    pool: false,
                },
                stages: vec![
                    StageSpec { group: 16, ..stage(32, 1, 4, 1) },
                    StageSpec { group: 16, ..stage(64, 2, 2, 1) },
                    StageSpec { group: 16, ..stage(128, 4, 1, 1) },
                ],
                num_classes: 10,
            },
        })
    }

    /// Spatial size entering each stage.
    pub fn stage_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let s = &self.stem;
        let shrink = |v: usize, what: &str| -> Result<usize> {
            let mut o = conv_output_size(v, s.kernel, s.stride, s.pad)
                .ok_or_else(|| Error::Config(format!("stem: {what} {v} too small for kernel {}", s.kernel)))?;
            if s.pool {
                o = conv_output_size(o, 3, 2, 1)
                    .ok_or_else(|| Error::Config(format!("stem pool: {what} too small")))?;
            }
            Ok(o)
        };
        let mut hw = (shrink(self.input_height, "input_height")?, shrink(self.input_width, "input_width")?);
        let mut out = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            if i > 0 {
                hw = (
                    conv_output_size(hw.0, 3, 2, 1).unwrap_or(0),
                    conv_output_size(hw.1, 3, 2, 1).unwrap_or(0),
                );
            }
            out.push(hw);
        }
        Ok(out)
    }

    /// Output channels of the downsample entering stages 2, 3, ...
    pub fn downsample_dims(&self) -> Vec<usize> {
        self.stages.iter().skip(1).map(|s| s.dim).collect()
    }

    pub fn dssa(&self, stage: usize) -> Result<DssaConfig> {
        let (h, w) = self.stage_sizes()?[stage];
        let s = &self.stages[stage];
        Ok(DssaConfig {
            dim: s.dim,
            height: h,
            width: w,
            p: s.p,
            heads: s.heads,
        })
    }

    pub fn gwsffn(&self, stage: usize) -> GwsffnConfig {
        let s = &self.stages[stage];
        GwsffnConfig {
            dim: s.dim,
            ratio: s.ratio,
            group: s.group,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: String, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return fail("name".into(), format!("{:?} must be a non-empty word", self.name));
        }
        for (field, v) in [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("in_channels", self.in_channels),
            ("time_steps", self.time_steps),
            ("num_classes", self.num_classes),
            ("stem.kernel", self.stem.kernel),
            ("stem.stride", self.stem.stride),
        ] {
            if v == 0 {
                return fail(field.into(), "must be positive".into());
            }
        }
        if self.stages.is_empty() {
            return fail("stages".into(), "at least one stage required".into());
        }
        let sizes = self.stage_sizes()?;
        for (i, (s, &(h, w))) in self.stages.iter().zip(&sizes).enumerate() {
            let key = |f: &str| format!("stage.{}.{f}", i + 1);
            if s.dim == 0 || s.blocks == 0 {
                return fail(key("dim"), "dim and blocks must be positive".into());
            }
            if s.heads == 0 || s.dim % s.heads != 0 {
                return fail(key("heads"), format!("dim {} not divisible by {} heads", s.dim, s.heads));
            }
            if h == 0 || w == 0 {
                return fail(key("dim"), "feature map vanished after downsampling".into());
            }
            if s.p == 0 || h % s.p != 0 || w % s.p != 0 {
                return fail(key("p"), format!("{h}x{w} feature map not divisible into {}x{} patches", s.p, s.p));
            }
            if s.ratio == 0 {
                return fail(key("ratio"), "must be >= 1".into());
            }
            if s.group == 0 || (s.dim * s.ratio) % s.group != 0 {
                return fail(
                    key("group"),
                    format!("hidden dimension {} not divisible by group {}", s.dim * s.ratio, s.group),
                );
            }
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "input_height = {}", self.input_height);
        let _ = writeln!(s, "input_width = {}", self.input_width);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "time_steps = {}", self.time_steps);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "stem.kernel = {}", self.stem.kernel);
        let _ = writeln!(s, "stem.stride = {}", self.stem.stride);
        let _ = writeln!(s, "stem.pad = {}", self.stem.pad);
        let _ = writeln!(s, "stem.pool = {}", self.stem.pool);
        let _ = writeln!(s, "stages = {}", self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let k = i + 1;
            let _ = writeln!(s, "stage.{k}.dim = {}", st.dim);
            let _ = writeln!(s, "stage.{k}.heads = {}", st.heads);
            let _ = writeln!(s, "stage.{k}.p = {}", st.p);
            let _ = writeln!(s, "stage.{k}.ratio = {}", st.ratio);
            let _ = writeln!(s, "stage.{k}.group = {}", st.group);
            let _ = writeln!(s, "stage.{k}.blocks = {}", st.blocks);
        }
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Applies one model key. Returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || parse_usize(key, value);
        match key {
            "arch" => *self = ModelConfig::registry(value)?,
            "name" => self.name = value.to_string(),
            "input_height" => self.input_height = num()?,
            "input_width" => self.input_width = num()?,
            "input_size" => {
                let v = num()?;
                self.input_height = v;
                self.input_width = v;
            }
            "in_channels" => self.in_channels = num()?,
            "time_steps" => self.time_steps = num()?,
            "num_classes" => self.num_classes = num()?,
            "stem.kernel" => self.stem.kernel = num()?,
            "stem.stride" => self.stem.stride = num()?,
            "stem.pad" => self.stem.pad = num()?,
            "stem.pool" => {
                self.stem.pool = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected true or false, got {value:?}")))?
            }
            "stages" => {
                let n = num()?;
                let template = self.stages.last().cloned().unwrap_or(stage(64, 1, 1, 1));
                self.stages.resize(n, template);
            }
            _ => {
                let Some(rest) = key.strip_prefix("stage.") else {
                    return Ok(false);
                };
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("malformed key {key:?}")))?;
                let i: usize = idx
                    .parse()
                    .ok()
                    .filter(|&i| i >= 1 && i <= self.stages.len())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "{key}: stage index must be in 1..={} (set `stages` first)",
                            self.stages.len()
                        ))
                    })?;
                let s = &mut self.stages[i - 1];
                let v = num()?;
                match field {
                    "dim" => s.dim = v,
                    "heads" => s.heads = v,
                    "p" => s.p = v,
                    "ratio" => s.ratio = v,
                    "group" => s.group = v,
                    "blocks" => s.blocks = v,
                    _ => return Err(Error::Config(format!("unknown stage field in {key:?}"))),
                }
            }
        }
        Ok(true)
    }

    /// Parses model-only `key = value` text; any unknown key is an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::registry("Nano")?;
        for (line, key, value) in parse_kv(text)? {
            if !cfg.set(&key, &value).map_err(|e| at_line(line, e))? {
                return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("line {line}: {m}")),
        other => other,
    }
}

pub(crate) fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

/// Splits `key = value` lines; `#` starts a comment. Returns `(line, key, value)`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_matches_architecture_table() {
        let expect = [
            ("Ti", [64, 192, 384], [1, 3, 6]),
            ("S", [64, 256, 512], [1, 4, 8]),
            ("M", [64, 384, 768], [1, 6, 12]),
            ("L", [128, 512, 1024], [1, 8, 16]),
        ];
        for (name, dims, heads) in expect {
            let c = ModelConfig::registry(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.stages.len(), 3);
            for i in 0..3 {
                let s = &c.stages[i];
                assert_eq!((s.dim, s.heads), (dims[i], heads[i]), "{name} stage {}", i + 1);
                assert_eq!(s.p, [4, 2, 1][i]);
                assert_eq!((s.ratio, s.group), (4, 64));
                assert_eq!(s.blocks, [1, 2, 3][i]);
            }
            assert_eq!(c.downsample_dims(), vec![dims[1], dims[2]]);
            assert_eq!(c.stem, StemSpec { kernel: 7, stride: 2, pad: 3, pool: true });
            assert_eq!(c.num_classes, 1000);
            assert_eq!(c.stage_sizes().unwrap(), vec![(56, 56), (28, 28), (14, 14)]);
        }
    }

    #[test]
    fn nano_entry() {
        let c = ModelConfig::registry("nano").unwrap();
        c.validate().unwrap();
        assert_eq!(c.stage_sizes().unwrap(), vec![(32, 32), (16, 16), (8, 8)]);
        assert_eq!(c.time_steps, 4);
        assert!(!c.stem.pool);
    }

    #[test]
    fn unknown_arch() {
        assert!(matches!(ModelConfig::registry("XL"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        for name in REGISTRY {
            let c = ModelConfig::registry(name).unwrap();
            assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_key_is_error() {
        let err = ModelConfig::from_text("arch = Ti\nstage.1.dmi = 3\n").unwrap_err();
        assert!(err.to_string().contains("dmi"));
        let err = ModelConfig::from_text("arch = Ti\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(ModelConfig::from_text("arch = Ti\nstage.4.dim = 3\n").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ModelConfig::registry("Ti").unwrap();
        c.stages[1].heads = 5;
        assert!(c.validate().unwrap_err().to_string().contains("stage.2.heads"));
        let mut c = ModelConfig::registry("Ti").unwrap();
        c.stages[0].p = 3;
        assert!(c.validate().unwrap_err().to_string().contains("stage.1.p"));
        let mut c = ModelConfig::registry("Ti").unwrap();
        c.stages[2].group = 100;
        assert!(c.validate().unwrap_err().to_string().contains("stage.3.group"));
    }

    #[test]
    fn overrides_after_arch() {
        let c = ModelConfig::from_text("arch = Ti # base\ntime_steps = 2\nnum_classes = 10\n").unwrap();
        assert_eq!((c.time_steps, c.num_classes), (2, 10));
        assert_eq!(c.stages[2].dim, 384);
    }
}
