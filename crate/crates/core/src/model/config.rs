use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Expansion factor of a stage: a fixed value, or the config-wide ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expansion {
    Fixed(usize),
    Ratio,
}

/// One encoder stage: `repeats` inverted-residual blocks, the first of which
/// carries the stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub expansion: Expansion,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.expansion {
            Expansion::Fixed(t) => write!(f, "{t}")?,
            Expansion::Ratio => write!(f, "t")?,
        }
        write!(f, ",{},{},{}", self.channels, self.repeats, self.stride)
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || {
            Error::Config(format!(
                "encoder stage '{s}' is not 'expansion,channels,repeats,stride'"
            ))
        };
        if parts.len() != 4 {
            return Err(bad());
        }
        let expansion = if parts[0] == "t" {
            Expansion::Ratio
        } else {
            Expansion::Fixed(parts[0].parse().map_err(|_| bad())?)
        };
        let num = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        Ok(StageSpec {
            expansion,
            channels: num(1)?,
            repeats: num(2)?,
            stride: num(3)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width_multiplier: f64,
    pub input_size: usize,
    pub expansion_ratio: usize,
    pub stem_channels: usize,
    pub encoder_stages: Vec<StageSpec>,
    /// Total downsampling of the encoder. Stride-2 stages beyond it run at
    /// stride 1 with doubled dilation instead.
    pub output_stride: usize,
    /// Dilation rates of the separable context branches; a global-pool
    /// branch is always added.
    pub spp_rates: Vec<usize>,
    /// Output width of the context block, split evenly over its branches.
    pub spp_channels: usize,
    pub low_level_channels: usize,
    pub decoder_refine_channels: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stage = |t: Option<usize>, channels, repeats, stride| StageSpec {
            expansion: t.map_or(Expansion::Ratio, Expansion::Fixed),
            channels,
            repeats,
            stride,
        };
        ModelConfig {
            width_multiplier: 1.0,
            input_size: 224,
            expansion_ratio: 6,
            stem_channels: 32,
            encoder_stages: vec![
                stage(Some(1), 16, 1, 1),
                stage(None, 24, 2, 2),
                stage(None, 32, 3, 2),
                stage(None, 64, 4, 2),
                stage(None, 96, 3, 1),
                stage(None, 160, 3, 2),
                stage(None, 320, 1, 1),
            ],
            output_stride: 16,
            spp_rates: vec![6, 12, 18],
            spp_channels: 256,
            low_level_channels: 48,
            decoder_refine_channels: 256,
            dropout_rate: 0.1,
        }
    }
}

/// Rounds `v` to the nearest multiple of 8, at least 8, never dropping more
/// than 10% below `v`.
pub fn make_divisible(v: f64) -> usize {
    let d = 8.0;
    let mut out = (((v + d / 2.0) / d).floor() * d).max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

/// Resolved layout of one inverted-residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Cumulative downsampling after this block.
    pub output_stride: usize,
}

/// All channel counts and strides after applying the width multiplier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub stem: usize,
    pub blocks: Vec<BlockLayout>,
    /// Index of the block whose output feeds the decoder skip path.
    pub low_level_block: usize,
    pub spp_branch: usize,
    pub low_level: usize,
    pub refine: usize,
}

const KEYS: [&str; 11] = [
    "width_multiplier",
    "input_size",
    "expansion_ratio",
    "stem_channels",
    "encoder_stages",
    "output_stride",
    "spp_rates",
    "spp_channels",
    "low_level_channels",
    "decoder_refine_channels",
    "dropout_rate",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl ModelConfig {
    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    fn scaled(&self, c: usize) -> usize {
        make_divisible(c as f64 * self.width_multiplier)
    }

    /// Checks every constraint and resolves the layer layout.
    pub fn layout(&self) -> Result<Layout> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return err(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            ));
        }
        if self.input_size == 0 {
            return err("input_size must be positive".into());
        }
        if self.expansion_ratio == 0 {
            return err("expansion_ratio must be positive".into());
        }
        if self.encoder_stages.is_empty() {
            return err("encoder_stages must not be empty".into());
        }
        for (i, s) in self.encoder_stages.iter().enumerate() {
            if s.channels == 0 || s.repeats == 0 || !matches!(s.stride, 1 | 2) {
                return err(format!(
                    "encoder stage {i} ({s}) needs positive channels and repeats and stride 1 or 2"
                ));
            }
            if s.expansion == Expansion::Fixed(0) {
                return err(format!("encoder stage {i} has expansion 0"));
            }
        }
        if !self.output_stride.is_power_of_two() || self.output_stride < 4 {
            return err(format!(
                "output_stride must be a power of two of at least 4, got {}",
                self.output_stride
            ));
        }
        if !self.input_size.is_multiple_of(self.output_stride) {
            return err(format!(
                "input_size {} is not divisible by output_stride {}",
                self.input_size, self.output_stride
            ));
        }
        if self.spp_rates.is_empty() || self.spp_rates.contains(&0) {
            return err("spp_rates must be a non-empty list of positive rates".into());
        }
        if self.stem_channels == 0
            || self.spp_channels == 0
            || self.low_level_channels == 0
            || self.decoder_refine_channels == 0
        {
            return err("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }

        let stem = self.scaled(self.stem_channels);
        let mut blocks = Vec::new();
        let (mut stride, mut dilation, mut channels) = (2usize, 1usize, stem);
        for s in &self.encoder_stages {
            let out = self.scaled(s.channels);
            let t = match s.expansion {
                Expansion::Fixed(t) => t,
                Expansion::Ratio => self.expansion_ratio,
            };
            for r in 0..s.repeats {
                let mut block_stride = if r == 0 { s.stride } else { 1 };
                let block_dilation = dilation;
                if block_stride == 2 && stride * 2 > self.output_stride {
                    block_stride = 1;
                    dilation *= 2;
                } else {
                    stride *= block_stride;
                }
                blocks.push(BlockLayout {
                    in_channels: channels,
                    hidden: channels * t,
                    out_channels: out,
                    stride: block_stride,
                    dilation: block_dilation,
                    output_stride: stride,
                });
                channels = out;
            }
        }
        if stride != self.output_stride {
            return err(format!(
                "encoder strides reach only {stride}, below output_stride {}",
                self.output_stride
            ));
        }
        let low_level_block = match blocks.iter().rposition(|b| b.output_stride == 4) {
            Some(i) => i,
            None => return err("no encoder block ends at stride 4 for the decoder skip path".into()),
        };
        let branches = self.spp_rates.len() + 1;
        Ok(Layout {
            stem,
            blocks,
            low_level_block,
            spp_branch: make_divisible(self.spp_channels as f64 * self.width_multiplier / branches as f64),
            low_level: self.scaled(self.low_level_channels),
            refine: self.scaled(self.decoder_refine_channels),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let join = |v: &[usize]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        Ok(match key {
            "width_multiplier" => self.width_multiplier.to_string(),
            "input_size" => self.input_size.to_string(),
            "expansion_ratio" => self.expansion_ratio.to_string(),
            "stem_channels" => self.stem_channels.to_string(),
            "encoder_stages" => self
                .encoder_stages
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            "output_stride" => self.output_stride.to_string(),
            "spp_rates" => join(&self.spp_rates),
            "spp_channels" => self.spp_channels.to_string(),
            "low_level_channels" => self.low_level_channels.to_string(),
            "decoder_refine_channels" => self.decoder_refine_channels.to_string(),
            "dropout_rate" => self.dropout_rate.to_string(),
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        })
    }

    /// Sets one key from its text form. Does not validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "width_multiplier" => self.width_multiplier = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "expansion_ratio" => self.expansion_ratio = parse(key, value)?,
            "stem_channels" => self.stem_channels = parse(key, value)?,
            "encoder_stages" => {
                self.encoder_stages = value
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "output_stride" => self.output_stride = parse(key, value)?,
            "spp_rates" => self.spp_rates = value.split(',').map(|r| parse(key, r)).collect::<Result<_>>()?,
            "spp_channels" => self.spp_channels = parse(key, value)?,
            "low_level_channels" => self.low_level_channels = parse(key, value)?,
            "decoder_refine_channels" => self.decoder_refine_channels = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    /// `key=value` pairs for every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// First key whose text form differs, with both values.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(String, String, String)> {
        KEYS.iter().find_map(|k| {
            let (a, b) = (self.get(k).ok()?, other.get(k).ok()?);
            (a != b).then(|| (k.to_string(), a, b))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(32.0), 32);
        assert_eq!(make_divisible(8.0), 8);
        assert_eq!(make_divisible(4.0), 8);
        assert_eq!(make_divisible(6.0), 8);
        assert_eq!(make_divisible(12.0), 16);
        assert_eq!(make_divisible(40.0), 40);
        assert_eq!(make_divisible(0.1), 8);
        // 0.9 rule: 44 → 48 (40 would lose more than 10%)
        assert_eq!(make_divisible(44.0), 48);
    }

    #[test]
    fn default_layout() {
        let l = ModelConfig::default().layout().unwrap();
        assert_eq!(l.stem, 32);
        assert_eq!(l.blocks.len(), 17);
        assert_eq!(l.blocks.last().unwrap().out_channels, 320);
        assert_eq!(l.blocks.last().unwrap().output_stride, 16);
        assert_eq!(l.blocks[l.low_level_block].out_channels, 24);
        // 160-channel stage is dilated instead of strided
        let dilated: Vec<usize> = l.blocks.iter().map(|b| b.dilation).collect();
        assert_eq!(&dilated[13..], &[1, 2, 2, 2]);
        assert_eq!(l.spp_branch, 64);
    }

    #[test]
    fn narrow_layout() {
        let c = ModelConfig {
            width_multiplier: 0.25,
            input_size: 64,
            ..ModelConfig::default()
        };
        let l = c.layout().unwrap();
        assert!(l.blocks.iter().all(|b| b.out_channels >= 8 && b.out_channels % 8 == 0));
        assert_eq!((l.spp_branch, l.low_level, l.refine), (16, 16, 64));
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            match c.validate() {
                Err(Error::Config(m)) => m,
                other => panic!("expected config error, got {other:?}"),
            }
        };
        assert!(bad(|c| c.width_multiplier = 0.0).contains("width_multiplier"));
        assert!(bad(|c| c.input_size = 100).contains("divisible"));
        assert!(bad(|c| c.dropout_rate = 1.0).contains("dropout"));
        assert!(bad(|c| {
            c.output_stride = 64;
            c.input_size = 256;
        })
        .contains("reach only"));
        assert!(bad(|c| c.spp_rates.clear()).contains("spp_rates"));
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.set("width_multiplier", "0.35").unwrap();
        c.set("spp_rates", "1,2,3").unwrap();
        let pairs = c.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert!(c.set("nope", "1").is_err());
        assert_eq!(
            c.first_difference(&ModelConfig::default()).unwrap().0,
            "width_multiplier"
        );
    }
}
