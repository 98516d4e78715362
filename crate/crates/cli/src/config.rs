use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use woundseg::imaging::AugmentSpec;
use woundseg::model::{FitOptions, ModelConfig};
use woundseg::postprocess::{Connectivity, PostprocessConfig};
use woundseg::synth::SynthSpec;
use woundseg::tensor::AdamConfig;
use woundseg::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSettings {
            seed: 0,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 2,
            patience: 100,
            max_epochs: 1000,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSettings {
    pub size: usize,
    pub margin: usize,
    pub seed: u64,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        PrepareSettings {
            size: 224,
            margin: 0,
            seed: 0,
        }
    }
}

/// Every tunable of every subcommand, as `section.key` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub augment: AugmentSpec,
    pub post: PostprocessConfig,
    pub synth: SynthSpec,
    pub synth_count: usize,
    pub prepare: PrepareSettings,
    /// Set once any `model.*` key is assigned from a file or override.
    pub model_overridden: bool,
}

const KEYS: &[&str] = &[
    "train.seed",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.batch_size",
    "train.patience",
    "train.max_epochs",
    "train.augment",
    "augment.hflip_p",
    "augment.vflip_p",
    "augment.rotate_p",
    "augment.max_rotation_deg",
    "augment.brightness_p",
    "augment.max_brightness",
    "post.threshold",
    "post.connectivity",
    "post.hole_fraction",
    "post.noise_fraction",
    "post.min_absolute",
    "synth.count",
    "synth.image_size",
    "synth.min_blobs",
    "synth.max_blobs",
    "synth.min_axis",
    "synth.max_axis",
    "synth.wound_rgb",
    "synth.skin_rgb",
    "synth.color_jitter",
    "synth.noise",
    "synth.hole_p",
    "synth.speck_p",
    "synth.seed",
    "prepare.size",
    "prepare.margin",
    "prepare.seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{value}' is not a boolean"))),
    }
}

fn parse_rgb(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values, got '{value}'")))
}

fn rgb_text(c: [f64; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig {
            synth_count: 250,
            ..Default::default()
        }
    }

    /// All keys in a fixed order, model keys first.
    pub fn keys() -> Vec<String> {
        ModelConfig::keys()
            .iter()
            .map(|k| format!("model.{k}"))
            .chain(KEYS.iter().map(|k| k.to_string()))
            .collect()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.get(k);
        }
        let (t, a, p, s) = (&self.train, &self.augment, &self.post, &self.synth);
        Ok(match key {
            "train.seed" => t.seed.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.epsilon" => t.epsilon.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.augment" => t.augment.to_string(),
            "augment.hflip_p" => a.hflip_p.to_string(),
            "augment.vflip_p" => a.vflip_p.to_string(),
            "augment.rotate_p" => a.rotate_p.to_string(),
            "augment.max_rotation_deg" => a.max_rotation_deg.to_string(),
            "augment.brightness_p" => a.brightness_p.to_string(),
            "augment.max_brightness" => a.max_brightness.to_string(),
            "post.threshold" => p.threshold.to_string(),
            "post.connectivity" => p.connectivity.to_string(),
            "post.hole_fraction" => p.hole_fraction.to_string(),
            "post.noise_fraction" => p.noise_fraction.to_string(),
            "post.min_absolute" => p.min_absolute.to_string(),
            "synth.count" => self.synth_count.to_string(),
            "synth.image_size" => s.image_size.to_string(),
            "synth.min_blobs" => s.min_blobs.to_string(),
            "synth.max_blobs" => s.max_blobs.to_string(),
            "synth.min_axis" => s.min_axis.to_string(),
            "synth.max_axis" => s.max_axis.to_string(),
            "synth.wound_rgb" => rgb_text(s.wound_rgb),
            "synth.skin_rgb" => rgb_text(s.skin_rgb),
            "synth.color_jitter" => s.color_jitter.to_string(),
            "synth.noise" => s.noise.to_string(),
            "synth.hole_p" => s.hole_p.to_string(),
            "synth.speck_p" => s.speck_p.to_string(),
            "synth.seed" => s.seed.to_string(),
            "prepare.size" => self.prepare.size.to_string(),
            "prepare.margin" => self.prepare.margin.to_string(),
            "prepare.seed" => self.prepare.seed.to_string(),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("model.") {
            self.model.set(k, value)?;
            self.model_overridden = true;
            return Ok(());
        }
        let v = value;
        match key {
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "augment.hflip_p" => self.augment.hflip_p = parse(key, v)?,
            "augment.vflip_p" => self.augment.vflip_p = parse(key, v)?,
            "augment.rotate_p" => self.augment.rotate_p = parse(key, v)?,
            "augment.max_rotation_deg" => self.augment.max_rotation_deg = parse(key, v)?,
            "augment.brightness_p" => self.augment.brightness_p = parse(key, v)?,
            "augment.max_brightness" => self.augment.max_brightness = parse(key, v)?,
            "post.threshold" => self.post.threshold = parse(key, v)?,
            "post.connectivity" => {
                self.post.connectivity = Connectivity::try_from(parse::<u32>(key, v)?)?;
            }
            "post.hole_fraction" => self.post.hole_fraction = parse(key, v)?,
            "post.noise_fraction" => self.post.noise_fraction = parse(key, v)?,
            "post.min_absolute" => self.post.min_absolute = parse(key, v)?,
            "synth.count" => self.synth_count = parse(key, v)?,
            "synth.image_size" => self.synth.image_size = parse(key, v)?,
            "synth.min_blobs" => self.synth.min_blobs = parse(key, v)?,
            "synth.max_blobs" => self.synth.max_blobs = parse(key, v)?,
            "synth.min_axis" => self.synth.min_axis = parse(key, v)?,
            "synth.max_axis" => self.synth.max_axis = parse(key, v)?,
            "synth.wound_rgb" => self.synth.wound_rgb = parse_rgb(key, v)?,
            "synth.skin_rgb" => self.synth.skin_rgb = parse_rgb(key, v)?,
            "synth.color_jitter" => self.synth.color_jitter = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.hole_p" => self.synth.hole_p = parse(key, v)?,
            "synth.speck_p" => self.synth.speck_p = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "prepare.size" => self.prepare.size = parse(key, v)?,
            "prepare.margin" => self.prepare.margin = parse(key, v)?,
            "prepare.seed" => self.prepare.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin} line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin} line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::keys() {
            let _ = writeln!(s, "{k} = {}", self.get(&k).expect("listed key"));
        }
        s
    }

    pub fn augment_spec(&self) -> Option<AugmentSpec> {
        self.train.augment.then(|| self.augment.clone())
    }

    pub fn fit_options(&self) -> FitOptions {
        let t = &self.train;
        FitOptions {
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.epsilon,
            },
            augment: self.augment_spec(),
            seed: t.seed,
        }
    }
}
