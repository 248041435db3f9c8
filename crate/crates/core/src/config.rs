//! Flat `key = value` run configuration.
//!
//! Precedence is built-in defaults, then a config file, then command-line
//! overrides. [`Settings::render`] emits every key in a fixed order and the
//! result parses back to the same settings, so a run manifest doubles as a
//! config file.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{DEFAULT_BINS, DEFAULT_SMOOTHING};
use crate::augment::{ColorSpace, Granularity};
use crate::error::{Error, Result};
use crate::synthetic::DomainSpec;
use crate::train::{Policy, TrainConfig};

/// Synthetic data used by `train` and `bench`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_size: (usize, usize),
    pub source_n: usize,
    pub test_n: usize,
    pub target_n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: (32, 32),
            source_n: 200,
            test_n: 100,
            target_n: 100,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn source_spec(&self, num_classes: usize) -> DomainSpec {
        DomainSpec {
            num_classes,
            ..DomainSpec::source().with_size(self.image_size.0, self.image_size.1)
        }
    }

    pub fn target_spec(&self, num_classes: usize) -> DomainSpec {
        DomainSpec {
            num_classes,
            ..DomainSpec::target().with_size(self.image_size.0, self.image_size.1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub repeats: usize,
    pub policies: Vec<Policy>,
    /// AdvStyle gamma sweep; empty skips it.
    pub gammas: Vec<f32>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            policies: Policy::ALL.to_vec(),
            gammas: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
    pub bins: usize,
    pub smoothing: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.model.widths = vec![8, 16, 16, 8];
        Self {
            train,
            data: DataConfig::default(),
            bench: BenchConfig::default(),
            bins: DEFAULT_BINS,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

fn cfg_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value}: expected {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| cfg_err(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(key, value, "true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| cfg_err(key, value, "a comma-separated list")))
        .collect()
}

fn dims(key: &str, value: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = value.split(['x', ',']).collect();
    match parts.as_slice() {
        [h, w] => Ok((num(key, h.trim())?, num(key, w.trim())?)),
        _ => Err(cfg_err(key, value, "HxW")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Every recognized key, in manifest order.
    pub const KEYS: [&'static str; 39] = [
        "seed",
        "policy",
        "max_iter",
        "batch_size",
        "lr0",
        "momentum",
        "weight_decay",
        "poly_power",
        "checkpoint_every",
        "harvest_every",
        "adv.gamma",
        "adv.steps",
        "adv.clamp_std_min",
        "adv.clamp_image",
        "adv.space",
        "adv.granularity",
        "rand.noise_std",
        "mix.lambda",
        "pixel.lr",
        "pixel.steps",
        "model.widths",
        "model.kernel",
        "model.num_classes",
        "model.injection_position",
        "pre.color_jitter",
        "pre.blur",
        "pre.flip",
        "pre.crop",
        "data.image_size",
        "data.source_n",
        "data.test_n",
        "data.target_n",
        "data.seed",
        "bench.repeats",
        "bench.policies",
        "bench.gammas",
        "analysis.bins",
        "analysis.smoothing",
        "threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => t.seed = num(key, value)?,
            "policy" => t.policy = value.parse()?,
            "max_iter" => t.max_iter = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr0" => t.lr0 = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "poly_power" => t.poly_power = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "harvest_every" => t.harvest_every = num(key, value)?,
            "adv.gamma" => t.adv.gamma = num(key, value)?,
            "adv.steps" => t.adv.steps = num(key, value)?,
            "adv.clamp_std_min" => t.adv.clamp_std_min = num(key, value)?,
            "adv.clamp_image" => t.adv.clamp_image = flag(key, value)?,
            "adv.space" => {
                t.adv.space = match value.to_ascii_lowercase().as_str() {
                    "rgb" => ColorSpace::Rgb,
                    "lab" => ColorSpace::Lab,
                    _ => return Err(cfg_err(key, value, "rgb or lab")),
                }
            }
            "adv.granularity" => {
                t.adv.granularity = match value.to_ascii_lowercase().as_str() {
                    "whole" => Granularity::Whole,
                    "patches_2x2" => Granularity::Patches2x2,
                    _ => return Err(cfg_err(key, value, "whole or patches_2x2")),
                }
            }
            "rand.noise_std" => t.rand_noise_std = num(key, value)?,
            "mix.lambda" => {
                t.mix_lambda = match value {
                    "beta" => None,
                    v => Some(num(key, v)?),
                }
            }
            "pixel.lr" => t.pixel_lr = num(key, value)?,
            "pixel.steps" => t.pixel_steps = num(key, value)?,
            "model.widths" => t.model.widths = list(key, value)?,
            "model.kernel" => t.model.kernel = num(key, value)?,
            "model.num_classes" => t.model.num_classes = num(key, value)?,
            "model.injection_position" => t.model.injection_position = num(key, value)?,
            "pre.color_jitter" => t.pre.color_jitter = flag(key, value)?,
            "pre.blur" => t.pre.blur = flag(key, value)?,
            "pre.flip" => t.pre.flip = flag(key, value)?,
            "pre.crop" => {
                t.pre.crop = match value {
                    "none" => None,
                    v => Some(dims(key, v)?),
                }
            }
            "data.image_size" => self.data.image_size = dims(key, value)?,
            "data.source_n" => self.data.source_n = num(key, value)?,
            "data.test_n" => self.data.test_n = num(key, value)?,
            "data.target_n" => self.data.target_n = num(key, value)?,
            "data.seed" => self.data.seed = num(key, value)?,
            "bench.repeats" => self.bench.repeats = num(key, value)?,
            "bench.policies" => self.bench.policies = list(key, value)?,
            "bench.gammas" => self.bench.gammas = list(key, value)?,
            "analysis.bins" => self.bins = num(key, value)?,
            "analysis.smoothing" => self.smoothing = num(key, value)?,
            // worker cap; accepted for manifests, the pipeline is single-threaded
            "threads" => {
                let _: usize = num(key, value)?;
            }
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "seed" => t.seed.to_string(),
            "policy" => t.policy.to_string(),
            "max_iter" => t.max_iter.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr0" => t.lr0.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "poly_power" => t.poly_power.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "harvest_every" => t.harvest_every.to_string(),
            "adv.gamma" => t.adv.gamma.to_string(),
            "adv.steps" => t.adv.steps.to_string(),
            "adv.clamp_std_min" => t.adv.clamp_std_min.to_string(),
            "adv.clamp_image" => t.adv.clamp_image.to_string(),
            "adv.space" => match t.adv.space {
                ColorSpace::Rgb => "rgb".into(),
                ColorSpace::Lab => "lab".into(),
            },
            "adv.granularity" => match t.adv.granularity {
                Granularity::Whole => "whole".into(),
                Granularity::Patches2x2 => "patches_2x2".into(),
            },
            "rand.noise_std" => t.rand_noise_std.to_string(),
            "mix.lambda" => t.mix_lambda.map_or("beta".into(), |l| l.to_string()),
            "pixel.lr" => t.pixel_lr.to_string(),
            "pixel.steps" => t.pixel_steps.to_string(),
            "model.widths" => join(&t.model.widths),
            "model.kernel" => t.model.kernel.to_string(),
            "model.num_classes" => t.model.num_classes.to_string(),
            "model.injection_position" => t.model.injection_position.to_string(),
            "pre.color_jitter" => t.pre.color_jitter.to_string(),
            "pre.blur" => t.pre.blur.to_string(),
            "pre.flip" => t.pre.flip.to_string(),
            "pre.crop" => t.pre.crop.map_or("none".into(), |(h, w)| format!("{h}x{w}")),
            "data.image_size" => format!("{}x{}", self.data.image_size.0, self.data.image_size.1),
            "data.source_n" => self.data.source_n.to_string(),
            "data.test_n" => self.data.test_n.to_string(),
            "data.target_n" => self.data.target_n.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "bench.repeats" => self.bench.repeats.to_string(),
            "bench.policies" => join(&self.bench.policies),
            "bench.gammas" => join(&self.bench.gammas),
            "analysis.bins" => self.bins.to_string(),
            "analysis.smoothing" => self.smoothing.to_string(),
            "threads" => "1".into(),
            _ => unreachable!("get called with unlisted key {key}"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[(S, S)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k.as_ref(), v.as_ref())?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`; validated.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[(S, S)]) -> Result<Self> {
        let mut s = Self::default();
        if let Some(f) = file {
            s.apply_file(f)?;
        }
        s.apply_overrides(overrides)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.source_n == 0 || self.data.test_n == 0 || self.data.target_n == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.bench.repeats == 0 {
            return Err(Error::Config("bench.repeats must be >= 1".into()));
        }
        if self.bins < 2 || !(self.smoothing > 0.0) {
            return Err(Error::Config("analysis needs bins >= 2 and smoothing > 0".into()));
        }
        self.data.source_spec(self.train.model.num_classes).validate()?;
        Ok(())
    }

    /// All keys as `key = value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }
}
