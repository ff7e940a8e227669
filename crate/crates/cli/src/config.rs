//! `section.key = value` run configuration.
//!
//! Sections: `data`, `model`, `train` and `attack`. Blank lines and lines
//! starting with `#` are ignored. Later assignments win, so flags applied
//! after the file override it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use psp_core::attack::{fmt_f64, parse_number, AttackConfig};
use psp_core::data::{gen_shapes, load_idx, Dataset, Splits};
use psp_core::nn::{Arch, InputSpec};
use psp_core::trainer::TrainConfig;
use psp_core::Rng;

use crate::error::{CliError, CliResult};

/// Where datasets come from and how they are split.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// IDX image/label files; procedural shapes when unset.
    pub idx: Option<(PathBuf, PathBuf)>,
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            idx: None,
            samples: 2000,
            classes: 10,
            channels: 1,
            size: 32,
            seed: 7,
            split_seed: 8,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

impl DataConfig {
    pub fn input_spec(&self) -> InputSpec {
        InputSpec::new(self.channels, self.size, self.size)
    }

    pub fn load(&self) -> CliResult<Splits> {
        let full = match &self.idx {
            Some((images, labels)) => load_idx(images, labels)?,
            None => gen_shapes(self.samples, self.classes, self.input_spec(), &mut Rng::new(self.seed))?,
        };
        Ok(full.split(self.train_frac, self.val_frac, &mut Rng::new(self.split_seed))?)
    }

    pub fn split(&self, name: &str) -> CliResult<Dataset> {
        let s = self.load()?;
        match name {
            "train" => Ok(s.train),
            "val" => Ok(s.val),
            "test" => Ok(s.test),
            _ => Err(CliError::Usage(format!("unknown split `{name}` (train, val or test)"))),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad_value("data", key, v));
        match key {
            "images" | "labels" => {
                let (mut images, mut labels) = self.idx.take().unwrap_or_default();
                if key == "images" { images = v.into() } else { labels = v.into() }
                self.idx = Some((images, labels));
            }
            "samples" => self.samples = int(v)?,
            "classes" => self.classes = int(v)?,
            "channels" => self.channels = int(v)?,
            "size" => self.size = int(v)?,
            "seed" => self.seed = v.parse().map_err(|_| bad_value("data", key, v))?,
            "split_seed" => self.split_seed = v.parse().map_err(|_| bad_value("data", key, v))?,
            "train_frac" => self.train_frac = parse_number(key, v)?,
            "val_frac" => self.val_frac = parse_number(key, v)?,
            _ => return Err(unknown("data", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![];
        if let Some((images, labels)) = &self.idx {
            e.push(("images", images.display().to_string()));
            e.push(("labels", labels.display().to_string()));
        }
        e.extend([
            ("samples", self.samples.to_string()),
            ("classes", self.classes.to_string()),
            ("channels", self.channels.to_string()),
            ("size", self.size.to_string()),
            ("seed", self.seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("train_frac", fmt_f64(self.train_frac)),
            ("val_frac", fmt_f64(self.val_frac)),
        ]);
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: Arch::TinyB, seed: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
}

impl RunConfig {
    /// Parse a config file body. Errors name the offending line.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: CliError| CliError::Config { line: Some(i + 1), msg: e.message() };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(CliError::Config { line: None, msg: format!("expected `section.key = value`, got `{line}`") }))?;
            self.set(key.trim(), value.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config { line, msg } => CliError::Config { line, msg: format!("{}: {msg}", path.display()) },
            other => other,
        })
    }

    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| CliError::Config { line: None, msg: format!("key `{key}` has no section") })?;
        match section {
            "data" => self.data.set(field, value),
            "model" => match field {
                "arch" => Ok(self.model.arch = value.trim().parse()?),
                "seed" => Ok(self.model.seed = value.trim().parse().map_err(|_| bad_value("model", field, value))?),
                _ => Err(unknown("model", field)),
            },
            "train" => Ok(self.train.set(field, value)?),
            "attack" => Ok(self.attack.set(field, value)?),
            _ => Err(unknown(section, field)),
        }
    }

    /// Apply `section.key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> CliResult<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not `section.key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.attack.validate()?;
        Ok(())
    }

    /// Every resolved field, one `section.key = value` per line. Parsing
    /// the echo gives back the same config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, entries: Vec<(&'static str, String)>| {
            for (k, v) in entries {
                let _ = writeln!(s, "{name}.{k} = {v}");
            }
        };
        section("data", self.data.entries());
        section("model", vec![("arch", self.model.arch.to_string()), ("seed", self.model.seed.to_string())]);
        section("train", self.train.entries());
        section("attack", self.attack.entries());
        s
    }
}

fn unknown(section: &str, key: &str) -> CliError {
    CliError::Config { line: None, msg: format!("unknown key `{section}.{key}`") }
}

fn bad_value(section: &str, key: &str, value: &str) -> CliError {
    CliError::Config { line: None, msg: format!("{section}.{key}: bad value `{value}`") }
}
