//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown or repeated keys are
//! errors, absent keys keep their defaults. Relative paths are resolved
//! against the directory of the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::artgen::ArtificialGridSpec;
use crate::error::{Error, Result};
use crate::model::{AdamWConfig, DecoderMask, ModelConfig};
use crate::postproc::PostprocessConfig;
use crate::vocab::{normalize, DEFAULT_CATEGORIES};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub s: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub categories: Option<Vec<String>>,
    pub category_file: Option<PathBuf>,
    pub vocab_file: Option<PathBuf>,
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub prompt_max: usize,
    pub decoder_mask: DecoderMask,
    pub optimizer: AdamWConfig,
    pub batch: usize,
    pub steps: usize,
    pub log_every: usize,
    pub k: usize,
    pub iterations: usize,
    pub patch: usize,
    pub channels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            s: 8,
            h: 8,
            w: 8,
            m: 8,
            categories: None,
            category_file: None,
            vocab_file: None,
            dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            prompt_max: 64,
            decoder_mask: DecoderMask::Bidirectional,
            optimizer: AdamWConfig::default(),
            batch: 16,
            steps: 3000,
            log_every: 100,
            k: 3,
            iterations: 25,
            patch: 4,
            channels: 3,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "S",
    "H",
    "W",
    "M",
    "categories",
    "category_file",
    "vocab_file",
    "D",
    "enc_layers",
    "dec_layers",
    "heads",
    "ffn_mult",
    "prompt_max",
    "decoder_mask",
    "lr",
    "wd",
    "beta1",
    "beta2",
    "eps",
    "batch",
    "steps",
    "log_every",
    "K",
    "iterations",
    "patch",
    "channels",
];

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    raw.parse::<V>()
        .map_err(|e| Error::config(key, format!("cannot parse {raw:?}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut m_set = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(Error::config(key, format!("line {}: unknown key", lineno + 1)));
            }
            if seen.iter().any(|k| k == key) {
                return Err(Error::config(key, format!("line {}: repeated key", lineno + 1)));
            }
            seen.push(key.to_string());
            let path = |v: &str| -> PathBuf {
                match base_dir {
                    Some(dir) if Path::new(v).is_relative() => dir.join(v),
                    _ => PathBuf::from(v),
                }
            };
            match key {
                "seed" => cfg.seed = parse_value(key, value)?,
                "S" => cfg.s = parse_value(key, value)?,
                "H" => cfg.h = parse_value(key, value)?,
                "W" => cfg.w = parse_value(key, value)?,
                "M" => {
                    cfg.m = parse_value(key, value)?;
                    m_set = true;
                }
                "categories" => {
                    cfg.categories = Some(value.split(',').map(normalize).collect());
                }
                "category_file" => cfg.category_file = Some(path(value)),
                "vocab_file" => cfg.vocab_file = Some(path(value)),
                "D" => cfg.dim = parse_value(key, value)?,
                "enc_layers" => cfg.enc_layers = parse_value(key, value)?,
                "dec_layers" => cfg.dec_layers = parse_value(key, value)?,
                "heads" => cfg.heads = parse_value(key, value)?,
                "ffn_mult" => cfg.ffn_mult = parse_value(key, value)?,
                "prompt_max" => cfg.prompt_max = parse_value(key, value)?,
                "decoder_mask" => cfg.decoder_mask = parse_value(key, value)?,
                "lr" => cfg.optimizer.lr = parse_value(key, value)?,
                "wd" => cfg.optimizer.weight_decay = parse_value(key, value)?,
                "beta1" => cfg.optimizer.beta1 = parse_value(key, value)?,
                "beta2" => cfg.optimizer.beta2 = parse_value(key, value)?,
                "eps" => cfg.optimizer.eps = parse_value(key, value)?,
                "batch" => cfg.batch = parse_value(key, value)?,
                "steps" => cfg.steps = parse_value(key, value)?,
                "log_every" => cfg.log_every = parse_value(key, value)?,
                "K" => cfg.k = parse_value(key, value)?,
                "iterations" => cfg.iterations = parse_value(key, value)?,
                "patch" => cfg.patch = parse_value(key, value)?,
                "channels" => cfg.channels = parse_value(key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if cfg.categories.is_some() && cfg.category_file.is_some() {
            return Err(Error::config("category_file", "conflicts with `categories`"));
        }
        if let Some(names) = &cfg.categories {
            if m_set && cfg.m != names.len() {
                return Err(Error::config(
                    "M",
                    format!("{} but {} categories are listed", cfg.m, names.len()),
                ));
            }
            cfg.m = names.len();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        ArtificialGridSpec::new(self.s, self.h, self.w).map_err(|_| {
            let key = if self.s == 0 {
                "S"
            } else if self.h == 0 {
                "H"
            } else {
                "W"
            };
            Error::config(key, "must be >= 1")
        })?;
        if self.m == 0 || self.m > 254 {
            return Err(Error::config("M", "must lie in 1..=254"));
        }
        if self.categories.is_none() && self.category_file.is_none() && self.m > DEFAULT_CATEGORIES.len() {
            return Err(Error::config(
                "M",
                format!(
                    "only {} built-in category names; list them with `categories`",
                    DEFAULT_CATEGORIES.len()
                ),
            ));
        }
        self.model_config().validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::config("batch", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        PostprocessConfig::new(self.k, self.iterations).map_err(|e| Error::config("K", e.to_string()))?;
        if self.k > self.h * self.w {
            return Err(Error::config(
                "K",
                format!("exceeds the {} image-token positions", self.h * self.w),
            ));
        }
        if self.patch == 0 {
            return Err(Error::config("patch", "must be >= 1"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels", "must be 1 or 3"));
        }
        Ok(())
    }

    pub fn grid(&self) -> ArtificialGridSpec {
        ArtificialGridSpec {
            s: self.s,
            h: self.h,
            w: self.w,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            image_tokens: self.h * self.w,
            prompt_max: self.prompt_max,
            ffn_mult: self.ffn_mult,
            decoder_mask: self.decoder_mask,
        }
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            k: self.k,
            iterations: self.iterations,
        }
    }

    /// Category names from `categories`, `category_file`, or the first `M`
    /// built-in names, in that order of precedence.
    pub fn category_names(&self) -> Result<Vec<String>> {
        if let Some(names) = &self.categories {
            return Ok(names.clone());
        }
        if let Some(path) = &self.category_file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let names: Vec<String> = text
                .lines()
                .map(normalize)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect();
            if names.is_empty() {
                return Err(Error::config("category_file", "no category names"));
            }
            return Ok(names);
        }
        Ok(DEFAULT_CATEGORIES[..self.m].iter().map(|s| s.to_string()).collect())
    }

    /// Canonical `key = value` listing; parsing it yields this config again.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("seed", &self.seed);
        line("S", &self.s);
        line("H", &self.h);
        line("W", &self.w);
        line("M", &self.m);
        if let Some(c) = &self.categories {
            line("categories", &c.join(", "));
        }
        if let Some(p) = &self.category_file {
            line("category_file", &p.display());
        }
        if let Some(p) = &self.vocab_file {
            line("vocab_file", &p.display());
        }
        line("D", &self.dim);
        line("enc_layers", &self.enc_layers);
        line("dec_layers", &self.dec_layers);
        line("heads", &self.heads);
        line("ffn_mult", &self.ffn_mult);
        line("prompt_max", &self.prompt_max);
        line("decoder_mask", &self.decoder_mask.name());
        line("lr", &self.optimizer.lr);
        line("wd", &self.optimizer.weight_decay);
        line("beta1", &self.optimizer.beta1);
        line("beta2", &self.optimizer.beta2);
        line("eps", &self.optimizer.eps);
        line("batch", &self.batch);
        line("steps", &self.steps);
        line("log_every", &self.log_every);
        line("K", &self.k);
        line("iterations", &self.iterations);
        line("patch", &self.patch);
        line("channels", &self.channels);
        out
    }
}
