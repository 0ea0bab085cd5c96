//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::WindowGradient;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Sentences per batch.
    pub batch_size: usize,
    pub warmup: u64,
    pub steps: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Use the mean of the kept checkpoints as the final model.
    pub average_checkpoints: bool,
    /// Validation sentences decoded at each log line (0 disables).
    pub valid_sentences: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            warmup: 400,
            steps: 2000,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            log_every: 100,
            checkpoint_every: 500,
            keep_checkpoints: 5,
            average_checkpoints: true,
            valid_sentences: 200,
            beam: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, warmup, log_every and checkpoint_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0,1)", self.label_smoothing)));
        }
        if self.keep_checkpoints == 0 || self.beam == 0 {
            return Err(Error::Config("keep_checkpoints and beam must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "d_ff",
        "heads",
        "layers",
        "src_vocab",
        "tgt_vocab",
        "dropout",
        "max_len",
        "variant",
        "lambda",
        "window_half_width",
        "window_sigma",
        "window_gradient",
        "seed",
        "batch_size",
        "warmup",
        "steps",
        "lr_scale",
        "label_smoothing",
        "log_every",
        "checkpoint_every",
        "keep_checkpoints",
        "average_checkpoints",
        "valid_sentences",
        "beam",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "src_vocab" => m.src_vocab = parse(key, value)?,
            "tgt_vocab" => m.tgt_vocab = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "variant" => m.variant = value.parse::<Variant>()?,
            "lambda" => m.lambda = parse(key, value)?,
            "window_half_width" => m.window.half_width = parse(key, value)?,
            "window_sigma" => m.window.sigma = parse(key, value)?,
            "window_gradient" => {
                m.window.gradient = match value {
                    "exact" => WindowGradient::Exact,
                    "smooth" => WindowGradient::Smooth,
                    _ => return Err(Error::Config(format!("window_gradient must be exact or smooth, got {value:?}"))),
                }
            }
            "seed" => m.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "warmup" => t.warmup = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "lr_scale" => t.lr_scale = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "keep_checkpoints" => t.keep_checkpoints = parse(key, value)?,
            "average_checkpoints" => t.average_checkpoints = parse_bool(key, value)?,
            "valid_sentences" => t.valid_sentences = parse(key, value)?,
            "beam" => t.beam = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved configuration in the same `key = value` syntax.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", m.d_model.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("heads", m.heads.to_string());
        kv("layers", m.layers.to_string());
        kv("src_vocab", m.src_vocab.to_string());
        kv("tgt_vocab", m.tgt_vocab.to_string());
        kv("dropout", m.dropout.to_string());
        kv("max_len", m.max_len.to_string());
        kv("variant", m.variant.to_string());
        kv("lambda", m.lambda.to_string());
        kv("window_half_width", m.window.half_width.to_string());
        kv("window_sigma", m.window.sigma.to_string());
        kv(
            "window_gradient",
            match m.window.gradient {
                WindowGradient::Exact => "exact",
                WindowGradient::Smooth => "smooth",
            }
            .to_string(),
        );
        kv("seed", m.seed.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("warmup", t.warmup.to_string());
        kv("steps", t.steps.to_string());
        kv("lr_scale", t.lr_scale.to_string());
        kv("label_smoothing", t.label_smoothing.to_string());
        kv("log_every", t.log_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("keep_checkpoints", t.keep_checkpoints.to_string());
        kv("average_checkpoints", t.average_checkpoints.to_string());
        kv("valid_sentences", t.valid_sentences.to_string());
        kv("beam", t.beam.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let c = RunConfig::parse("# tiny\nd_model = 32\nvariant = exgre  # reorder\nlambda=0.6\n\n").unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.variant, Variant::Exgre);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("d_model 32").is_err());
        assert!(RunConfig::parse("d_model = many").is_err());
        assert!(RunConfig::parse("window_gradient = fuzzy").is_err());
    }
}
