//! `key = value` run configuration. Later sources override earlier ones:
//! built-in defaults, then the config file, then command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mtlab::{ModelConfig, TrainConfig};

/// Keys that shape the network; ignored when a parent checkpoint fixes them.
pub const MODEL_KEYS: [&str; 7] = [
    "layers",
    "heads",
    "d_model",
    "d_ff",
    "max_len",
    "dropout",
    "label_smoothing",
];

pub const TRAIN_KEYS: [&str; 7] = [
    "max_steps",
    "validate_every",
    "batch_size",
    "learning_rate",
    "warmup_steps",
    "grad_clip",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// `(key, value)` pairs in file order, comments and blank lines dropped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, found `{line}`", no + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("invalid value `{value}` for `{key}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "layers" => m.layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "d_model" => m.d_model = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "label_smoothing" => m.label_smoothing = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "validate_every" => t.validate_every = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "seed" => {
                t.seed = parse(key, value)?;
                m.seed = t.seed;
            }
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Applies a config file. With `model_fixed`, model keys are skipped
    /// and reported back.
    pub fn apply_file(&mut self, path: &Path, model_fixed: bool) -> Result<Vec<String>> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut skipped = Vec::new();
        for (k, v) in parse_pairs(&text).with_context(|| format!("in config {}", path.display()))? {
            if model_fixed && MODEL_KEYS.contains(&k.as_str()) {
                skipped.push(k);
                continue;
            }
            self.set(&k, &v)?;
        }
        Ok(skipped)
    }

    pub fn value(&self, key: &str) -> String {
        let (m, t) = (&self.model, &self.train);
        match key {
            "layers" => m.layers.to_string(),
            "heads" => m.heads.to_string(),
            "d_model" => m.d_model.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "max_len" => m.max_len.to_string(),
            "dropout" => format!("{:?}", m.dropout),
            "label_smoothing" => format!("{:?}", m.label_smoothing),
            "max_steps" => t.max_steps.to_string(),
            "validate_every" => t.validate_every.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => format!("{:?}", t.learning_rate),
            "warmup_steps" => t.warmup_steps.to_string(),
            "grad_clip" => format!("{:?}", t.grad_clip),
            "seed" => t.seed.to_string(),
            other => panic!("no config key `{other}`"),
        }
    }

    /// Resolved values as config-file lines.
    pub fn render(&self, include_model: bool) -> String {
        let mut out = String::new();
        let keys = include_model
            .then_some(MODEL_KEYS.as_slice())
            .into_iter()
            .flatten()
            .chain(TRAIN_KEYS.iter());
        for k in keys {
            let _ = writeln!(out, "{k} = {}", self.value(k));
        }
        out
    }
}
