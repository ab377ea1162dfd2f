//! `mtlab-ckpt v1` container: a text header (config as `key=value` lines,
//! vocabulary fingerprint, tensor index) followed by the parameters as one
//! little-endian `f32` blob.

use std::fs;
use std::path::Path;

use crate::model::{ModelConfig, Parameters, TranslationModel};
use crate::numerics::Tensor;

use super::TrainError;

const MAGIC: &str = "mtlab-ckpt v1";
const DATA_MARKER: &str = "data";

/// Model snapshot kept by checkpoint selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub dev_loss: f64,
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    pub vocab_fingerprint: String,
}

fn fmt_err(msg: impl Into<String>) -> TrainError {
    TrainError::Format(msg.into())
}

impl Checkpoint {
    pub fn model(&self) -> Result<TranslationModel<f32>, TrainError> {
        Ok(TranslationModel::from_parameters(
            self.config.clone(),
            self.params.clone(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut header = format!("{MAGIC}\n");
        let mut kv = |k: &str, v: String| header.push_str(&format!("{k}={v}\n"));
        kv("step", self.step.to_string());
        kv("dev_loss", format!("{:?}", self.dev_loss));
        kv("layers", c.layers.to_string());
        kv("heads", c.heads.to_string());
        kv("d_model", c.d_model.to_string());
        kv("d_ff", c.d_ff.to_string());
        kv("vocab_size", c.vocab_size.to_string());
        kv("max_len", c.max_len.to_string());
        kv("dropout", format!("{:?}", c.dropout));
        kv("label_smoothing", format!("{:?}", c.label_smoothing));
        kv("seed", c.seed.to_string());
        kv("vocab_fingerprint", self.vocab_fingerprint.clone());
        kv("tensors", self.params.len().to_string());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{name}\t{}\t{offset}\t{}\n", dims.join(","), t.numel()));
            offset += t.numel();
        }
        header.push_str(DATA_MARKER);
        header.push('\n');

        let mut out = header.into_bytes();
        out.reserve(offset * 4);
        for (_, t) in self.params.iter() {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, TrainError> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fmt_err("truncated checkpoint header"))?;
            let line =
                std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| fmt_err("checkpoint header is not UTF-8"))?;
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != MAGIC {
            return Err(fmt_err(format!("not a `{MAGIC}` checkpoint")));
        }
        let mut field = |key: &str| -> Result<String, TrainError> {
            let line = next_line()?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| fmt_err(format!("expected `{key}=`, found `{line}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T, TrainError> {
            v.parse().map_err(|_| fmt_err(format!("bad value for {key}: `{v}`")))
        }
        let step = num("step", field("step")?)?;
        let dev_loss: f64 = num("dev_loss", field("dev_loss")?)?;
        let config = ModelConfig {
            layers: num("layers", field("layers")?)?,
            heads: num("heads", field("heads")?)?,
            d_model: num("d_model", field("d_model")?)?,
            d_ff: num("d_ff", field("d_ff")?)?,
            vocab_size: num("vocab_size", field("vocab_size")?)?,
            max_len: num("max_len", field("max_len")?)?,
            dropout: num("dropout", field("dropout")?)?,
            label_smoothing: num("label_smoothing", field("label_smoothing")?)?,
            seed: num("seed", field("seed")?)?,
        };
        let vocab_fingerprint = field("vocab_fingerprint")?;
        let count: usize = num("tensors", field("tensors")?)?;

        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, dims, offset, len] = parts[..] else {
                return Err(fmt_err(format!("bad tensor index line `{line}`")));
            };
            let shape: Vec<usize> = dims
                .split(',')
                .map(|d| num("shape", d.to_string()))
                .collect::<Result<_, _>>()?;
            let offset: usize = num("offset", offset.to_string())?;
            let len: usize = num("len", len.to_string())?;
            index.push((name.to_string(), shape, offset, len));
        }
        if next_line()? != DATA_MARKER {
            return Err(fmt_err("missing data marker"));
        }
        let blob = &bytes[pos..];
        let total: usize = index.iter().map(|e| e.3).sum();
        if blob.len() != total * 4 {
            return Err(fmt_err(format!(
                "parameter blob holds {} bytes, index expects {}",
                blob.len(),
                total * 4
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape, offset, len) in index {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= total)
                .ok_or_else(|| fmt_err(format!("tensor {name} exceeds the blob")))?;
            let data = blob[offset * 4..end * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| fmt_err(format!("tensor {name}: {e}")))?
                .with_grad(true);
            entries.push((name, t));
        }
        if !dev_loss.is_finite() {
            return Err(fmt_err("checkpoint dev_loss is not finite"));
        }
        let ckpt = Checkpoint {
            step,
            dev_loss,
            config,
            params: Parameters::new(entries),
            vocab_fingerprint,
        };
        // rejects layouts that do not fit the config
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(|e| TrainError::Io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::Io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }
}
