//! Append-only run directories: `manifest.txt` (written before the first
//! training step), `vocab.txt`, `best.ckpt` and `train_log.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";
pub const VOCAB: &str = "vocab.txt";
pub const BEST: &str = "best.ckpt";
pub const STAGE1: &str = "stage1.ckpt";
pub const LOG: &str = "train_log.tsv";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Refuses directories that already hold any run artifact.
    pub fn create(path: &Path) -> Result<Self> {
        for name in [MANIFEST, VOCAB, BEST, STAGE1, LOG] {
            if path.join(name).exists() {
                bail!(
                    "{} already holds a run ({name} exists); runs are never overwritten",
                    path.display()
                );
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Metadata goes in `#` comments so the manifest doubles as a config file.
    pub fn write_manifest(&self, subcommand: &str, inputs: &[(&str, &Path)], config: &str) -> Result<()> {
        let mut text = String::from("# mtlab run manifest\n");
        let _ = writeln!(text, "# tool_version: {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "# subcommand: {subcommand}");
        let _ = writeln!(text, "# run_dir: {}", self.path.display());
        for (label, p) in inputs {
            let _ = writeln!(text, "# input {label}: {} sha256={}", p.display(), sha256_file(p)?);
        }
        text.push_str(config);
        let path = self.file(MANIFEST);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
