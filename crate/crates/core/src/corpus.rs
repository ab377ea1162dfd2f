//! Line-aligned parallel corpora and the two shared-task train/dev regimes.
//!
//! Files are plain UTF-8, one sentence per line, LF endings; the source and
//! target files of a pair are aligned by line number.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default share of the dev split folded into train for Track One.
pub const DEFAULT_TRACK_ONE_FRACTION: f64 = 0.9;

/// File names used inside a corpus directory.
pub const SOURCE_FILE: &str = "src.txt";
pub const TARGET_FILE: &str = "tgt.txt";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line count mismatch: {source_path} has {source_lines} lines, {target_path} has {target_lines}")]
    LineCountMismatch {
        source_path: PathBuf,
        target_path: PathBuf,
        source_lines: usize,
        target_lines: usize,
    },
    #[error("{path} is not valid UTF-8 (byte offset {offset})")]
    InvalidEncoding { path: PathBuf, offset: usize },
    #[error("sentence {index} on the {side} side contains a line break")]
    LineBreak { side: &'static str, index: usize },
    #[error("source has {source_len} sentences but target has {target_len}")]
    Misaligned { source_len: usize, target_len: usize },
    #[error("fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("i/o error on {path}: {err}")]
    Io {
        path: PathBuf,
        #[source]
        err: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |err| CorpusError::Io {
        path: path.to_path_buf(),
        err,
    }
}

/// Sentence pairs aligned by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pair_id: String,
    source: Vec<String>,
    target: Vec<String>,
}

impl ParallelCorpus {
    pub fn new(pair_id: impl Into<String>, source: Vec<String>, target: Vec<String>) -> Result<Self, CorpusError> {
        if source.len() != target.len() {
            return Err(CorpusError::Misaligned {
                source_len: source.len(),
                target_len: target.len(),
            });
        }
        for (side, lines) in [("source", &source), ("target", &target)] {
            if let Some(index) = lines.iter().position(|s| s.contains(['\n', '\r'])) {
                return Err(CorpusError::LineBreak { side, index });
            }
        }
        Ok(Self {
            pair_id: pair_id.into(),
            source,
            target,
        })
    }

    /// Builds a corpus from `(source, target)` pairs.
    pub fn from_pairs<S: AsRef<str>, T: AsRef<str>>(
        pair_id: impl Into<String>,
        pairs: impl IntoIterator<Item = (S, T)>,
    ) -> Result<Self, CorpusError> {
        let (source, target) = pairs
            .into_iter()
            .map(|(s, t)| (s.as_ref().to_string(), t.as_ref().to_string()))
            .unzip();
        Self::new(pair_id, source, target)
    }

    pub fn empty(pair_id: impl Into<String>) -> Self {
        Self {
            pair_id: pair_id.into(),
            source: Vec::new(),
            target: Vec::new(),
        }
    }

    pub fn pair_id(&self) -> &str {
        &self.pair_id
    }

    pub fn source(&self) -> &[String] {
        &self.source
    }

    pub fn target(&self) -> &[String] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| (s.as_str(), t.as_str()))
    }

    /// Selects pairs by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pair_id: self.pair_id.clone(),
            source: indices.iter().map(|&i| self.source[i].clone()).collect(),
            target: indices.iter().map(|&i| self.target[i].clone()).collect(),
        }
    }

    /// Appends all pairs of `other` after the pairs of `self`.
    pub fn concat(&self, other: &ParallelCorpus) -> Self {
        let mut out = self.clone();
        out.source.extend(other.source.iter().cloned());
        out.target.extend(other.target.iter().cloned());
        out
    }

    /// Writes both sides, one sentence per line with a trailing LF.
    pub fn save(&self, source_path: &Path, target_path: &Path) -> Result<(), CorpusError> {
        fs::write(source_path, join_lines(&self.source)).map_err(io_err(source_path))?;
        fs::write(target_path, join_lines(&self.target)).map_err(io_err(target_path))?;
        Ok(())
    }

    /// Writes `src.txt` / `tgt.txt` into `dir`, creating it if needed.
    pub fn save_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.save(&dir.join(SOURCE_FILE), &dir.join(TARGET_FILE))
    }
}

fn join_lines(lines: &[String]) -> String {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Reads one side of a corpus: UTF-8 check, LF split, trailing whitespace
/// stripped, a final empty line (the newline artifact) dropped.
pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::InvalidEncoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    let mut lines: Vec<String> = text.split('\n').map(|l| l.trim_end().to_string()).collect();
    if text.is_empty() || text.ends_with('\n') {
        lines.pop();
    }
    Ok(lines)
}

pub fn load_parallel(source_path: &Path, target_path: &Path, pair_id: &str) -> Result<ParallelCorpus, CorpusError> {
    let source = read_lines(source_path)?;
    let target = read_lines(target_path)?;
    if source.len() != target.len() {
        return Err(CorpusError::LineCountMismatch {
            source_path: source_path.to_path_buf(),
            target_path: target_path.to_path_buf(),
            source_lines: source.len(),
            target_lines: target.len(),
        });
    }
    ParallelCorpus::new(pair_id, source, target)
}

/// Loads `src.txt` / `tgt.txt` from a corpus directory; the pair id is the
/// directory name.
pub fn load_dir(dir: &Path) -> Result<ParallelCorpus, CorpusError> {
    let pair_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_parallel(&dir.join(SOURCE_FILE), &dir.join(TARGET_FILE), &pair_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    /// Part of the dev split is folded into train.
    One,
    /// Train contains no dev data.
    Two,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub track: Track,
}

/// Number of dev pairs moved to train: `floor(fraction * len)`.
///
/// A 1e-9 slack absorbs products such as `0.29 * 100 = 28.999999999999996`.
pub fn moved_count(fraction: f64, dev_len: usize) -> usize {
    let exact = fraction * dev_len as f64;
    ((exact + 1e-9).floor() as usize).min(dev_len)
}

/// Track One: a seeded uniform shuffle of dev picks `floor(fraction * |dev|)`
/// pairs that are appended to train; the rest stays in dev. Both parts keep
/// their original relative order.
pub fn make_track_one(
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    fraction: f64,
    seed: u64,
) -> Result<(ParallelCorpus, ParallelCorpus), CorpusError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let k = moved_count(fraction, dev.len());
    let mut order: Vec<usize> = (0..dev.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (moved, kept) = order.split_at_mut(k);
    moved.sort_unstable();
    kept.sort_unstable();
    let new_train = train.concat(&dev.select(moved));
    let new_dev = dev.select(kept);
    Ok((new_train, new_dev))
}

/// Track Two: train and dev pass through unchanged.
pub fn make_track_two(train: &ParallelCorpus, dev: &ParallelCorpus) -> (ParallelCorpus, ParallelCorpus) {
    (train.clone(), dev.clone())
}

/// Assembles a [`SplitSet`] for the requested track.
pub fn build_split(
    track: Track,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    test: &ParallelCorpus,
    fraction: f64,
    seed: u64,
) -> Result<SplitSet, CorpusError> {
    let (train, dev) = match track {
        Track::One => make_track_one(train, dev, fraction, seed)?,
        Track::Two => make_track_two(train, dev),
    };
    Ok(SplitSet {
        train,
        dev,
        test: test.clone(),
        track,
    })
}
