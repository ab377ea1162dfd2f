//! Beam search over any left-to-right scorer, plus a checkpoint-backed
//! translator.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{EncodedSource, ModelError, TranslationModel};
use crate::numerics::threads;
use crate::subword::{SubwordError, SubwordVocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::training::{source_ids, Checkpoint};

pub const DEFAULT_BEAM_SIZE: usize = 6;
pub const DEFAULT_MAX_DECODE_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("vocabulary fingerprint {found} does not match the checkpoint's {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("invalid beam config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Generated tokens per hypothesis, EOS included.
    pub max_len: usize,
    /// Final scores are divided by `len^alpha`.
    pub length_norm_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: DEFAULT_MAX_DECODE_LEN,
            length_norm_alpha: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(DecodeError::InvalidConfig(
                "beam_size and max_len must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.length_norm_alpha) {
            return Err(DecodeError::InvalidConfig(
                "length_norm_alpha must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Next-token log-probabilities given a prefix that starts with BOS.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError>;

    /// Scores several equal-length prefixes at once.
    fn log_probs_batch(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        prefixes.iter().map(|p| self.log_probs(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids without BOS, ending in EOS when finished.
    pub ids: Vec<u32>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    /// `log_prob / len^alpha`.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Ids with the trailing EOS removed.
    pub fn content(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => &self.ids,
        }
    }
}

/// Higher score first, then lexicographically lower ids.
fn rank(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Beam search from BOS. PAD and BOS are never expanded; hypotheses that
/// emit EOS are frozen and compete with the surviving beams at the end.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    // prefixes include BOS
    let mut active: Vec<(Vec<u32>, f64)> = vec![(vec![BOS_ID], 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _ in 0..cfg.max_len {
        let prefixes: Vec<&[u32]> = active.iter().map(|(p, _)| p.as_slice()).collect();
        let dists = scorer.log_probs_batch(&prefixes)?;
        let mut candidates: Vec<(Vec<u32>, f64)> = Vec::new();
        for ((prefix, lp), dist) in active.iter().zip(dists) {
            for (id, &p) in dist.iter().enumerate() {
                let id = id as u32;
                if id == PAD_ID || id == BOS_ID || p == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = prefix.clone();
                next.push(id);
                candidates.push((next, lp + p));
            }
        }
        // same length everywhere, so raw sums order like normalized scores
        candidates.sort_by(|a, b| rank((a.1, &a.0), (b.1, &b.0)));
        candidates.truncate(cfg.beam_size);
        active.clear();
        for c in candidates {
            if c.0.last() == Some(&EOS_ID) {
                finished.push(c);
            } else {
                active.push(c);
            }
        }
        if active.is_empty() {
            break;
        }
    }

    let alpha = cfg.length_norm_alpha;
    let best = finished
        .into_iter()
        .map(|h| (h, true))
        .chain(active.into_iter().map(|h| (h, false)))
        .map(|((prefix, lp), done)| Hypothesis {
            score: normalized(lp, prefix.len() - 1, alpha),
            ids: prefix[1..].to_vec(),
            log_prob: lp,
            finished: done,
        })
        .min_by(|a, b| rank((a.score, &a.ids), (b.score, &b.ids)));
    Ok(best.unwrap_or(Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        score: 0.0,
        finished: false,
    }))
}

/// Step-by-step argmax, lowest id on ties.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis, DecodeError> {
    let mut prefix = vec![BOS_ID];
    let mut lp = 0.0;
    for _ in 0..max_len {
        let dist = scorer.log_probs(&prefix)?;
        let (id, p) = dist
            .iter()
            .enumerate()
            .filter(|&(i, _)| i as u32 != PAD_ID && i as u32 != BOS_ID)
            .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((i, p)),
            })
            .ok_or_else(|| DecodeError::InvalidConfig("scorer produced no candidates".into()))?;
        prefix.push(id as u32);
        lp += p;
        if id as u32 == EOS_ID {
            break;
        }
    }
    Ok(Hypothesis {
        finished: prefix.last() == Some(&EOS_ID),
        ids: prefix[1..].to_vec(),
        log_prob: lp,
        score: lp,
    })
}

/// A model with one encoded source. Ids beyond `limit` are never proposed.
pub struct ModelScorer<'a> {
    model: &'a TranslationModel<f32>,
    enc: EncodedSource<f32>,
    limit: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TranslationModel<f32>, src: &[u32], limit: usize) -> Result<Self, DecodeError> {
        Ok(Self {
            model,
            enc: model.encode_source(src)?,
            limit: limit.min(model.config().vocab_size),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError> {
        Ok(self.log_probs_batch(&[prefix])?.remove(0))
    }

    fn log_probs_batch(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        let mut out = self.model.next_log_probs_batch(&self.enc, prefixes)?;
        for lp in &mut out {
            lp.truncate(self.limit);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub text: String,
    pub hypothesis: Hypothesis,
}

/// A checkpoint paired with the vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Translator<'v> {
    model: TranslationModel<f32>,
    vocab: &'v SubwordVocabulary,
}

impl<'v> Translator<'v> {
    pub fn new(checkpoint: &Checkpoint, vocab: &'v SubwordVocabulary) -> Result<Self, DecodeError> {
        let found = vocab.fingerprint();
        if found != checkpoint.vocab_fingerprint {
            return Err(DecodeError::VocabMismatch {
                expected: checkpoint.vocab_fingerprint.clone(),
                found,
            });
        }
        let model = TranslationModel::from_parameters(checkpoint.config.clone(), checkpoint.params.clone())?;
        Ok(Self { model, vocab })
    }

    pub fn model(&self) -> &TranslationModel<f32> {
        &self.model
    }

    /// Decoding length is capped by the model's positional range.
    fn effective(&self, cfg: &BeamConfig) -> BeamConfig {
        BeamConfig {
            max_len: cfg.max_len.min(self.model.config().max_len),
            ..*cfg
        }
    }

    pub fn translate(&self, source: &str, cfg: &BeamConfig) -> Result<Translation, DecodeError> {
        cfg.validate()?;
        let src = source_ids(self.vocab, source, self.model.config().max_len);
        let scorer = ModelScorer::new(&self.model, &src, self.vocab.len())?;
        let hypothesis = beam_search(&scorer, &self.effective(cfg))?;
        let text = self.vocab.decode(hypothesis.content())?;
        Ok(Translation { text, hypothesis })
    }

    /// Translates every sentence, in input order. Sentences run in parallel
    /// when more than one numeric thread is configured.
    pub fn translate_corpus<S: AsRef<str> + Sync>(
        &self,
        sources: &[S],
        cfg: &BeamConfig,
    ) -> Result<Vec<String>, DecodeError> {
        let one = |s: &S| self.translate(s.as_ref(), cfg).map(|t| t.text);
        if threads() > 1 {
            sources.par_iter().map(one).collect()
        } else {
            sources.iter().map(one).collect()
        }
    }
}

/// Convenience wrapper: checks the fingerprint and translates one sentence.
pub fn translate_sentence(
    checkpoint: &Checkpoint,
    source: &str,
    vocab: &SubwordVocabulary,
    cfg: &BeamConfig,
) -> Result<Translation, DecodeError> {
    Translator::new(checkpoint, vocab)?.translate(source, cfg)
}

pub fn translate_corpus<S: AsRef<str> + Sync>(
    checkpoint: &Checkpoint,
    sources: &[S],
    vocab: &SubwordVocabulary,
    cfg: &BeamConfig,
) -> Result<Vec<String>, DecodeError> {
    Translator::new(checkpoint, vocab)?.translate_corpus(sources, cfg)
}
