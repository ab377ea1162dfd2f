//! Corpus BLEU over whitespace tokens and sentence-averaged chrF.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use thiserror::Error;

pub const BLEU_MAX_N: usize = 4;
pub const CHRF_CHAR_N: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{references} references but {hypotheses} hypotheses")]
    LengthMismatch { references: usize, hypotheses: usize },
    #[error("no sentences to score")]
    EmptyInput,
}

fn check<A, B>(refs: &[A], hyps: &[B]) -> Result<(), MetricError> {
    if refs.len() != hyps.len() {
        return Err(MetricError::LengthMismatch {
            references: refs.len(),
            hypotheses: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis total for one order.
fn clipped<T: Eq + Hash + Clone>(reference: &[T], hypothesis: &[T], n: usize) -> (usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, hypothesis.len().saturating_sub(n - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub bleu: f64,
    /// Possibly smoothed precision per order.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus BLEU. Orders above 1 with no match use `1 / (total + 1)`.
/// An all-empty hypothesis side scores 0 with a brevity penalty of 0.
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(
    references: &[R],
    hypotheses: &[H],
    max_n: usize,
) -> Result<BleuScore, MetricError> {
    check(references, hypotheses)?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=max_n {
            let (m, t) = clipped(&r, &h, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| match (matches[i], totals[i]) {
            (0, t) if i > 0 => 1.0 / (t as f64 + 1.0),
            (_, 0) => 0.0,
            (m, t) => m as f64 / t as f64,
        })
        .collect();
    let brevity_penalty = match hyp_len {
        0 => 0.0,
        c if c > ref_len => 1.0,
        c => (1.0 - ref_len as f64 / c as f64).exp(),
    };
    let bleu = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Character n-gram precision and recall averaged over orders, whitespace
/// removed. Orders longer than both strings are left out of the mean; two
/// empty strings are a perfect match.
pub fn chrf_precision_recall(reference: &str, hypothesis: &str, char_n: usize) -> (f64, f64) {
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let h: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let longest = r.len().max(h.len());
    if longest == 0 {
        return (1.0, 1.0);
    }
    let orders = char_n.min(longest);
    let (mut p, mut rc) = (0.0, 0.0);
    for n in 1..=orders {
        let (m, h_total) = clipped(&r, &h, n);
        let r_total = r.len().saturating_sub(n - 1);
        if h_total > 0 {
            p += m as f64 / h_total as f64;
        }
        if r_total > 0 {
            rc += m as f64 / r_total as f64;
        }
    }
    (p / orders as f64, rc / orders as f64)
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

pub fn sentence_chrf(reference: &str, hypothesis: &str, char_n: usize, beta: f64) -> f64 {
    let (p, r) = chrf_precision_recall(reference, hypothesis, char_n);
    f_beta(p, r, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChrfScore {
    /// Mean of the sentence scores.
    pub chrf: f64,
    pub per_sentence: Vec<f64>,
}

pub fn chrf<R: AsRef<str>, H: AsRef<str>>(
    references: &[R],
    hypotheses: &[H],
    char_n: usize,
    beta: f64,
) -> Result<ChrfScore, MetricError> {
    check(references, hypotheses)?;
    let per_sentence: Vec<f64> = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| sentence_chrf(r.as_ref(), h.as_ref(), char_n, beta))
        .collect();
    let chrf = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(ChrfScore { chrf, per_sentence })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub bleu: f64,
    pub chrf: f64,
    pub per_sentence_chrf: Vec<f64>,
    pub ngram_precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// BLEU-4 and chrF (β = 2, six character orders).
pub fn evaluate<R: AsRef<str>, H: AsRef<str>>(
    references: &[R],
    hypotheses: &[H],
) -> Result<EvaluationReport, MetricError> {
    let b = bleu(references, hypotheses, BLEU_MAX_N)?;
    let c = chrf(references, hypotheses, CHRF_CHAR_N, CHRF_BETA)?;
    Ok(EvaluationReport {
        bleu: b.bleu,
        chrf: c.chrf,
        per_sentence_chrf: c.per_sentence,
        ngram_precisions: b.precisions,
        brevity_penalty: b.brevity_penalty,
        hyp_len: b.hyp_len,
        ref_len: b.ref_len,
    })
}

impl EvaluationReport {
    pub fn to_human(&self) -> String {
        let precisions: Vec<String> = self.ngram_precisions.iter().map(|p| format!("{:.4}", p)).collect();
        format!(
            "BLEU = {:.3} (precisions {}, BP = {:.4}, hyp_len = {}, ref_len = {})\nchrF = {:.4}\n",
            self.bleu,
            precisions.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len,
            self.chrf
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("BLEU\t{:.4}\nchrF\t{:.4}\n", self.bleu, self.chrf);
        for (i, p) in self.ngram_precisions.iter().enumerate() {
            let _ = writeln!(out, "precision_{}\t{:.6}", i + 1, p);
        }
        let _ = writeln!(out, "brevity_penalty\t{:.6}", self.brevity_penalty);
        let _ = writeln!(out, "hyp_len\t{}", self.hyp_len);
        let _ = writeln!(out, "ref_len\t{}", self.ref_len);
        out
    }
}
