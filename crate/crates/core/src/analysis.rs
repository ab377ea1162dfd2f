//! Sentence/word length statistics and prefix-based variant counting.
//! Words are whitespace-delimited and compared byte-exactly; nothing is
//! normalized or stripped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::metrics::MetricError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthStats {
    /// Words per sentence.
    pub avg_sent_len_gold: f64,
    pub avg_sent_len_pred: f64,
    /// Characters per word, weighted by word count.
    pub avg_word_len_gold: f64,
    pub avg_word_len_pred: f64,
}

fn side<S: AsRef<str>>(sentences: &[S]) -> (f64, f64) {
    let (mut words, mut chars) = (0usize, 0usize);
    for s in sentences {
        for w in s.as_ref().split_whitespace() {
            words += 1;
            chars += w.chars().count();
        }
    }
    let per = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (per(words, sentences.len()), per(chars, words))
}

pub fn length_stats<G: AsRef<str>, P: AsRef<str>>(gold: &[G], pred: &[P]) -> Result<LengthStats, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch {
            references: gold.len(),
            hypotheses: pred.len(),
        });
    }
    let (sg, wg) = side(gold);
    let (sp, wp) = side(pred);
    Ok(LengthStats {
        avg_sent_len_gold: sg,
        avg_sent_len_pred: sp,
        avg_word_len_gold: wg,
        avg_word_len_pred: wp,
    })
}

impl LengthStats {
    pub fn to_table(&self) -> String {
        format!(
            "{:<16}{:>10}{:>10}\n{:<16}{:>10.2}{:>10.2}\n{:<16}{:>10.2}{:>10.2}\n",
            "",
            "gold",
            "pred",
            "sentence length",
            self.avg_sent_len_gold,
            self.avg_sent_len_pred,
            "word length",
            self.avg_word_len_gold,
            self.avg_word_len_pred,
        )
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "avg_sent_len_gold\t{:.4}\navg_sent_len_pred\t{:.4}\navg_word_len_gold\t{:.4}\navg_word_len_pred\t{:.4}\n",
            self.avg_sent_len_gold, self.avg_sent_len_pred, self.avg_word_len_gold, self.avg_word_len_pred
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantReport {
    pub stem: String,
    /// Always the sum of `matched_forms`.
    pub count: usize,
    pub matched_forms: BTreeMap<String, usize>,
}

/// Counts words that start with `stem`. An empty stem matches nothing.
pub fn variant_count<S: AsRef<str>>(sentences: &[S], stem: &str) -> VariantReport {
    let mut matched_forms = BTreeMap::new();
    if !stem.is_empty() {
        for w in sentences.iter().flat_map(|s| s.as_ref().split_whitespace()) {
            if w.starts_with(stem) {
                *matched_forms.entry(w.to_string()).or_insert(0) += 1;
            }
        }
    }
    VariantReport {
        stem: stem.to_string(),
        count: matched_forms.values().sum(),
        matched_forms,
    }
}

impl VariantReport {
    /// Forms sorted by descending count, then bytes.
    fn ranked(&self) -> Vec<(&str, usize)> {
        let mut forms: Vec<(&str, usize)> = self.matched_forms.iter().map(|(f, &c)| (f.as_str(), c)).collect();
        forms.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        forms
    }

    pub fn to_table(&self) -> String {
        let width = self
            .matched_forms
            .keys()
            .map(|f| f.chars().count())
            .chain([self.stem.chars().count() + 2, 5])
            .max()
            .unwrap_or(5);
        let mut out = format!("stem {:?}: {} occurrences\n", self.stem, self.count);
        for (form, c) in self.ranked() {
            let pad = width - form.chars().count();
            let _ = writeln!(out, "  {form}{}  {c:>6}", " ".repeat(pad));
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("stem\t{}\ncount\t{}\n", self.stem, self.count);
        for (form, c) in self.ranked() {
            let _ = writeln!(out, "form\t{form}\t{c}");
        }
        out
    }
}
