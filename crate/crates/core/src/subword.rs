//! Subword vocabularies built by greedy pair merging.
//!
//! Every whitespace-delimited word is split into characters, the first of
//! which carries the word-initial marker `▁` (U+2581). Training repeatedly
//! merges the most frequent adjacent symbol pair. A vocabulary trained on one
//! language pair can be applied verbatim to another ("direct transfer"), in
//! which case words of the unseen language break into short pieces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::ParallelCorpus;

/// Word-initial marker.
pub const MARKER: char = '\u{2581}';

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_PIECES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

const HEADER: &str = "subword-vocab v1";
const MERGES_HEADER: &str = "#merges";

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("corpus has no characters to build a vocabulary from")]
    EmptyCorpus,
    #[error("vocab size {requested} is smaller than the {required} base pieces")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("malformed vocabulary file, line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("vocabulary i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn format_err(line: usize, reason: impl Into<String>) -> SubwordError {
    SubwordError::Format {
        line,
        reason: reason.into(),
    }
}

/// Ordered piece inventory plus ranked merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocabulary {
    pieces: Vec<String>,
    piece_ids: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    // (left, right) -> (rank, merged id)
    merge_table: HashMap<(u32, u32), (usize, u32)>,
}

/// Encoded sentence. `pieces` holds the surface string of each token, which
/// for `UNK` tokens is the original (unknown) character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
}

impl TokenizedSentence {
    /// Pieces joined by single spaces, the usual "tokenized text" view.
    pub fn to_spaced(&self) -> String {
        self.pieces.join(" ")
    }
}

fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

impl SubwordVocabulary {
    fn from_parts(pieces: Vec<String>, merges: Vec<(u32, u32)>) -> Self {
        let piece_ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        let merge_table = merges
            .iter()
            .enumerate()
            .map(|(rank, &(l, r))| {
                let merged = format!("{}{}", pieces[l as usize], pieces[r as usize]);
                ((l, r), (rank, piece_ids[&merged]))
            })
            .collect();
        Self {
            pieces,
            piece_ids,
            merges,
            merge_table,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    /// Merge rules as `(left, right)` piece strings, in rank order.
    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.merges
            .iter()
            .map(|&(l, r)| (self.pieces[l as usize].as_str(), self.pieces[r as usize].as_str()))
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Characters the vocabulary covers without falling back to `UNK`.
    pub fn char_inventory(&self) -> BTreeSet<char> {
        self.pieces[NUM_SPECIALS..]
            .iter()
            .filter_map(|p| {
                let mut it = p.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) if c != MARKER => Some(c),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn longest_piece_chars(&self) -> usize {
        self.pieces[NUM_SPECIALS..]
            .iter()
            .map(|p| p.chars().filter(|&c| c != MARKER).count())
            .max()
            .unwrap_or(0)
    }

    /// Splits on whitespace, prefixes each word with the marker and applies
    /// merges lowest rank first. Unknown characters become `UNK`.
    pub fn encode(&self, text: &str) -> TokenizedSentence {
        let mut out = TokenizedSentence {
            ids: Vec::new(),
            pieces: Vec::new(),
        };
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut TokenizedSentence) {
        // (id, surface); id is UNK for characters outside the inventory.
        let mut symbols: Vec<(u32, String)> = word
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let surface = if i == 0 { format!("{MARKER}{c}") } else { c.to_string() };
                let id = match c {
                    MARKER => UNK_ID,
                    _ => self.id_of(&surface).unwrap_or(UNK_ID),
                };
                (id, surface)
            })
            .collect();

        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0].0, w[1].0)).map(|&(rank, _)| rank))
                .min();
            let Some(rank) = best else { break };
            let (left, right) = self.merges[rank];
            let merged_id = self.merge_table[&(left, right)].1;
            let mut merged = Vec::with_capacity(symbols.len());
            let mut iter = symbols.into_iter().peekable();
            while let Some(sym) = iter.next() {
                if sym.0 == left && iter.peek().is_some_and(|next| next.0 == right) {
                    let next = iter.next().unwrap();
                    merged.push((merged_id, sym.1 + &next.1));
                } else {
                    merged.push(sym);
                }
            }
            symbols = merged;
        }

        for (id, surface) in symbols {
            out.ids.push(id);
            out.pieces.push(surface);
        }
    }

    /// Maps ids back to text. `PAD`/`BOS`/`EOS` are dropped and `UNK`
    /// renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String, SubwordError> {
        let mut text = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(SubwordError::UnknownId(id))?;
            match id {
                UNK_ID => text.push_str(piece),
                id if is_special(id) => {}
                _ => text.push_str(piece),
            }
        }
        Ok(detokenize(&text))
    }

    /// Decodes from surface pieces, which restores unknown characters too.
    pub fn decode_tokens(&self, tokens: &TokenizedSentence) -> String {
        let mut text = String::new();
        for (id, piece) in tokens.ids.iter().zip(&tokens.pieces) {
            if is_special(*id) && *id != UNK_ID {
                continue;
            }
            text.push_str(piece);
        }
        detokenize(&text)
    }

    /// Serializes to the `subword-vocab v1` text format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER} {}", self.pieces.len()).unwrap();
        for (id, piece) in self.pieces.iter().enumerate() {
            writeln!(out, "{piece}\t{id}").unwrap();
        }
        writeln!(out, "{MERGES_HEADER}").unwrap();
        for (rank, (l, r)) in self.merges().enumerate() {
            writeln!(out, "{l}\t{r}\t{rank}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SubwordError> {
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| format_err(1, "empty file"))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| format_err(1, format!("expected `{HEADER} <size>`")))?;
        if size < NUM_SPECIALS {
            return Err(format_err(1, "fewer pieces than special tokens"));
        }

        let mut pieces = Vec::with_capacity(size);
        for expected in 0..size {
            let (no, line) = lines
                .next()
                .ok_or_else(|| format_err(expected + 2, "missing piece line"))?;
            let (piece, id) = line
                .split_once('\t')
                .ok_or_else(|| format_err(no, "expected `piece<TAB>id`"))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(format_err(no, format!("expected id {expected}")));
            }
            if piece.is_empty() {
                return Err(format_err(no, "empty piece"));
            }
            if SPECIAL_PIECES.get(expected).is_some_and(|&sp| piece != sp) {
                return Err(format_err(no, "special tokens must occupy ids 0..4"));
            }
            pieces.push(piece.to_string());
        }
        let unique: HashSet<&String> = pieces.iter().collect();
        if unique.len() != pieces.len() {
            return Err(format_err(1, "duplicate piece"));
        }
        let ids: HashMap<&str, u32> = pieces.iter().enumerate().map(|(i, p)| (p.as_str(), i as u32)).collect();

        match lines.next() {
            Some((_, MERGES_HEADER)) => {}
            other => {
                let no = other.map_or(size + 2, |(no, _)| no);
                return Err(format_err(no, format!("expected `{MERGES_HEADER}`")));
            }
        }

        let mut merges = Vec::new();
        for (no, line) in lines {
            if line.is_empty() {
                // only the final newline may produce an empty line
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(l), Some(r), Some(rank), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(format_err(no, "expected `left<TAB>right<TAB>rank`"));
            };
            if rank.parse::<usize>().ok() != Some(merges.len()) {
                return Err(format_err(no, format!("expected rank {}", merges.len())));
            }
            let (Some(&li), Some(&ri)) = (ids.get(l), ids.get(r)) else {
                return Err(format_err(no, "merge refers to an unknown piece"));
            };
            if !ids.contains_key(format!("{l}{r}").as_str()) {
                return Err(format_err(no, "merged piece missing from inventory"));
            }
            merges.push((li, ri));
        }
        let vocab = Self::from_parts(pieces, merges);
        if vocab.to_file_string() != text {
            return Err(format_err(0, "file is not in canonical form"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let bytes = fs::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| format_err(0, "not valid UTF-8"))?;
        Self::parse(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded. Two vocabularies
    /// share a fingerprint exactly when their files are identical.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn detokenize(text: &str) -> String {
    text.replace(MARKER, " ").trim().to_string()
}

/// Base inventory: every character seen in training, both bare and with the
/// word-initial marker, in code-point order.
fn base_pieces(chars: &BTreeSet<char>) -> Vec<String> {
    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(chars.iter().map(|c| c.to_string()));
    pieces.extend(chars.iter().map(|c| format!("{MARKER}{c}")));
    pieces
}

/// Number of pieces a vocabulary over `corpus` has before any merge.
pub fn base_vocab_size(corpus: &ParallelCorpus) -> usize {
    NUM_SPECIALS + 2 * corpus_chars(corpus).len()
}

fn corpus_chars(corpus: &ParallelCorpus) -> BTreeSet<char> {
    corpus
        .source()
        .iter()
        .chain(corpus.target())
        .flat_map(|s| s.chars())
        .filter(|c| !c.is_whitespace() && *c != MARKER)
        .collect()
}

/// Trains a vocabulary over the words of both sides of `corpus`.
///
/// The most frequent adjacent pair is merged first; ties go to the
/// lexicographically smallest merged string (then the smallest left piece).
/// Training stops once `vocab_size` pieces exist or no pair occurs twice.
pub fn train_vocab(corpus: &ParallelCorpus, vocab_size: usize) -> Result<SubwordVocabulary, SubwordError> {
    let chars = corpus_chars(corpus);
    if chars.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let mut pieces = base_pieces(&chars);
    if vocab_size < pieces.len() {
        return Err(SubwordError::VocabTooSmall {
            requested: vocab_size,
            required: pieces.len(),
        });
    }
    let mut ids: HashMap<String, u32> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();

    let mut word_freq: BTreeMap<&str, i64> = BTreeMap::new();
    for line in corpus.source().iter().chain(corpus.target()) {
        for w in line.split_whitespace() {
            *word_freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, i64)> = word_freq
        .into_iter()
        .filter_map(|(w, f)| {
            let syms: Option<Vec<u32>> = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let s = if i == 0 { format!("{MARKER}{c}") } else { c.to_string() };
                    ids.get(&s).copied()
                })
                .collect();
            // words containing the marker character itself are not trainable
            syms.map(|s| (s, f))
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += f;
            pair_words.entry((w[0], w[1])).or_default().insert(wi);
        }
    }

    type Entry = (i64, Reverse<(String, String)>, (u32, u32));
    let entry = |pieces: &[String], pair: (u32, u32), count: i64| -> Entry {
        let l = &pieces[pair.0 as usize];
        let r = &pieces[pair.1 as usize];
        (count, Reverse((format!("{l}{r}"), l.clone())), pair)
    };
    let mut heap: BinaryHeap<Entry> = pair_counts.iter().map(|(&p, &c)| entry(&pieces, p, c)).collect();

    let mut merges = Vec::new();
    while pieces.len() < vocab_size {
        let Some((count, Reverse((merged, _)), pair)) = heap.pop() else {
            break;
        };
        if pair_counts.get(&pair).copied().unwrap_or(0) != count {
            continue; // stale
        }
        if count < 2 {
            break;
        }
        let new_id = match ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                pieces.push(merged.clone());
                ids.insert(merged, id);
                id
            }
        };
        merges.push(pair);

        let mut touched: Vec<usize> = pair_words.remove(&pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for wi in touched {
            let (syms, f) = &mut words[wi];
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.get_mut(&p).unwrap() -= *f;
                changed.insert(p);
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_insert(0) += *f;
                pair_words.entry(p).or_default().insert(wi);
                changed.insert(p);
            }
        }
        let mut changed: Vec<_> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            let c = pair_counts[&p];
            if c > 0 {
                heap.push(entry(&pieces, p, c));
            }
        }
    }

    Ok(SubwordVocabulary::from_parts(pieces, merges))
}

/// Tokenization statistics of one corpus under one vocabulary.
///
/// Specials are excluded and the marker is stripped from every piece before
/// measuring. Token length is token-weighted: total characters over total
/// tokens across the whole side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizationStats {
    pub sentences: usize,
    pub avg_sentence_length_source: f64,
    pub avg_sentence_length_target: f64,
    pub avg_token_length_source: f64,
    pub avg_token_length_target: f64,
}

/// Cleaned token lengths (in characters) for one sentence.
pub fn cleaned_token_lengths(vocab: &SubwordVocabulary, sentence: &str) -> Vec<usize> {
    let toks = vocab.encode(sentence);
    toks.ids
        .iter()
        .zip(&toks.pieces)
        .filter(|(&id, _)| !matches!(id, PAD_ID | BOS_ID | EOS_ID))
        .map(|(_, p)| p.chars().filter(|&c| c != MARKER).count())
        .collect()
}

fn side_stats(vocab: &SubwordVocabulary, side: &[String]) -> (f64, f64) {
    let (mut tokens, mut chars) = (0usize, 0usize);
    for s in side {
        let lens = cleaned_token_lengths(vocab, s);
        tokens += lens.len();
        chars += lens.iter().sum::<usize>();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(tokens, side.len()), ratio(chars, tokens))
}

pub fn tokenization_stats(corpus: &ParallelCorpus, vocab: &SubwordVocabulary) -> TokenizationStats {
    let (sl_src, tl_src) = side_stats(vocab, corpus.source());
    let (sl_tgt, tl_tgt) = side_stats(vocab, corpus.target());
    TokenizationStats {
        sentences: corpus.len(),
        avg_sentence_length_source: sl_src,
        avg_sentence_length_target: sl_tgt,
        avg_token_length_source: tl_src,
        avg_token_length_target: tl_tgt,
    }
}
