//! Seeded character-mapping task pairs for transfer experiments.
//!
//! Every pair shares one source side: sentences drawn from a fixed random
//! lexicon. The parent target spells each word through a letter permutation;
//! the child permutation agrees with it except on `changed_letters` letters,
//! which are rotated among themselves. An intermediate pair uses the child
//! mapping on shorter sentences, as an easier first curriculum stage.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ParallelCorpus;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub alphabet: String,
    pub lexicon_size: usize,
    /// Inclusive letter-count range of lexicon words.
    pub word_len: (usize, usize),
    /// Inclusive word-count range of sentences.
    pub sentence_words: (usize, usize),
    pub parent_train: usize,
    pub parent_dev: usize,
    pub child_train: usize,
    pub child_dev: usize,
    pub intermediate_train: usize,
    pub changed_letters: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            alphabet: "abcdefghijklmnop".into(),
            lexicon_size: 40,
            word_len: (3, 6),
            sentence_words: (2, 5),
            parent_train: 1000,
            parent_dev: 64,
            child_train: 64,
            child_dev: 32,
            intermediate_train: 128,
            changed_letters: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskPair {
    pub parent_train: ParallelCorpus,
    pub parent_dev: ParallelCorpus,
    pub intermediate_train: ParallelCorpus,
    pub intermediate_dev: ParallelCorpus,
    pub child_train: ParallelCorpus,
    pub child_dev: ParallelCorpus,
    /// The child training pairs again: a split the model can fit exactly.
    pub child_test: ParallelCorpus,
    pub parent_map: HashMap<char, char>,
    pub child_map: HashMap<char, char>,
}

pub fn spell(word: &str, map: &HashMap<char, char>) -> String {
    word.chars().map(|c| map.get(&c).copied().unwrap_or(c)).collect()
}

fn sentences(rng: &mut ChaCha8Rng, lexicon: &[String], words: (usize, usize), n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(words.0..=words.1);
            (0..k)
                .map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn corpus(pair_id: &str, src: &[String], map: &HashMap<char, char>) -> ParallelCorpus {
    let pairs = src.iter().map(|s| {
        let t: Vec<String> = s.split(' ').map(|w| spell(w, map)).collect();
        (s.as_str(), t.join(" "))
    });
    ParallelCorpus::from_pairs(pair_id, pairs).expect("generated lines are single-line UTF-8")
}

/// # Panics
/// On an alphabet of fewer than two letters, a lexicon larger than the
/// number of distinct words of the allowed lengths, or empty ranges.
pub fn generate(cfg: &SyntheticConfig) -> TaskPair {
    let letters: Vec<char> = cfg.alphabet.chars().collect::<BTreeSet<_>>().into_iter().collect();
    assert!(letters.len() >= 2, "alphabet needs two distinct letters");
    assert!(cfg.word_len.0 >= 1 && cfg.word_len.0 <= cfg.word_len.1);
    assert!(cfg.sentence_words.0 >= 1 && cfg.sentence_words.0 <= cfg.sentence_words.1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut image = letters.clone();
    image.shuffle(&mut rng);
    let parent_map: HashMap<char, char> = letters.iter().copied().zip(image.iter().copied()).collect();
    let k = cfg.changed_letters.min(letters.len());
    let mut child_map = parent_map.clone();
    if k >= 2 {
        let changed: Vec<char> = letters.choose_multiple(&mut rng, k).copied().collect();
        for (i, c) in changed.iter().enumerate() {
            child_map.insert(*c, parent_map[&changed[(i + 1) % k]]);
        }
    }

    let mut seen = BTreeSet::new();
    let mut lexicon = Vec::with_capacity(cfg.lexicon_size);
    let mut attempts = 0usize;
    while lexicon.len() < cfg.lexicon_size {
        attempts += 1;
        assert!(attempts < 1000 * (cfg.lexicon_size + 1), "lexicon space exhausted");
        let len = rng.gen_range(cfg.word_len.0..=cfg.word_len.1);
        let w: String = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }

    let sw = cfg.sentence_words;
    let short = (sw.0, sw.0.max(sw.1.div_ceil(2)));
    let pt = sentences(&mut rng, &lexicon, sw, cfg.parent_train);
    let pd = sentences(&mut rng, &lexicon, sw, cfg.parent_dev);
    let it = sentences(&mut rng, &lexicon, short, cfg.intermediate_train);
    let id = sentences(&mut rng, &lexicon, short, cfg.child_dev);
    let ct = sentences(&mut rng, &lexicon, sw, cfg.child_train);
    let cd = sentences(&mut rng, &lexicon, sw, cfg.child_dev);

    TaskPair {
        parent_train: corpus("src-par", &pt, &parent_map),
        parent_dev: corpus("src-par", &pd, &parent_map),
        intermediate_train: corpus("src-mid", &it, &child_map),
        intermediate_dev: corpus("src-mid", &id, &child_map),
        child_train: corpus("src-chi", &ct, &child_map),
        child_dev: corpus("src-chi", &cd, &child_map),
        child_test: corpus("src-chi", &ct, &child_map),
        parent_map,
        child_map,
    }
}
