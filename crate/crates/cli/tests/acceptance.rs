//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 7`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mtlab::decode::{beam_search, greedy, BeamConfig, DecodeError, ModelScorer, StepScorer};
use mtlab::metrics::{self, evaluate};
use mtlab::model::{Batch, ModelConfig, TranslationModel};
use mtlab::numerics::{Tape, Tensor, Var};
use mtlab::subword::{tokenization_stats, train_vocab, SubwordVocabulary, BOS_ID, EOS_ID, MARKER, PAD_ID};
use mtlab::synthetic::{generate, SyntheticConfig};
use mtlab::training::{self, dev_loss, finetune, CurriculumConfig, StageSpec, TrainConfig, TrainLog};
use mtlab::{ParallelCorpus, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// 1. metrics
const METRIC_TOL: f64 = 1e-9;
const METRIC_MIN_FIXTURES: usize = 10;
const ORTHOGRAPHY_CHRF_FLOOR: f64 = 0.5;
const METRIC_BUDGET: Duration = Duration::from_secs(1);
// 2. tokenizer
const ROUND_TRIP_SENTENCES: usize = 1000;
const STATS_CORPORA: usize = 100;
const STATS_TOL: f64 = 1e-12;
const TOKENIZER_BUDGET: Duration = Duration::from_secs(10);
// 3. numerics
const FD_STEP: f64 = 1e-5;
const FD_PRIMITIVE_TOL: f64 = 1e-4;
const FD_END_TO_END_TOL: f64 = 1e-3;
const FD_NORM_FLOOR: f64 = 1e-6;
const NUMERICS_BUDGET: Duration = Duration::from_secs(60);
// 5. transfer
const TRANSFER_SEEDS: u64 = 5;
const TRANSFER_MIN_WINS: usize = 4;
const TRANSFER_PARENT_STEPS: usize = 200;
const TRANSFER_CHILD_STEPS: usize = 100;
const TRANSFER_BUDGET: Duration = Duration::from_secs(600);
// 6. curriculum
const CURRICULUM_DESK_STEPS: usize = 40;
const CURRICULUM_DESK_VALIDATE: usize = 20;
// 7. decoding
const GREEDY_FIXTURES: u64 = 50;
const MICRO_FIXTURES: u64 = 20;
const MONOTONE_MAX_BEAM: usize = 8;
// 8. end to end
const E2E_BUDGET: Duration = Duration::from_secs(300);
const E2E_BLEU_FLOOR: f64 = 30.0;
const E2E_PILOT_BLEU: f64 = 100.0;
const E2E_BLEU_BAND: f64 = 15.0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, || format!("{what} took {took:.1?}, budget {budget:?}"))
}

// ---------------------------------------------------------------------------
// 1. Metric oracles

fn oracle_counts<T: PartialEq + Clone>(items: &[T], n: usize) -> Vec<(Vec<T>, usize)> {
    let mut out: Vec<(Vec<T>, usize)> = Vec::new();
    if items.len() < n {
        return out;
    }
    for i in 0..=items.len() - n {
        let g = items[i..i + n].to_vec();
        match out.iter_mut().find(|(h, _)| *h == g) {
            Some((_, c)) => *c += 1,
            None => out.push((g, 1)),
        }
    }
    out
}

fn oracle_matches<T: PartialEq + Clone>(r: &[T], h: &[T], n: usize) -> usize {
    let rc = oracle_counts(r, n);
    oracle_counts(h, n)
        .iter()
        .map(|(g, c)| {
            let in_ref = rc.iter().find(|(x, _)| x == g).map_or(0, |(_, c)| *c);
            (*c).min(in_ref)
        })
        .sum()
}

fn oracle_bleu(refs: &[&str], hyps: &[&str]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (rs, hs) in refs.iter().zip(hyps) {
        let rw: Vec<&str> = rs.split_whitespace().collect();
        let hw: Vec<&str> = hs.split_whitespace().collect();
        r += rw.len();
        c += hw.len();
        for n in 1..=4 {
            m[n - 1] += oracle_matches(&rw, &hw, n);
            t[n - 1] += if hw.len() >= n { hw.len() - n + 1 } else { 0 };
        }
    }
    let mut product = 1.0;
    for n in 0..4 {
        let p = if n > 0 && m[n] == 0 {
            1.0 / (t[n] as f64 + 1.0)
        } else if t[n] == 0 {
            0.0
        } else {
            m[n] as f64 / t[n] as f64
        };
        product *= p;
    }
    if c == 0 || product == 0.0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

fn oracle_chrf_sentence(r: &str, h: &str) -> f64 {
    let r: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
    let h: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
    let (mut ps, mut rs, mut orders) = (0.0, 0.0, 0);
    for n in 1..=6 {
        if r.len().max(h.len()) < n {
            continue;
        }
        orders += 1;
        let m = oracle_matches(&r, &h, n) as f64;
        if h.len() >= n {
            ps += m / (h.len() - n + 1) as f64;
        }
        if r.len() >= n {
            rs += m / (r.len() - n + 1) as f64;
        }
    }
    if orders == 0 {
        return 1.0;
    }
    let (p, rc) = (ps / orders as f64, rs / orders as f64);
    if p + rc == 0.0 {
        0.0
    } else {
        5.0 * p * rc / (4.0 * p + rc)
    }
}

fn oracle_chrf(refs: &[&str], hyps: &[&str]) -> f64 {
    let total: f64 = refs.iter().zip(hyps).map(|(r, h)| oracle_chrf_sentence(r, h)).sum();
    total / refs.len() as f64
}

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let fixtures: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["the cat sat on the mat"], vec!["the cat on the mat"]),
        (vec!["abcd"], vec!["abc"]),
        (vec!["tupinarac"], vec!["tupinarak"]),
        (vec!["a b c"], vec!["d e f"]),
        (vec!["the the cat"], vec!["the the the the"]),
        (vec!["short one"], vec!["short one plus extra words here"]),
        (vec!["ñandú ȥa kuna"], vec!["ñandu ȥa kuna"]),
        (vec!["a  b\tc"], vec!["a b c"]),
        (
            vec!["tupinax uta", "naya sarta tupina", "x"],
            vec!["tupinax utax", "naya sarta", "x y"],
        ),
        (
            vec!["one two three four five", "six"],
            vec!["one two three four five", "seven"],
        ),
        (vec!["aaa aaa"], vec!["aaa"]),
        (vec!["p q r s t u v"], vec!["p q x s t y v"]),
    ];
    ensure(fixtures.len() >= METRIC_MIN_FIXTURES, || "too few fixtures".into())?;
    let mut worst = 0.0f64;
    for (refs, hyps) in &fixtures {
        let r = evaluate(refs, hyps).map_err(|e| e.to_string())?;
        let (ob, oc) = (oracle_bleu(refs, hyps), oracle_chrf(refs, hyps));
        let (db, dc) = ((r.bleu - ob).abs(), (r.chrf - oc).abs());
        worst = worst.max(db).max(dc);
        ensure(db <= METRIC_TOL && dc <= METRIC_TOL, || {
            format!("{refs:?} / {hyps:?}: bleu {} vs {ob}, chrF {} vs {oc}", r.bleu, r.chrf)
        })?;
    }

    // hand calculations
    let cat = evaluate(&["the cat sat on the mat"], &["the cat on the mat"]).unwrap();
    let hand = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (1.0 * 0.75 * (1.0 / 3.0) * (1.0 / 3.0f64)).powf(0.25);
    ensure((cat.bleu - hand).abs() <= METRIC_TOL, || {
        format!("cat BLEU {} vs hand {hand}", cat.bleu)
    })?;
    let (p, rc) = (0.75, (0.75 + 2.0 / 3.0 + 0.5 + 0.0) / 4.0);
    let hand_chrf = 5.0 * p * rc / (4.0 * p + rc);
    let abcd = metrics::sentence_chrf("abcd", "abc", 6, 2.0);
    ensure((abcd - hand_chrf).abs() <= METRIC_TOL, || {
        format!("abcd chrF {abcd} vs {hand_chrf}")
    })?;

    for (refs, _) in &fixtures {
        let r = evaluate(refs, refs).unwrap();
        ensure(r.bleu == 100.0 && r.chrf == 1.0, || {
            format!("identity on {refs:?}: {} {}", r.bleu, r.chrf)
        })?;
    }
    let ortho = evaluate(&["tupinarac"], &["tupinarak"]).unwrap();
    let expected: f64 = (4..=9).map(|k| (k - 1) as f64 / k as f64).sum::<f64>() / 6.0;
    ensure(ortho.bleu == 0.0, || format!("orthography BLEU {}", ortho.bleu))?;
    ensure(
        ortho.chrf > ORTHOGRAPHY_CHRF_FLOOR && (ortho.chrf - expected).abs() <= METRIC_TOL,
        || format!("orthography chrF {} (expected {expected})", ortho.chrf),
    )?;
    within_budget(start, METRIC_BUDGET, "metrics")?;
    Ok(format!(
        "{} fixtures, max |diff| {worst:.1e}; cat BLEU {:.4}; orthography BLEU 0, chrF {:.4}",
        fixtures.len(),
        cat.bleu,
        ortho.chrf
    ))
}

// ---------------------------------------------------------------------------
// 2. Tokenizer

fn random_sentence(rng: &mut ChaCha8Rng, chars: &[char], max_words: usize, max_len: usize) -> String {
    let words = rng.gen_range(1..=max_words);
    (0..words)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len)
                .map(|_| chars[rng.gen_range(0..chars.len())])
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_corpus(rng: &mut ChaCha8Rng, chars: &[char], pairs: usize) -> ParallelCorpus {
    let rows: Vec<(String, String)> = (0..pairs)
        .map(|_| (random_sentence(rng, chars, 6, 7), random_sentence(rng, chars, 6, 7)))
        .collect();
    ParallelCorpus::from_pairs("rand", rows).unwrap()
}

/// Joins every cleaned piece of a side into one string and divides.
fn concat_oracle(vocab: &SubwordVocabulary, side: &[String]) -> (f64, f64) {
    let mut joined = String::new();
    let mut tokens = 0usize;
    for s in side {
        for &id in &vocab.encode(s).ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            tokens += 1;
            joined.extend(vocab.piece(id).unwrap().chars().filter(|&c| c != MARKER));
        }
    }
    let sent = if side.is_empty() {
        0.0
    } else {
        tokens as f64 / side.len() as f64
    };
    let tok = if tokens == 0 {
        0.0
    } else {
        joined.chars().count() as f64 / tokens as f64
    };
    (sent, tok)
}

fn criterion_tokenizer() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let alphabet: Vec<char> = "aeiouklmnptsxyñáȥ'".chars().collect();
    let corpus = random_corpus(&mut rng, &alphabet, 300);
    let vocab = train_vocab(&corpus, 160).map_err(|e| e.to_string())?;
    let inventory: Vec<char> = vocab.char_inventory().into_iter().collect();
    for i in 0..ROUND_TRIP_SENTENCES {
        let s = random_sentence(&mut rng, &inventory, 8, 9);
        let back = vocab.decode(&vocab.encode(&s).ids).map_err(|e| e.to_string())?;
        ensure(back == s, || format!("sentence {i}: {s:?} came back as {back:?}"))?;
    }

    let text = vocab.to_file_string();
    let reparsed = SubwordVocabulary::parse(&text).map_err(|e| e.to_string())?;
    ensure(reparsed.to_file_string() == text, || {
        "reparsed vocabulary serializes differently".into()
    })?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    vocab.save(&path).map_err(|e| e.to_string())?;
    let loaded = SubwordVocabulary::load(&path).map_err(|e| e.to_string())?;
    loaded.save(&dir.path().join("again.txt")).map_err(|e| e.to_string())?;
    let (a, b) = (
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.txt")).unwrap(),
    );
    ensure(a == b && a == text.as_bytes(), || {
        "vocabulary file does not round-trip bit-exactly".into()
    })?;

    let mut worst = 0.0f64;
    for k in 0..STATS_CORPORA {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let (letters, pairs) = (rng.gen_range(3..alphabet.len()), rng.gen_range(1..20));
        let train = random_corpus(&mut rng, &alphabet[..letters], pairs);
        let v = train_vocab(&train, rng.gen_range(40..120)).map_err(|e| e.to_string())?;
        let chars: Vec<char> = v.char_inventory().into_iter().collect();
        let probe_pairs = rng.gen_range(1..15);
        let probe = random_corpus(&mut rng, &chars, probe_pairs);
        let s = tokenization_stats(&probe, &v);
        let (ss, ts) = concat_oracle(&v, probe.source());
        let (st, tt) = concat_oracle(&v, probe.target());
        for (got, want) in [
            (s.avg_sentence_length_source, ss),
            (s.avg_token_length_source, ts),
            (s.avg_sentence_length_target, st),
            (s.avg_token_length_target, tt),
        ] {
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= STATS_TOL, || {
                format!("corpus {k}: {got} vs oracle {want}")
            })?;
        }
    }
    within_budget(start, TOKENIZER_BUDGET, "tokenizer")?;
    Ok(format!(
        "{ROUND_TRIP_SENTENCES} round trips over {} characters; file round-trip exact; stats max |diff| {worst:.1e} on {STATS_CORPORA} corpora",
        inventory.len()
    ))
}

// ---------------------------------------------------------------------------
// 3. Numerics

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .unwrap()
        .with_grad(true)
}

fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = tape.shape(v).to_vec();
    let n = shape.iter().product();
    let w = tape
        .constant(&shape, (0..n).map(|_| rng.gen_range(0.5..2.0)).collect())
        .unwrap();
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Largest relative error between backward and central differences.
fn fd_check(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let analytic = tape.grad(vars[k]).unwrap().to_vec();
        for (e, &analytic) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[e] += delta;
                let mut tp = Tape::new();
                let vs: Vec<Var> = shifted.iter().map(|t| tp.leaf(t)).collect();
                let l = f(&mut tp, &vs);
                tp.value(l)[0]
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

fn primitive_checks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
    let away_from_kink = {
        let mut t = r(&[4, 5]);
        for x in t.data_mut() {
            if x.abs() < 0.1 {
                *x += 0.2f64.copysign(*x);
            }
        }
        t
    };
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        out.push((name, fd_check(&inputs, f)));
    };
    check("matmul", vec![r(&[3, 4]), r(&[4, 5])], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    });
    check("matmul_nt", vec![r(&[3, 4]), r(&[5, 4])], &|t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    });
    check("bmm", vec![r(&[2, 3, 4]), r(&[2, 4, 5])], &|t, v| {
        let y = t.bmm(v[0], v[1], false).unwrap();
        weighted_sum(t, y)
    });
    check("bmm_nt", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], &|t, v| {
        let y = t.bmm(v[0], v[1], true).unwrap();
        weighted_sum(t, y)
    });
    check("add", vec![r(&[3, 4]), r(&[3, 4])], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    });
    check("add_broadcast", vec![r(&[2, 3, 4]), r(&[4])], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    });
    check("mul", vec![r(&[3, 4]), r(&[3, 4])], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, y)
    });
    check("scale", vec![r(&[3, 4])], &|t, v| {
        let y = t.scale(v[0], -1.7).unwrap();
        weighted_sum(t, y)
    });
    check("sum", vec![r(&[3, 4])], &|t, v| t.sum(v[0]).unwrap());
    check("relu", vec![away_from_kink], &|t, v| {
        let y = t.relu(v[0]).unwrap();
        weighted_sum(t, y)
    });
    check("softmax", vec![r(&[3, 5])], &|t, v| {
        let y = t.softmax(v[0]).unwrap();
        weighted_sum(t, y)
    });
    check("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y)
    });
    check("embedding", vec![r(&[6, 3])], &|t, v| {
        let y = t.embedding(v[0], &[0, 2, 2, 5]).unwrap();
        weighted_sum(t, y)
    });
    check("cross_entropy", vec![r(&[5, 6])], &|t, v| {
        t.cross_entropy(v[0], &[1, 3, 0, 5, 2], Some(0), 0.0).unwrap()
    });
    check("cross_entropy_smoothed", vec![r(&[5, 6])], &|t, v| {
        t.cross_entropy(v[0], &[1, 3, 0, 5, 2], Some(0), 0.1).unwrap()
    });
    check("reshape", vec![r(&[2, 6])], &|t, v| {
        let y = t.reshape(v[0], &[3, 4]).unwrap();
        weighted_sum(t, y)
    });
    check("permute", vec![r(&[2, 3, 4])], &|t, v| {
        let y = t.permute(v[0], &[2, 0, 1]).unwrap();
        weighted_sum(t, y)
    });
    out
}

/// Worst per-tensor `|g - fd| / max(|g|, |fd|, floor)` and its tensor name.
/// The floor keeps gradients that vanish exactly (key biases, which
/// softmax cannot see) from turning difference round-off into failures.
fn end_to_end_check() -> (f64, String) {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 11,
        max_len: 8,
        dropout: 0.0,
        label_smoothing: 0.1,
        seed: 4,
    };
    let mut model = TranslationModel::<f64>::init(cfg).unwrap();
    let batch = Batch::new(
        vec![vec![4, 5, 6, EOS_ID], vec![7, 8, EOS_ID]],
        vec![vec![BOS_ID, 9, 10, 3, EOS_ID], vec![BOS_ID, 6, EOS_ID]],
    );
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = model.loss_on_tape(&mut tape, &vars, &batch, None).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let mut worst = (0.0f64, String::new());
    let names = model.params().names().to_vec();
    for (k, g) in grads.iter().enumerate() {
        let mut numeric_grad = Vec::with_capacity(g.len());
        for e in 0..g.len() {
            let mut eval = |delta: f64| {
                model.params_mut().tensors_mut()[k].data_mut()[e] += delta;
                let l = model.forward_loss(&batch).unwrap();
                model.params_mut().tensors_mut()[k].data_mut()[e] -= delta;
                l
            };
            numeric_grad.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut g.iter().zip(&numeric_grad).map(|(a, b)| a - b));
        let scale = norm(&mut g.iter().copied())
            .max(norm(&mut numeric_grad.iter().copied()))
            .max(FD_NORM_FLOOR);
        if diff / scale > worst.0 {
            worst = (diff / scale, names[k].clone());
        }
    }
    worst
}

fn criterion_numerics() -> Outcome {
    let start = Instant::now();
    let prims = primitive_checks();
    let (worst_name, worst) = prims
        .iter()
        .copied()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    for (name, err) in &prims {
        ensure(*err < FD_PRIMITIVE_TOL, || format!("{name}: rel err {err:.2e}"))?;
    }
    let (e2e, at) = end_to_end_check();
    ensure(e2e < FD_END_TO_END_TOL, || {
        format!("forward_loss: rel err {e2e:.2e} at {at}")
    })?;
    within_budget(start, NUMERICS_BUDGET, "numerics")?;
    Ok(format!(
        "{} primitives, worst {worst:.1e} ({worst_name}); end-to-end loss worst {e2e:.1e} ({at})",
        prims.len()
    ))
}

// ---------------------------------------------------------------------------
// 4. Training mechanics

fn tiny_model(vocab: usize, seed: u64, dropout: f64) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        max_len: 48,
        dropout,
        label_smoothing: 0.0,
        seed,
    }
}

fn quick(steps: usize, every: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        validate_every: every,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 10,
        grad_clip: 1.0,
        seed,
    }
}

/// Earliest record with the lowest dev loss, by a plain scan.
fn earliest_min(log: &TrainLog, stage: Stage) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for r in log.records.iter().filter(|r| r.stage == stage) {
        if r.dev_loss < best.1 {
            best = (r.step, r.dev_loss);
        }
    }
    best
}

fn bits(p: &mtlab::Parameters<f32>) -> Vec<u32> {
    p.tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

fn criterion_training() -> Outcome {
    let task = generate(&SyntheticConfig {
        parent_train: 200,
        ..SyntheticConfig::default()
    });
    let vocab = train_vocab(&task.parent_train, 120).map_err(|e| e.to_string())?;
    let cfg = tiny_model(vocab.len(), 11, 0.1);
    let run = |tc: &TrainConfig| {
        training::train(
            TranslationModel::init(cfg.clone()).unwrap(),
            &task.child_train,
            &task.child_dev,
            &vocab,
            tc,
        )
        .map_err(|e| e.to_string())
    };

    // selection on a real run
    let (ckpt, log) = run(&quick(60, 5, 11))?;
    let (step, loss) = earliest_min(&log, Stage::Train);
    ensure(ckpt.step == step && ckpt.dev_loss == loss, || {
        format!(
            "selected step {} ({}) but scan says {step} ({loss})",
            ckpt.step, ckpt.dev_loss
        )
    })?;
    let again = dev_loss(&ckpt.model().unwrap(), &task.child_dev, &vocab, 8).map_err(|e| e.to_string())?;
    ensure(again == ckpt.dev_loss, || {
        format!("kept parameters score {again}, recorded {}", ckpt.dev_loss)
    })?;

    // ties: a clip bound that rounds every update to zero freezes the model
    let frozen = TrainConfig {
        grad_clip: 1e-60,
        ..quick(20, 5, 11)
    };
    let (tie_ckpt, tie_log) = run(&frozen)?;
    let first = &tie_log.records[0];
    ensure(tie_log.records.iter().all(|r| r.dev_loss == first.dev_loss), || {
        "frozen run produced differing dev losses".into()
    })?;
    ensure(tie_ckpt.step == first.step, || {
        format!("tie resolved to step {}, not {}", tie_ckpt.step, first.step)
    })?;

    // zero-step fine-tuning
    let (child, child_log) =
        finetune(&ckpt, &task.child_train, &task.child_dev, &vocab, &quick(0, 0, 3)).map_err(|e| e.to_string())?;
    ensure(bits(&child.params) == bits(&ckpt.params), || {
        "0-step finetune changed parameters".into()
    })?;
    ensure(child_log.records.len() == 1 && child_log.records[0].step == 0, || {
        "0-step finetune should log one step-0 record".into()
    })?;

    // determinism
    let (a, la) = run(&quick(30, 10, 5))?;
    let (b, lb) = run(&quick(30, 10, 5))?;
    ensure(a.to_bytes() == b.to_bytes() && la.to_tsv() == lb.to_tsv(), || {
        "two seeded runs differ".into()
    })?;
    Ok(format!(
        "selected step {step} of {} records; tie -> step {}; 0-step finetune identical; {}-byte checkpoints identical across runs",
        log.records.len(),
        tie_ckpt.step,
        a.to_bytes().len()
    ))
}

// ---------------------------------------------------------------------------
// 5. Transfer benefit

fn transfer_model(vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        d_model: 64,
        d_ff: 128,
        vocab_size: vocab,
        max_len: 48,
        dropout: 0.0,
        label_smoothing: 0.0,
        seed,
    }
}

fn transfer_schedule(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        validate_every: steps,
        batch_size: 16,
        learning_rate: 2e-3,
        warmup_steps: 50,
        grad_clip: 1.0,
        seed,
    }
}

fn criterion_transfer() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=TRANSFER_SEEDS {
        let task = generate(&SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        });
        let vocab = train_vocab(&task.parent_train, 200).map_err(|e| e.to_string())?;
        let cfg = transfer_model(vocab.len(), seed);
        let fresh = || TranslationModel::init(cfg.clone()).unwrap();
        let (parent, _) = training::train(
            fresh(),
            &task.parent_train,
            &task.parent_dev,
            &vocab,
            &transfer_schedule(TRANSFER_PARENT_STEPS, seed),
        )
        .map_err(|e| e.to_string())?;
        let child_cfg = transfer_schedule(TRANSFER_CHILD_STEPS, seed);
        let (_, ft) =
            finetune(&parent, &task.child_train, &task.child_dev, &vocab, &child_cfg).map_err(|e| e.to_string())?;
        let (_, scratch) = training::train(fresh(), &task.child_train, &task.child_dev, &vocab, &child_cfg)
            .map_err(|e| e.to_string())?;
        let at_end = |l: &TrainLog| l.records.last().unwrap().dev_loss;
        let (f, s) = (at_end(&ft), at_end(&scratch));
        if f < s {
            wins += 1;
        }
        rows.push(format!("{f:.3}<{s:.3}"));
    }
    within_budget(start, TRANSFER_BUDGET, "transfer experiment")?;
    let detail = format!(
        "fine-tuned beats scratch in {wins}/{TRANSFER_SEEDS} seeds at step {TRANSFER_CHILD_STEPS} [{}]",
        rows.join(", ")
    );
    ensure(wins >= TRANSFER_MIN_WINS, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. Curriculum

fn criterion_curriculum() -> Outcome {
    let reference = TrainConfig::reference_curriculum_stage1();
    ensure(reference.max_steps == 300 && reference.validate_every == 20, || {
        "reference stage-1 shape".into()
    })?;
    reference.validate().map_err(|e| e.to_string())?;

    let task = generate(&SyntheticConfig {
        parent_train: 300,
        ..SyntheticConfig::default()
    });
    let vocab = train_vocab(&task.parent_train, 150).map_err(|e| e.to_string())?;
    let (parent, _) = training::train(
        TranslationModel::init(tiny_model(vocab.len(), 21, 0.0)).unwrap(),
        &task.parent_train,
        &task.parent_dev,
        &vocab,
        &quick(40, 20, 21),
    )
    .map_err(|e| e.to_string())?;

    let stage_cfg = quick(CURRICULUM_DESK_STEPS, CURRICULUM_DESK_VALIDATE, 22);
    let stage2 = StageSpec {
        config: stage_cfg.clone(),
        train: task.child_train.clone(),
        dev: task.child_dev.clone(),
    };
    let full_schedule = CurriculumConfig {
        stage1: StageSpec {
            config: reference,
            train: task.intermediate_train.clone(),
            dev: task.intermediate_dev.clone(),
        },
        stage2: stage2.clone(),
    };
    full_schedule.validate().map_err(|e| e.to_string())?;

    let cc = CurriculumConfig {
        stage1: StageSpec {
            config: stage_cfg.clone(),
            ..full_schedule.stage1.clone()
        },
        stage2,
    };
    let out = training::curriculum_finetune(&parent, &cc, &vocab).map_err(|e| e.to_string())?;
    let steps = |s: Stage| -> Vec<usize> { out.log.records_for(s).map(|r| r.step).collect() };
    let expected: Vec<usize> = (1..=CURRICULUM_DESK_STEPS / CURRICULUM_DESK_VALIDATE)
        .map(|k| k * CURRICULUM_DESK_VALIDATE)
        .collect();
    ensure(
        steps(Stage::Stage1) == expected && steps(Stage::Stage2) == expected,
        || format!("stage steps {:?} / {:?}", steps(Stage::Stage1), steps(Stage::Stage2)),
    )?;
    ensure(out.log.records.len() == 2 * expected.len(), || {
        "unexpected extra records".into()
    })?;
    let (s1_step, s1_loss) = earliest_min(&out.log, Stage::Stage1);
    ensure(out.stage1.step == s1_step && out.stage1.dev_loss == s1_loss, || {
        format!("stage-1 checkpoint is step {}, optimum is {s1_step}", out.stage1.step)
    })?;
    let rescored = dev_loss(
        &out.stage1.model().unwrap(),
        &task.intermediate_dev,
        &vocab,
        stage_cfg.batch_size,
    )
    .map_err(|e| e.to_string())?;
    ensure(rescored == s1_loss, || {
        "stage-1 checkpoint does not reproduce its dev loss".into()
    })?;

    // stage 2 must be exactly a fine-tune of the stage-1 optimum
    let (direct, direct_log) =
        finetune(&out.stage1, &task.child_train, &task.child_dev, &vocab, &stage_cfg).map_err(|e| e.to_string())?;
    ensure(direct.to_bytes() == out.checkpoint.to_bytes(), || {
        "stage 2 did not start from the stage-1 optimum".into()
    })?;
    let s2: Vec<f64> = out.log.records_for(Stage::Stage2).map(|r| r.dev_loss).collect();
    let d2: Vec<f64> = direct_log.records.iter().map(|r| r.dev_loss).collect();
    ensure(s2 == d2, || "stage-2 log differs from a direct fine-tune".into())?;
    ensure(out.log.selected == Some((Stage::Stage2, out.checkpoint.step)), || {
        "selection tag".into()
    })?;
    Ok(format!(
        "300/20 stage-1 config accepted; ran {CURRICULUM_DESK_STEPS}/{CURRICULUM_DESK_VALIDATE}: stage1 steps {expected:?} (best {s1_step}), stage2 steps {expected:?}, stage 2 seeded from stage-1 optimum"
    ))
}

// ---------------------------------------------------------------------------
// 7. Decoding

/// A two-step model whose distributions are a seeded table over prefixes.
struct Micro {
    seed: u64,
    vocab: usize,
}

impl StepScorer for Micro {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>, DecodeError> {
        let key = prefix
            .iter()
            .fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let raw: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        Ok(raw.iter().map(|r| (r / z).ln()).collect())
    }
}

fn exhaustive(s: &dyn StepScorer, max_len: usize, vocab: usize) -> (f64, Vec<u32>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut stack = vec![(vec![BOS_ID], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let done = prefix.len() > 1 && *prefix.last().unwrap() == EOS_ID;
        if done || prefix.len() == max_len + 1 {
            let ids = prefix[1..].to_vec();
            if lp > best.0 || (lp == best.0 && ids < best.1) {
                best = (lp, ids);
            }
            continue;
        }
        let d = s.log_probs(&prefix).unwrap();
        for id in 0..vocab as u32 {
            if id == PAD_ID || id == BOS_ID {
                continue;
            }
            let mut p = prefix.clone();
            p.push(id);
            stack.push((p, lp + d[id as usize]));
        }
    }
    best
}

fn beam(scorer: &dyn StepScorer, width: usize, max_len: usize) -> mtlab::Hypothesis {
    let cfg = BeamConfig {
        beam_size: width,
        max_len,
        length_norm_alpha: 0.0,
    };
    beam_search(scorer, &cfg).unwrap()
}

fn criterion_decoding() -> Outcome {
    let mut monotone_fixtures = 0;
    let mut violations = Vec::new();
    let mut check_monotone = |name: String, scorer: &dyn StepScorer, max_len: usize| {
        monotone_fixtures += 1;
        let scores: Vec<f64> = (1..=MONOTONE_MAX_BEAM)
            .map(|w| beam(scorer, w, max_len).log_prob)
            .collect();
        if let Some(w) = scores.windows(2).position(|p| p[1] < p[0]) {
            violations.push(format!(
                "{name}: width {} -> {} drops {:.6} -> {:.6}",
                w + 1,
                w + 2,
                scores[w],
                scores[w + 1]
            ));
        }
    };

    for i in 0..GREEDY_FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
        let v = rng.gen_range(6..14);
        let model = TranslationModel::<f32>::init(ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: v,
            max_len: 12,
            dropout: 0.0,
            label_smoothing: 0.0,
            seed: 500 + i,
        })
        .unwrap();
        let len = rng.gen_range(1..6);
        let mut src: Vec<u32> = (0..len).map(|_| rng.gen_range(3..v as u32)).collect();
        src.push(EOS_ID);
        let scorer = ModelScorer::new(&model, &src, v).unwrap();
        let b = beam(&scorer, 1, 10);
        let g = greedy(&scorer, 10).unwrap();
        ensure(b.ids == g.ids && b.log_prob == g.log_prob, || {
            format!("checkpoint {i}: beam-1 {:?} vs greedy {:?}", b.ids, g.ids)
        })?;
        check_monotone(format!("checkpoint {i}"), &scorer, 10);
    }

    for seed in 0..MICRO_FIXTURES {
        let micro = Micro { seed, vocab: 6 };
        let (lp, ids) = exhaustive(&micro, 2, micro.vocab);
        let h = beam(&micro, micro.vocab * micro.vocab, 2);
        ensure(h.ids == ids && (h.log_prob - lp).abs() < 1e-12, || {
            format!(
                "micro {seed}: beam {:?} ({}) vs exhaustive {ids:?} ({lp})",
                h.ids, h.log_prob
            )
        })?;
        check_monotone(format!("micro {seed}"), &micro, 2);
        let deeper = Micro {
            seed: seed + 100,
            vocab: 5,
        };
        check_monotone(format!("micro3 {seed}"), &deeper, 3);
    }

    ensure(violations.is_empty(), || {
        format!(
            "score monotonicity failed on {} of {monotone_fixtures} fixtures: {}",
            violations.len(),
            violations.join("; ")
        )
    })?;
    Ok(format!(
        "beam-1 == greedy on {GREEDY_FIXTURES} checkpoints; saturating beam == exhaustive on {MICRO_FIXTURES} micro-models; widths 1..={MONOTONE_MAX_BEAM} monotone on {monotone_fixtures} fixtures"
    ))
}

// ---------------------------------------------------------------------------
// 8. End to end through the CLI

fn mtlab(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mtlab"))
        .args(args)
        .env("MTLAB_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`mtlab {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn criterion_end_to_end() -> Outcome {
    let start = Instant::now();
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic");
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |rel: &str| fx.join(rel).to_string_lossy().into_owned();
    let w = |rel: &str| work.path().join(rel).to_string_lossy().into_owned();
    let conf = p("tiny.conf");

    mtlab(&[
        "vocab-train",
        "--src",
        &p("parent/train/src.txt"),
        "--tgt",
        &p("parent/train/tgt.txt"),
        "--size",
        "200",
        "--out",
        &w("vocab.txt"),
    ])?;
    mtlab(&[
        "train",
        "--vocab",
        &w("vocab.txt"),
        "--train",
        &p("parent/train"),
        "--dev",
        &p("parent/dev"),
        "--config",
        &conf,
        "--out",
        &w("parent"),
    ])?;
    mtlab(&[
        "finetune",
        "--parent",
        &w("parent/best.ckpt"),
        "--train",
        &p("child/train"),
        "--dev",
        &p("child/dev"),
        "--config",
        &conf,
        "--out",
        &w("child"),
    ])?;
    mtlab(&[
        "translate",
        "--ckpt",
        &w("child/best.ckpt"),
        "--vocab",
        &w("child/vocab.txt"),
        "--in",
        &p("child/test/src.txt"),
        "--out",
        &w("hyp.txt"),
    ])?;
    let report = mtlab(&[
        "evaluate",
        "--ref",
        &p("child/test/tgt.txt"),
        "--hyp",
        &w("hyp.txt"),
        "--format",
        "tsv",
    ])?;
    let took = start.elapsed();

    let value = |key: &str| -> Result<f64, String> {
        report
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("no {key} in report:\n{report}"))
    };
    let (bleu, chrf) = (value("BLEU")?, value("chrF")?);
    within_budget(start, E2E_BUDGET, "CLI pipeline")?;
    let detail = format!("BLEU {bleu:.2}, chrF {chrf:.4} on the 64-pair child test split in {took:.1?}");
    ensure(
        bleu > E2E_BLEU_FLOOR && (bleu - E2E_PILOT_BLEU).abs() <= E2E_BLEU_BAND,
        || format!("{detail}; expected > {E2E_BLEU_FLOOR} and within {E2E_BLEU_BAND} of {E2E_PILOT_BLEU}"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 8] = [
        ("metric oracles", criterion_metrics),
        ("tokenizer", criterion_tokenizer),
        ("numerics", criterion_numerics),
        ("training mechanics", criterion_training),
        ("transfer benefit", criterion_transfer),
        ("curriculum pipeline", criterion_curriculum),
        ("decoding", criterion_decoding),
        ("end-to-end CLI", criterion_end_to_end),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
