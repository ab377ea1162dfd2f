//! Parent training, direct fine-tuning and two-stage curriculum fine-tuning,
//! all sharing one loop: Adam with an inverse-square-root schedule, seeded
//! shuffled batches, periodic full-dev validation and lowest-dev-loss
//! checkpoint selection (earliest step wins ties).

mod checkpoint;
mod log;
mod optim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::ParallelCorpus;
use crate::model::{Batch, ModelError, Parameters, TranslationModel};
use crate::numerics::Tape;
use crate::subword::{SubwordVocabulary, BOS_ID, EOS_ID};

pub use checkpoint::Checkpoint;
pub use log::{Stage, TrainLog, ValidationRecord};
pub use optim::{clip_grad_norm, global_norm, inverse_sqrt_lr, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("training loss diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("vocabulary fingerprint {found} does not match the parent's {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Format(String),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Optimizer updates; one step is one batch.
    pub max_steps: usize,
    pub validate_every: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Maximum global gradient L2 norm.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            validate_every: 100,
            batch_size: 15,
            learning_rate: 5e-4,
            warmup_steps: 400,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Bilingual fine-tuning schedule used for the full-size experiments.
    pub fn reference_bilingual() -> Self {
        Self {
            max_steps: 60_000,
            validate_every: 1_000,
            batch_size: 15,
            ..Self::default()
        }
    }

    /// First curriculum stage on the intermediate pair.
    pub fn reference_curriculum_stage1() -> Self {
        Self {
            max_steps: 300,
            validate_every: 20,
            batch_size: 5,
            ..Self::default()
        }
    }

    /// Second curriculum stage on the child pair.
    pub fn reference_curriculum_stage2() -> Self {
        Self {
            batch_size: 5,
            ..Self::reference_bilingual()
        }
    }

    /// A zero-step run is legal and only evaluates the starting point.
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.max_steps > 0 && (self.validate_every == 0 || self.validate_every > self.max_steps) {
            return fail("validate_every must lie in 1..=max_steps");
        }
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return fail("batch_size and warmup_steps must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}

/// A stage of curriculum fine-tuning: schedule plus its corpora.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub config: TrainConfig,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
}

#[derive(Debug, Clone)]
pub struct CurriculumConfig {
    /// Intermediate (easier) pair.
    pub stage1: StageSpec,
    /// Child pair.
    pub stage2: StageSpec,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.stage1.config.validate()?;
        self.stage2.config.validate()
    }
}

/// Per-step diagnostics handed to an observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome {
    /// Best stage-1 checkpoint; stage 2 starts from it.
    pub stage1: Checkpoint,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

type Pair = (Vec<u32>, Vec<u32>);

/// Encoder input for one sentence: its pieces truncated to `max_len - 1`,
/// then EOS.
pub fn source_ids(vocab: &SubwordVocabulary, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode(text).ids;
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS_ID);
    ids
}

/// Tokenizes a corpus into model sequences: `src + EOS` and
/// `BOS + tgt + EOS`, each truncated to fit `max_len`.
pub fn encode_corpus(corpus: &ParallelCorpus, vocab: &SubwordVocabulary, max_len: usize) -> Vec<Pair> {
    let keep = max_len.saturating_sub(1);
    corpus
        .pairs()
        .map(|(s, t)| {
            let src = source_ids(vocab, s, max_len);
            let mut tgt = vec![BOS_ID];
            tgt.extend(vocab.encode(t).ids.into_iter().take(keep));
            tgt.push(EOS_ID);
            (src, tgt)
        })
        .collect()
}

fn make_batch(pairs: &[Pair], idx: &[usize]) -> Batch {
    Batch::new(
        idx.iter().map(|&i| pairs[i].0.clone()).collect(),
        idx.iter().map(|&i| pairs[i].1.clone()).collect(),
    )
}

/// Token-level mean cross-entropy over a whole encoded corpus, in batches
/// of `batch_size`, without dropout.
pub fn mean_loss(model: &TranslationModel<f32>, pairs: &[Pair], batch_size: usize) -> Result<f64, TrainError> {
    let (mut total, mut tokens) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(pairs, chunk);
        let n = batch.target_tokens();
        total += model.forward_loss(&batch)? * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    Ok(total / tokens as f64)
}

/// Dev loss of a model on a raw corpus, as used for checkpoint selection.
pub fn dev_loss(
    model: &TranslationModel<f32>,
    dev: &ParallelCorpus,
    vocab: &SubwordVocabulary,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let pairs = encode_corpus(dev, vocab, model.config().max_len);
    mean_loss(model, &pairs, batch_size)
}

struct Best {
    step: usize,
    dev_loss: f64,
    params: Parameters<f32>,
}

fn run(
    mut model: TranslationModel<f32>,
    train: &ParallelCorpus,
    dev: &ParallelCorpus,
    vocab: &SubwordVocabulary,
    cfg: &TrainConfig,
    stage: Stage,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    if vocab.len() > model.config().vocab_size {
        return Err(TrainError::InvalidConfig(format!(
            "vocabulary has {} pieces but the model only {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let max_len = model.config().max_len;
    let train_pairs = encode_corpus(train, vocab, max_len);
    let dev_pairs = encode_corpus(dev, vocab, max_len);
    let mut log = TrainLog::default();

    let mut best = Best {
        step: 0,
        dev_loss: f64::INFINITY,
        params: model.params().clone(),
    };
    if cfg.max_steps == 0 {
        best.dev_loss = mean_loss(&model, &dev_pairs, cfg.batch_size)?;
        log.records.push(ValidationRecord {
            stage,
            step: 0,
            train_loss: None,
            dev_loss: best.dev_loss,
        });
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut optimizer = Adam::new(model.params().tensors());
    let (mut loss_sum, mut loss_steps) = (0.0f64, 0usize);

    for step in 1..=cfg.max_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_pairs.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = make_batch(&train_pairs, &idx);

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let loss_var = model.loss_on_tape(&mut tape, &vars, &batch, Some(&mut dropout_rng))?;
        let loss = tape.value(loss_var)[0] as f64;
        if !loss.is_finite() {
            return Err(TrainError::DivergedLoss { step });
        }
        tape.backward(loss_var).map_err(ModelError::from)?;
        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(model.params().tensors())
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        drop(tape);
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(TrainError::DivergedLoss { step });
        }
        let lr = inverse_sqrt_lr(cfg.learning_rate, cfg.warmup_steps, step);
        optimizer.step(model.params_mut().tensors_mut(), &grads, lr);
        observer(&StepInfo {
            step,
            loss,
            learning_rate: lr,
            grad_norm,
            clipped_norm,
        });
        loss_sum += loss;
        loss_steps += 1;

        if step % cfg.validate_every == 0 {
            let dev_loss = mean_loss(&model, &dev_pairs, cfg.batch_size)?;
            if !dev_loss.is_finite() {
                return Err(TrainError::DivergedLoss { step });
            }
            log.records.push(ValidationRecord {
                stage,
                step,
                train_loss: Some(loss_sum / loss_steps as f64),
                dev_loss,
            });
            (loss_sum, loss_steps) = (0.0, 0);
            if dev_loss < best.dev_loss {
                best = Best {
                    step,
                    dev_loss,
                    params: model.params().clone(),
                };
            }
        }
    }

    log.selected = Some((stage, best.step));
    let checkpoint = Checkpoint {
        step: best.step,
        dev_loss: best.dev_loss,
        config: model.config().clone(),
        params: best.params,
        vocab_fingerprint: vocab.fingerprint(),
    };
    Ok((checkpoint, log))
}

/// Trains `model` from its current parameters (parent training).
pub fn train(
    model: TranslationModel<f32>,
    train_corpus: &ParallelCorpus,
    dev_corpus: &ParallelCorpus,
    vocab: &SubwordVocabulary,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    run(model, train_corpus, dev_corpus, vocab, cfg, Stage::Train, &mut |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_with_observer(
    model: TranslationModel<f32>,
    train_corpus: &ParallelCorpus,
    dev_corpus: &ParallelCorpus,
    vocab: &SubwordVocabulary,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(Checkpoint, TrainLog), TrainError> {
    run(model, train_corpus, dev_corpus, vocab, cfg, Stage::Train, observer)
}

fn check_vocab(parent: &Checkpoint, vocab: &SubwordVocabulary) -> Result<(), TrainError> {
    let found = vocab.fingerprint();
    if found != parent.vocab_fingerprint {
        return Err(TrainError::VocabMismatch {
            expected: parent.vocab_fingerprint.clone(),
            found,
        });
    }
    Ok(())
}

fn finetune_stage(
    parent: &Checkpoint,
    child_train: &ParallelCorpus,
    child_dev: &ParallelCorpus,
    vocab: &SubwordVocabulary,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    check_vocab(parent, vocab)?;
    run(parent.model()?, child_train, child_dev, vocab, cfg, stage, &mut |_| {})
}

/// Starts from the parent's parameters with a fresh optimizer. The child
/// corpus must be tokenized with the parent's own vocabulary.
pub fn finetune(
    parent: &Checkpoint,
    child_train: &ParallelCorpus,
    child_dev: &ParallelCorpus,
    vocab: &SubwordVocabulary,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    finetune_stage(parent, child_train, child_dev, vocab, cfg, Stage::Finetune)
}

/// Fine-tunes on the intermediate pair, then fine-tunes that stage's best
/// checkpoint on the child pair.
pub fn curriculum_finetune(
    parent: &Checkpoint,
    cc: &CurriculumConfig,
    vocab: &SubwordVocabulary,
) -> Result<CurriculumOutcome, TrainError> {
    cc.validate()?;
    check_vocab(parent, vocab)?;
    let s1 = &cc.stage1;
    let (stage1, mut log) = finetune_stage(parent, &s1.train, &s1.dev, vocab, &s1.config, Stage::Stage1)?;
    let s2 = &cc.stage2;
    let (checkpoint, log2) = finetune_stage(&stage1, &s2.train, &s2.dev, vocab, &s2.config, Stage::Stage2)?;
    log.extend(log2);
    Ok(CurriculumOutcome {
        stage1,
        checkpoint,
        log,
    })
}
