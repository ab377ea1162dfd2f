//! Low-resource translation toolkit: subword vocabularies, a small
//! encoder–decoder transformer trained from scratch, parent/child transfer
//! and curriculum fine-tuning, beam search, BLEU/chrF scoring and corpus
//! diagnostics.

pub mod analysis;
pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod subword;
pub mod synthetic;
pub mod training;

pub use analysis::{length_stats, variant_count, LengthStats, VariantReport};
pub use corpus::{CorpusError, ParallelCorpus, SplitSet, Track};
pub use decode::{beam_search, BeamConfig, DecodeError, Hypothesis, StepScorer, Translator};
pub use metrics::{bleu, chrf, evaluate, EvaluationReport, MetricError};
pub use model::{Batch, ModelConfig, ModelError, Parameters, TranslationModel};
pub use numerics::{Tape, Tensor, TensorError, Var};
pub use subword::{SubwordError, SubwordVocabulary, TokenizedSentence};
pub use training::{
    curriculum_finetune, finetune, train, Checkpoint, CurriculumConfig, CurriculumOutcome, Stage, StageSpec,
    TrainConfig, TrainError, TrainLog, ValidationRecord,
};
