mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Subword vocabularies, transformer training with parent/child transfer,
/// beam-search translation, BLEU/chrF scoring and corpus diagnostics.
///
/// Numeric threads come from MTLAB_THREADS (default 1: the reference
/// path, bitwise reproducible).
#[derive(Debug, Parser)]
#[command(name = "mtlab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a subword vocabulary from a parallel corpus.
    VocabTrain(VocabTrainArgs),
    /// Segment each line of a file into subword pieces.
    Tokenize(TokenizeArgs),
    /// Sentence and token length statistics of a corpus under a vocabulary.
    Stats(StatsArgs),
    /// Build train/dev directories for Track One or Track Two.
    Split(SplitArgs),
    /// Train a parent model from scratch.
    Train(TrainArgs),
    /// Fine-tune a parent checkpoint on a child pair.
    Finetune(FinetuneArgs),
    /// Two-stage fine-tuning: intermediate pair, then child pair.
    Curriculum(CurriculumArgs),
    /// Translate a file with beam search.
    Translate(TranslateArgs),
    /// Score hypotheses against references with BLEU and chrF.
    Evaluate(EvaluateArgs),
    /// Length and orthographic-variant diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
pub struct VocabTrainArgs {
    /// Source-side training text, one sentence per line.
    #[arg(long)]
    pub src: PathBuf,
    /// Target-side training text, line-aligned with --src.
    #[arg(long)]
    pub tgt: PathBuf,
    /// Maximum vocabulary size, specials included.
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    /// Output vocabulary file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Input text, one sentence per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output: space-separated pieces per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackArg {
    One,
    Two,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// One: fold a seeded fraction of dev into train. Two: copy unchanged.
    #[arg(long, value_enum)]
    pub track: TrackArg,
    #[arg(long)]
    pub train_src: PathBuf,
    #[arg(long)]
    pub train_tgt: PathBuf,
    #[arg(long)]
    pub dev_src: PathBuf,
    #[arg(long)]
    pub dev_tgt: PathBuf,
    /// Share of dev moved into train (Track One).
    #[arg(long, default_value_t = mtlab::corpus::DEFAULT_TRACK_ONE_FRACTION)]
    pub fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory; receives train/ and dev/.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training overrides; unset flags fall back to the config file, then to
/// the built-in defaults shown.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// `key = value` config file; a run's manifest.txt works too [default: none].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer steps [default: 2000].
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Steps between dev evaluations [default: 100].
    #[arg(long)]
    pub validate_every: Option<usize>,
    /// Sentences per batch [default: 15].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 0.0005].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Linear warmup steps [default: 400].
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Global gradient-norm bound [default: 1.0].
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Seed for initialization, batching and dropout [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Encoder and decoder layers [default: 2].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Model width [default: 128].
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Feed-forward width [default: 256].
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Longest sequence in tokens [default: 64].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Dropout probability [default: 0.1].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Label smoothing [default: 0.0].
    #[arg(long)]
    pub label_smoothing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus directory with src.txt and tgt.txt.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// New run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Parent checkpoint, e.g. RUN/best.ckpt.
    #[arg(long)]
    pub parent: PathBuf,
    /// Parent vocabulary [default: vocab.txt beside the checkpoint].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CurriculumArgs {
    #[arg(long)]
    pub parent: PathBuf,
    /// Parent vocabulary [default: vocab.txt beside the checkpoint].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Intermediate pair: a directory with train/ and dev/.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Child pair: a directory with train/ and dev/.
    #[arg(long)]
    pub stage2: PathBuf,
    /// Stage-one optimizer steps.
    #[arg(long, default_value_t = 300)]
    pub stage1_steps: usize,
    /// Stage-one steps between dev evaluations.
    #[arg(long, default_value_t = 20)]
    pub stage1_validate: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = mtlab::decode::DEFAULT_BEAM_SIZE)]
    pub beam: usize,
    /// Most generated tokens per sentence, EOS included.
    #[arg(long, default_value_t = mtlab::decode::DEFAULT_MAX_DECODE_LEN)]
    pub max_len: usize,
    /// Length-normalization exponent in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Human-readable report.
    Text,
    /// `key<TAB>value` lines.
    Tsv,
    /// Text report followed by the TSV lines.
    Both,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Average sentence length (words) and word length (characters).
    Lengths(LengthsArgs),
    /// Count whitespace words starting with a stem, byte-exact.
    Variants(VariantsArgs),
}

#[derive(Debug, Args)]
pub struct LengthsArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct VariantsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub stem: String,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    pub format: Format,
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
