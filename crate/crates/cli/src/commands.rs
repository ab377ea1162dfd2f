use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtlab::corpus::{self, load_dir, load_parallel, read_lines, ParallelCorpus, SOURCE_FILE, TARGET_FILE};
use mtlab::decode::{BeamConfig, Translator};
use mtlab::subword::{tokenization_stats, train_vocab, SubwordVocabulary};
use mtlab::training::{self, Checkpoint, CurriculumConfig, StageSpec, TrainLog};
use mtlab::{analysis, metrics, numerics, TranslationModel};

use crate::config::RunConfig;
use crate::run::{RunDir, BEST, LOG, STAGE1, VOCAB};
use crate::{
    AnalyzeCommand, Command, CurriculumArgs, EvaluateArgs, FinetuneArgs, Format, LengthsArgs, ModelFlags, SplitArgs,
    StatsArgs, TokenizeArgs, TrackArg, TrainArgs, TrainFlags, TranslateArgs, VariantsArgs, VocabTrainArgs,
};

pub const THREADS_ENV: &str = "MTLAB_THREADS";

pub fn init_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?,
        Err(_) => 1,
    };
    numerics::set_threads(n);
    Ok(())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::VocabTrain(a) => vocab_train(a),
        Command::Tokenize(a) => tokenize(a),
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Curriculum(a) => curriculum(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(AnalyzeCommand::Lengths(a)) => lengths(a),
        Command::Analyze(AnalyzeCommand::Variants(a)) => variants(a),
    }
}

fn pair_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(format: Format, text: &str, tsv: &str) {
    match format {
        Format::Text => print!("{text}"),
        Format::Tsv => print!("{tsv}"),
        Format::Both => print!("{text}{tsv}"),
    }
}

fn vocab_train(a: VocabTrainArgs) -> Result<()> {
    let corpus = load_parallel(&a.src, &a.tgt, &pair_id(&a.src))?;
    let vocab = train_vocab(&corpus, a.size)?;
    vocab.save(&a.out)?;
    println!("pieces\t{}\nmerges\t{}", vocab.len(), vocab.num_merges());
    Ok(())
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let lines: Vec<String> = read_lines(&a.input)?
        .iter()
        .map(|l| vocab.encode(l).to_spaced())
        .collect();
    write_lines(&a.out, &lines)
}

fn stats(a: StatsArgs) -> Result<()> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let corpus = load_parallel(&a.src, &a.tgt, &pair_id(&a.src))?;
    let s = tokenization_stats(&corpus, &vocab);
    println!("pair\tsentences\tsrc_sent_len\ttgt_sent_len\tsrc_token_len\ttgt_token_len");
    println!(
        "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
        corpus.pair_id(),
        s.sentences,
        s.avg_sentence_length_source,
        s.avg_sentence_length_target,
        s.avg_token_length_source,
        s.avg_token_length_target
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let (train_dir, dev_dir) = (a.out.join("train"), a.out.join("dev"));
    for d in [&train_dir, &dev_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let train = load_parallel(&a.train_src, &a.train_tgt, "train")?;
    let dev = load_parallel(&a.dev_src, &a.dev_tgt, "dev")?;
    match a.track {
        TrackArg::Two => {
            // validated above, copied byte for byte
            for (from, dir, name) in [
                (&a.train_src, &train_dir, SOURCE_FILE),
                (&a.train_tgt, &train_dir, TARGET_FILE),
                (&a.dev_src, &dev_dir, SOURCE_FILE),
                (&a.dev_tgt, &dev_dir, TARGET_FILE),
            ] {
                fs::copy(from, dir.join(name)).with_context(|| format!("copying {}", from.display()))?;
            }
            println!("train\t{}\ndev\t{}", train.len(), dev.len());
        }
        TrackArg::One => {
            let (train, dev) = corpus::make_track_one(&train, &dev, a.fraction, a.seed)?;
            train.save_dir(&train_dir)?;
            dev.save_dir(&dev_dir)?;
            println!("train\t{}\ndev\t{}", train.len(), dev.len());
        }
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags, model_fixed: bool) -> Result<()> {
    if let Some(path) = &f.config {
        let skipped = cfg.apply_file(path, model_fixed)?;
        if !skipped.is_empty() {
            eprintln!(
                "note: model keys come from the parent checkpoint; ignoring {}",
                skipped.join(", ")
            );
        }
    }
    let t = &mut cfg.train;
    t.max_steps = f.max_steps.unwrap_or(t.max_steps);
    t.validate_every = f.validate_every.unwrap_or(t.validate_every);
    t.batch_size = f.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = f.learning_rate.unwrap_or(t.learning_rate);
    t.warmup_steps = f.warmup_steps.unwrap_or(t.warmup_steps);
    t.grad_clip = f.grad_clip.unwrap_or(t.grad_clip);
    if let Some(seed) = f.seed {
        t.seed = seed;
        if !model_fixed {
            cfg.model.seed = seed;
        }
    }
    Ok(())
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) {
    let m = &mut cfg.model;
    m.layers = f.layers.unwrap_or(m.layers);
    m.heads = f.heads.unwrap_or(m.heads);
    m.d_model = f.d_model.unwrap_or(m.d_model);
    m.d_ff = f.d_ff.unwrap_or(m.d_ff);
    m.max_len = f.max_len.unwrap_or(m.max_len);
    m.dropout = f.dropout.unwrap_or(m.dropout);
    m.label_smoothing = f.label_smoothing.unwrap_or(m.label_smoothing);
}

fn report(log: &TrainLog, ckpt: &Checkpoint) {
    for r in &log.records {
        let train = r.train_loss.map_or("-".into(), |v| format!("{v:.4}"));
        eprintln!("{}\tstep {}\ttrain {}\tdev {:.4}", r.stage, r.step, train, r.dev_loss);
    }
    println!("selected_step\t{}\ndev_loss\t{:.6}", ckpt.step, ckpt.dev_loss);
}

fn finish(run: &RunDir, ckpt: &Checkpoint, log: &TrainLog) -> Result<()> {
    ckpt.save(&run.file(BEST))?;
    let path = run.file(LOG);
    fs::write(&path, log.to_tsv()).with_context(|| format!("writing {}", path.display()))?;
    report(log, ckpt);
    Ok(())
}

fn corpus_inputs(label: &str, dir: &Path) -> [(String, PathBuf); 2] {
    [
        (format!("{label}.src"), dir.join(SOURCE_FILE)),
        (format!("{label}.tgt"), dir.join(TARGET_FILE)),
    ]
}

fn manifest(run: &RunDir, sub: &str, inputs: Vec<(String, PathBuf)>, config: &str) -> Result<()> {
    let refs: Vec<(&str, &Path)> = inputs.iter().map(|(l, p)| (l.as_str(), p.as_path())).collect();
    run.write_manifest(sub, &refs, config)
}

fn train(a: TrainArgs) -> Result<()> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let train_c = load_dir(&a.train)?;
    let dev_c = load_dir(&a.dev)?;
    let mut cfg = RunConfig::default();
    apply_train_flags(&mut cfg, &a.flags, false)?;
    apply_model_flags(&mut cfg, &a.model);
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    cfg.train.validate()?;

    let run = RunDir::create(&a.out)?;
    let mut inputs = vec![("vocab".to_string(), a.vocab.clone())];
    inputs.extend(corpus_inputs("train", &a.train));
    inputs.extend(corpus_inputs("dev", &a.dev));
    manifest(&run, "train", inputs, &cfg.render(true))?;
    vocab.save(&run.file(VOCAB))?;

    let model = TranslationModel::init(cfg.model.clone())?;
    let (ckpt, log) = training::train(model, &train_c, &dev_c, &vocab, &cfg.train)?;
    finish(&run, &ckpt, &log)
}

fn parent_vocab(parent: &Path, vocab: Option<&Path>) -> Result<(PathBuf, SubwordVocabulary)> {
    let path = match vocab {
        Some(p) => p.to_path_buf(),
        None => parent.parent().unwrap_or(Path::new(".")).join(VOCAB),
    };
    let vocab =
        SubwordVocabulary::load(&path).with_context(|| format!("loading parent vocabulary {}", path.display()))?;
    Ok((path, vocab))
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let parent = Checkpoint::load(&a.parent)?;
    let (vocab_path, vocab) = parent_vocab(&a.parent, a.vocab.as_deref())?;
    let train_c = load_dir(&a.train)?;
    let dev_c = load_dir(&a.dev)?;
    let mut cfg = RunConfig {
        model: parent.config.clone(),
        ..RunConfig::default()
    };
    apply_train_flags(&mut cfg, &a.flags, true)?;
    cfg.train.validate()?;

    let run = RunDir::create(&a.out)?;
    let mut inputs = vec![
        ("parent".to_string(), a.parent.clone()),
        ("vocab".to_string(), vocab_path),
    ];
    inputs.extend(corpus_inputs("train", &a.train));
    inputs.extend(corpus_inputs("dev", &a.dev));
    manifest(&run, "finetune", inputs, &cfg.render(false))?;
    vocab.save(&run.file(VOCAB))?;

    let (ckpt, log) = training::finetune(&parent, &train_c, &dev_c, &vocab, &cfg.train)?;
    finish(&run, &ckpt, &log)
}

fn stage(dir: &Path) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let train = load_dir(&dir.join("train")).with_context(|| format!("loading {}/train", dir.display()))?;
    let dev = load_dir(&dir.join("dev")).with_context(|| format!("loading {}/dev", dir.display()))?;
    Ok((train, dev))
}

fn curriculum(a: CurriculumArgs) -> Result<()> {
    let parent = Checkpoint::load(&a.parent)?;
    let (vocab_path, vocab) = parent_vocab(&a.parent, a.vocab.as_deref())?;
    let (t1, d1) = stage(&a.stage1)?;
    let (t2, d2) = stage(&a.stage2)?;
    let mut cfg = RunConfig {
        model: parent.config.clone(),
        ..RunConfig::default()
    };
    apply_train_flags(&mut cfg, &a.flags, true)?;
    let stage1_cfg = training::TrainConfig {
        max_steps: a.stage1_steps,
        validate_every: a.stage1_validate,
        ..cfg.train.clone()
    };
    let cc = CurriculumConfig {
        stage1: StageSpec {
            config: stage1_cfg,
            train: t1,
            dev: d1,
        },
        stage2: StageSpec {
            config: cfg.train.clone(),
            train: t2,
            dev: d2,
        },
    };
    cc.validate()?;

    let run = RunDir::create(&a.out)?;
    let mut inputs = vec![
        ("parent".to_string(), a.parent.clone()),
        ("vocab".to_string(), vocab_path),
    ];
    inputs.extend(corpus_inputs("stage1.train", &a.stage1.join("train")));
    inputs.extend(corpus_inputs("stage1.dev", &a.stage1.join("dev")));
    inputs.extend(corpus_inputs("stage2.train", &a.stage2.join("train")));
    inputs.extend(corpus_inputs("stage2.dev", &a.stage2.join("dev")));
    let config = format!(
        "# stage1: max_steps = {}, validate_every = {}\n{}",
        a.stage1_steps,
        a.stage1_validate,
        cfg.render(false)
    );
    manifest(&run, "curriculum", inputs, &config)?;
    vocab.save(&run.file(VOCAB))?;

    let out = training::curriculum_finetune(&parent, &cc, &vocab)?;
    out.stage1.save(&run.file(STAGE1))?;
    finish(&run, &out.checkpoint, &out.log)
}

fn translate(a: TranslateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let cfg = BeamConfig {
        beam_size: a.beam,
        max_len: a.max_len,
        length_norm_alpha: a.alpha,
    };
    cfg.validate()?;
    let translator = Translator::new(&ckpt, &vocab)?;
    let sources = read_lines(&a.input)?;
    let out = translator.translate_corpus(&sources, &cfg)?;
    write_lines(&a.out, &out)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let refs = read_lines(&a.reference)?;
    let hyps = read_lines(&a.hyp)?;
    let r = metrics::evaluate(&refs, &hyps)?;
    emit(a.format, &r.to_human(), &r.to_tsv());
    Ok(())
}

fn lengths(a: LengthsArgs) -> Result<()> {
    let gold = read_lines(&a.gold)?;
    let pred = read_lines(&a.pred)?;
    let s = analysis::length_stats(&gold, &pred)?;
    emit(a.format, &s.to_table(), &s.to_tsv());
    Ok(())
}

fn variants(a: VariantsArgs) -> Result<()> {
    if a.stem.is_empty() {
        bail!("--stem must not be empty");
    }
    let lines = read_lines(&a.input)?;
    let r = analysis::variant_count(&lines, &a.stem);
    emit(a.format, &r.to_table(), &r.to_tsv());
    Ok(())
}
