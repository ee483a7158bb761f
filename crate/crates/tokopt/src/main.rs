//! `tokopt`: the pipeline as reproducible commands.
//!
//! Every command is a deterministic wrapper over the library: seeds are
//! explicit, numeric output uses 6 decimal places, and commands that write
//! files also write their fully-resolved config next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use tokopt::downstream::{DownstreamModel, LabeledExample, MeanEmbedClassifier, PairClassifier};
use tokopt::error::{Error, Result};
use tokopt::lattice;
use tokopt::nulm::{self, Nulm, PretrainOptions};
use tokopt::opt::AdamHyper;
use tokopt::snapshot::{AnyClassifier, Snapshot};
use tokopt::synth::{self, CorpusSplits, SynthSpec};
use tokopt::trainer::{self, Schedule, Tokenizers, TrainConfig};
use tokopt::vocab::{self, SeedVocab};

#[derive(Parser)]
#[command(name = "tokopt", version, about = "Tokenizer optimization with downstream feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Collect candidates and train a seed vocabulary by unigram EM.
    BuildVocab(BuildVocabArgs),
    /// Pretrain a NULM to a seed vocabulary's distribution.
    Pretrain(PretrainArgs),
    /// Joint tokenizer + downstream training.
    Train(TrainArgs),
    /// Tokenizer-only training against a frozen downstream model.
    PostTrain(PostTrainArgs),
    /// Viterbi 1-best tokenization, one line per input line.
    Tokenize(TokenizeArgs),
    /// N-best tokenizations with log-probabilities.
    Nbest(NbestArgs),
    /// Sampled tokenizations (tempered; exact or K-best).
    Sample(SampleArgs),
    /// Evaluate a snapshot's model on labeled data.
    Eval(EvalArgs),
    /// Ratio of Viterbi token counts between two tokenizers.
    TokenRatio(TokenRatioArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TaskKind {
    Pattern,
    Pair,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Alphabet as a string of characters.
    #[arg(long, default_value = "abc")]
    alphabet: String,
    #[arg(long, default_value = "ab")]
    pattern: String,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value_t = 4000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    valid: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TaskKind::Pattern)]
    task: TaskKind,
    /// Directory for train.tsv / valid.tsv / test.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildVocabArgs {
    /// UTF-8 text, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 30)]
    target_size: usize,
    #[arg(long, default_value_t = vocab::DEFAULT_MAX_WORD_LEN)]
    max_word_len: usize,
    #[arg(long, default_value_t = 2)]
    min_freq: u64,
    #[arg(long, default_value_t = 0.75)]
    shrink_ratio: f64,
    #[arg(long, default_value_t = 2)]
    em_iters: usize,
    /// Output vocabulary TSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = nulm::DEFAULT_EMBED_DIM)]
    embed_dim: usize,
    #[arg(long, default_value_t = nulm::DEFAULT_HIDDEN_DIM)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = nulm::DEFAULT_PRETRAIN_TOL)]
    tol: f64,
    #[arg(long, default_value_t = nulm::DEFAULT_PRETRAIN_MAX_EPOCHS)]
    max_epochs: usize,
    /// Output snapshot JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScheduleArg {
    Both,
    AThenB,
    BThenA,
    Random,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Schedule {
        match s {
            ScheduleArg::Both => Schedule::Both,
            ScheduleArg::AThenB => Schedule::AThenB,
            ScheduleArg::BThenA => Schedule::BThenA,
            ScheduleArg::Random => Schedule::Random,
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Labeled TSV: `label<TAB>text` or `label<TAB>text_a<TAB>text_b`.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Start from a pretrained tokenizer snapshot instead of pretraining.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    n_best: usize,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// K-best sampling pool; 0 means exact sampling over all segmentations.
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Both)]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = false)]
    share_nulm: bool,
    #[arg(long, default_value_t = nulm::DEFAULT_EMBED_DIM)]
    embed_dim: usize,
    #[arg(long, default_value_t = nulm::DEFAULT_HIDDEN_DIM)]
    hidden_dim: usize,
    #[arg(long, default_value_t = tokopt::downstream::DEFAULT_EMBED_DIM)]
    model_embed_dim: usize,
    /// Surface whose single-token mass is tracked per epoch.
    #[arg(long)]
    tracked: Option<String>,
    /// Directory for snapshot.json / metrics.jsonl / config.toml.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct PostTrainArgs {
    /// Snapshot holding the tokenizer and the frozen downstream model.
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long, default_value_t = 3)]
    n_best: usize,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    post_epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tracked: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct TokenizeArgs {
    /// Tokenizer: a vocabulary TSV or a snapshot JSON.
    #[arg(long)]
    tokenizer: PathBuf,
    /// UTF-8 text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Serialize)]
struct NbestArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 3)]
    n: usize,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// 0 means exact sampling over all segmentations.
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per input line.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Labeled TSV.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Serialize)]
struct TokenRatioArgs {
    /// Variant tokenizer: vocabulary TSV or snapshot JSON.
    #[arg(long)]
    variant: PathBuf,
    /// Baseline tokenizer: vocabulary TSV or snapshot JSON.
    #[arg(long)]
    baseline: PathBuf,
    /// UTF-8 text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::BuildVocab(args) => cmd_build_vocab(&args),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Train(args) => cmd_train(&args),
        Command::PostTrain(args) => cmd_post_train(&args),
        Command::Tokenize(args) => cmd_tokenize(&args),
        Command::Nbest(args) => cmd_nbest(&args),
        Command::Sample(args) => cmd_sample(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::TokenRatio(args) => cmd_token_ratio(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_resolved_config<T: Serialize>(dir: &Path, args: &T) -> Result<()> {
    let text = toml::to_string_pretty(args)
        .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;
    let path = dir.join("config.toml");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn load_examples(path: &Path) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    let mut arity = None;
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 2 or 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("bad label: {e}")))?;
        let texts = fields.len() - 1;
        if *arity.get_or_insert(texts) != texts {
            return Err(parse_err("mixed single and pair examples".to_string()));
        }
        out.push(LabeledExample {
            texts: fields[1..].iter().map(|s| s.to_string()).collect(),
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

fn write_examples(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&ex.label.to_string());
        for t in &ex.texts {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A vocabulary plus per-word log-probs, from either a vocabulary TSV
/// (seed distribution) or a snapshot JSON (NULM distribution).
fn load_tokenizer(path: &Path) -> Result<(SeedVocab, Vec<f64>)> {
    if path.extension().is_some_and(|e| e == "json") {
        let snap = Snapshot::load(path)?;
        let vocab = snap.restore_vocab()?;
        let log_probs = snap.restore_tokenizers()?.nulm_a().log_probs()?;
        Ok((vocab, log_probs))
    } else {
        let vocab = vocab::load_vocab(path)?;
        let log_probs = vocab.seed_logprobs();
        Ok((vocab, log_probs))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        alphabet: args.alphabet.chars().collect(),
        pattern: args.pattern.clone(),
        len_range: (args.min_len, args.max_len),
        positive_fraction: args.positive_fraction,
        train: args.train,
        valid: args.valid,
        test: args.test,
        seed: args.seed,
    };
    let splits: CorpusSplits = match args.task {
        TaskKind::Pattern => synth::generate_pattern_task(&spec)?,
        TaskKind::Pair => synth::generate_pair_task(&spec)?,
    };
    ensure_dir(&args.out_dir)?;
    write_examples(&args.out_dir.join("train.tsv"), &splits.train)?;
    write_examples(&args.out_dir.join("valid.tsv"), &splits.valid)?;
    write_examples(&args.out_dir.join("test.tsv"), &splits.test)?;
    write_resolved_config(&args.out_dir, args)?;
    println!(
        "wrote {} train / {} valid / {} test examples to {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let corpus = read_lines(&args.corpus)?;
    let candidates = vocab::collect_candidates(&corpus, args.max_word_len, args.min_freq)?;
    let seed = vocab::em_train_seed(
        &candidates,
        &corpus,
        args.target_size,
        args.shrink_ratio,
        args.em_iters,
    )?;
    vocab::save_vocab(&seed, &args.out)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_resolved_config(dir, args)?;
    }
    println!("wrote {} entries to {}", seed.len(), args.out.display());
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let vocab = vocab::load_vocab(&args.vocab)?;
    let mut nulm = Nulm::new(
        vocab.len(),
        args.embed_dim,
        args.hidden_dim,
        args.seed,
        AdamHyper::default(),
    );
    let report = nulm::pretrain(
        &mut nulm.params,
        &vocab.seed_logprobs(),
        PretrainOptions {
            tol: args.tol,
            max_epochs: args.max_epochs,
            ..PretrainOptions::default()
        },
    )?;
    let snap = Snapshot::capture(args.seed, &vocab, &Tokenizers::Single(nulm), None);
    snap.save(&args.out)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_resolved_config(dir, args)?;
    }
    println!(
        "pretrained in {} epochs, final KL {} ({})",
        report.epochs,
        fmt6(report.final_kl),
        if report.converged { "converged" } else { "epoch cap" }
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        n_best: args.n_best,
        alpha: args.alpha,
        k_candidates: if args.k == 0 { None } else { Some(args.k) },
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        schedule: args.schedule.into(),
        share_nulm: args.share_nulm,
        post_epochs: 5,
        tracked_surface: args.tracked.clone(),
    }
}

fn pretrained_nulm(vocab: &SeedVocab, d: usize, h: usize, seed: u64) -> Result<Nulm> {
    let mut nulm = Nulm::new(vocab.len(), d, h, seed, AdamHyper::default());
    nulm::pretrain(
        &mut nulm.params,
        &vocab.seed_logprobs(),
        PretrainOptions::default(),
    )?;
    Ok(nulm)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let vocab = vocab::load_vocab(&args.vocab)?;
    let train = load_examples(&args.train)?;
    let valid = load_examples(&args.valid)?;
    let pair_task = train[0].texts.len() == 2;
    let cfg = train_config(args);

    let mut tokenizers = if let Some(init) = &args.init {
        Snapshot::load(init)?.restore_tokenizers()?
    } else if !pair_task {
        Tokenizers::Single(pretrained_nulm(&vocab, args.embed_dim, args.hidden_dim, args.seed)?)
    } else if args.share_nulm {
        Tokenizers::SharedPair(pretrained_nulm(
            &vocab,
            args.embed_dim,
            args.hidden_dim,
            args.seed,
        )?)
    } else {
        Tokenizers::SplitPair {
            a: pretrained_nulm(&vocab, args.embed_dim, args.hidden_dim, args.seed)?,
            b: pretrained_nulm(&vocab, args.embed_dim, args.hidden_dim, args.seed.wrapping_add(1))?,
        }
    };

    let classes = train
        .iter()
        .chain(&valid)
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    let mut model = if pair_task {
        AnyClassifier::Pair(PairClassifier::new(
            vocab.len(),
            args.model_embed_dim,
            classes,
            args.seed,
            AdamHyper::default(),
        ))
    } else {
        AnyClassifier::Single(MeanEmbedClassifier::new(
            vocab.len(),
            args.model_embed_dim,
            classes,
            args.seed,
            AdamHyper::default(),
        ))
    };

    let metrics = trainer::train_joint(&train, &valid, &vocab, &mut tokenizers, &mut model, &cfg)?;

    ensure_dir(&args.out_dir)?;
    let snap = Snapshot::capture(args.seed, &vocab, &tokenizers, Some(&model));
    snap.save(&args.out_dir.join("snapshot.json"))?;
    let metrics_path = args.out_dir.join("metrics.jsonl");
    fs::write(&metrics_path, metrics.to_jsonl()).map_err(|e| Error::io(metrics_path, e))?;
    write_resolved_config(&args.out_dir, args)?;
    if let Some(last) = metrics.epochs.last() {
        println!(
            "epoch {}: accuracy {} macro_f1 {} tokens/sentence {}",
            last.epoch,
            fmt6(last.accuracy),
            fmt6(last.macro_f1),
            fmt6(last.mean_tokens_per_sentence)
        );
    }
    Ok(())
}

fn cmd_post_train(args: &PostTrainArgs) -> Result<()> {
    let snap = Snapshot::load(&args.snapshot)?;
    let vocab = snap.restore_vocab()?;
    let mut tokenizers = snap.restore_tokenizers()?;
    let model = snap
        .restore_model()?
        .ok_or_else(|| Error::InvalidConfig("snapshot has no downstream model".to_string()))?;
    let train = load_examples(&args.train)?;
    let valid = load_examples(&args.valid)?;
    let cfg = TrainConfig {
        n_best: args.n_best,
        alpha: args.alpha,
        k_candidates: if args.k == 0 { None } else { Some(args.k) },
        epochs: 0,
        batch_size: args.batch_size,
        seed: args.seed,
        schedule: Schedule::Both,
        share_nulm: matches!(tokenizers, Tokenizers::SharedPair(_)),
        post_epochs: args.post_epochs,
        tracked_surface: args.tracked.clone(),
    };
    let metrics = trainer::post_train(&train, &valid, &vocab, &mut tokenizers, &model, &cfg)?;

    ensure_dir(&args.out_dir)?;
    let out = Snapshot::capture(args.seed, &vocab, &tokenizers, Some(&model));
    out.save(&args.out_dir.join("snapshot.json"))?;
    let metrics_path = args.out_dir.join("metrics.jsonl");
    fs::write(&metrics_path, metrics.to_jsonl()).map_err(|e| Error::io(metrics_path, e))?;
    write_resolved_config(&args.out_dir, args)?;
    if let Some(last) = metrics.epochs.last() {
        println!(
            "post-trained {} epochs: accuracy {}",
            metrics.epochs.len(),
            fmt6(last.accuracy)
        );
    }
    Ok(())
}

fn cmd_tokenize(args: &TokenizeArgs) -> Result<()> {
    let (vocab, log_probs) = load_tokenizer(&args.tokenizer)?;
    for line in read_lines(&args.input)? {
        if line.is_empty() {
            println!();
            continue;
        }
        let lat = lattice::build_lattice(&line, &vocab)?;
        let best = lattice::viterbi(&lat, &log_probs)?;
        println!("{}", best.surfaces(&vocab, &line).join(" "));
    }
    Ok(())
}

fn cmd_nbest(args: &NbestArgs) -> Result<()> {
    let (vocab, log_probs) = load_tokenizer(&args.tokenizer)?;
    let mut first = true;
    for line in read_lines(&args.input)? {
        if line.is_empty() {
            continue;
        }
        if !first {
            println!();
        }
        first = false;
        let lat = lattice::build_lattice(&line, &vocab)?;
        for tok in lattice::nbest(&lat, &log_probs, args.n)? {
            println!("{}\t{}", fmt6(tok.logprob), tok.surfaces(&vocab, &line).join(" "));
        }
    }
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let (vocab, log_probs) = load_tokenizer(&args.tokenizer)?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    for line in read_lines(&args.input)? {
        if line.is_empty() {
            continue;
        }
        let lat = lattice::build_lattice(&line, &vocab)?;
        for _ in 0..args.count.max(1) {
            let tok = match args.k {
                0 => lattice::ffbs_sample(&lat, &log_probs, args.alpha, &mut rng)?,
                k => lattice::kbest_sample(&lat, &log_probs, args.alpha, k, &mut rng)?,
            };
            println!("{}", tok.surfaces(&vocab, &line).join(" "));
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let snap = Snapshot::load(&args.snapshot)?;
    let vocab = snap.restore_vocab()?;
    let tokenizers = snap.restore_tokenizers()?;
    let model = snap
        .restore_model()?
        .ok_or_else(|| Error::InvalidConfig("snapshot has no downstream model".to_string()))?;
    let data = load_examples(&args.data)?;
    if data[0].texts.len() != model.num_inputs() {
        return Err(Error::InvalidConfig(format!(
            "model expects {} inputs but data has {}",
            model.num_inputs(),
            data[0].texts.len()
        )));
    }
    let summary = trainer::evaluate(&data, &vocab, &tokenizers, &model)?;
    println!("accuracy\t{}", fmt6(summary.accuracy));
    println!("macro_f1\t{}", fmt6(summary.macro_f1));
    println!("mean_tokens_per_sentence\t{}", fmt6(summary.mean_tokens_per_sentence));
    Ok(())
}

fn cmd_token_ratio(args: &TokenRatioArgs) -> Result<()> {
    let (vocab, variant) = load_tokenizer(&args.variant)?;
    let (base_vocab, baseline) = load_tokenizer(&args.baseline)?;
    if base_vocab.len() != vocab.len()
        || base_vocab
            .entries()
            .iter()
            .zip(vocab.entries())
            .any(|(a, b)| a.surface != b.surface)
    {
        return Err(Error::InvalidConfig(
            "variant and baseline must share one vocabulary".to_string(),
        ));
    }
    let lines = read_lines(&args.input)?;
    let texts: Vec<&str> = lines.iter().filter(|l| !l.is_empty()).map(String::as_str).collect();
    let ratio = trainer::token_ratio(&texts, &vocab, &variant, &baseline)?;
    println!("{}", fmt6(ratio));
    Ok(())
}
