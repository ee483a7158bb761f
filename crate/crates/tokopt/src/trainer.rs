//! Joint optimization of tokenizer and downstream model, post-processing
//! against a frozen model, two-input scheduling strategies, evaluation,
//! and tokenization telemetry.
//!
//! One training step over an example does two things, in a fixed order and
//! both from the pre-step tokenizer state: (i) the N-best candidates are
//! scored by the downstream loss and the NULM descends the weighted loss;
//! (ii) the downstream model takes one gradient step on a sampled
//! tokenization (subword regularization). Examples are grouped into
//! batches with deterministic, fixed-order gradient accumulation, so runs
//! with identical seeds reproduce metrics bit-exactly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::downstream::{DownstreamModel, LabeledExample};
use crate::error::Result;
use crate::lattice::{self, Lattice, Tokenization};
use crate::nulm::{self, Nulm, NulmGrads};
use crate::vocab::SeedVocab;

/// Which of the two NULMs receives updates in two-input training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Update both sides every step.
    Both,
    /// Side A for the first half of the epochs, then side B.
    AThenB,
    /// Side B first, then side A.
    BThenA,
    /// Exactly one side per batch, chosen uniformly.
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_best: usize,
    pub alpha: f64,
    /// `None` means sampling over all segmentations (forward filtering,
    /// backward sampling); `Some(k)` samples from the K-best list.
    pub k_candidates: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub share_nulm: bool,
    pub post_epochs: usize,
    /// Surface whose single-token posterior mass is tracked per epoch on
    /// evaluation sentences that contain it.
    pub tracked_surface: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_best: 3,
            alpha: 0.2,
            k_candidates: None,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            schedule: Schedule::Both,
            share_nulm: false,
            post_epochs: 5,
            tracked_surface: None,
        }
    }
}

/// Tokenizer side(s) of the training state.
#[derive(Debug, Clone)]
pub enum Tokenizers {
    Single(Nulm),
    /// One parameter set serving both sides of a pair task.
    SharedPair(Nulm),
    SplitPair { a: Nulm, b: Nulm },
}

impl Tokenizers {
    pub fn nulm_a(&self) -> &Nulm {
        match self {
            Tokenizers::Single(n) | Tokenizers::SharedPair(n) => n,
            Tokenizers::SplitPair { a, .. } => a,
        }
    }

    pub fn nulm_b(&self) -> &Nulm {
        match self {
            Tokenizers::Single(n) | Tokenizers::SharedPair(n) => n,
            Tokenizers::SplitPair { b, .. } => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_tokens_per_sentence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tokenizer_loss: f64,
    pub downstream_loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_tokens_per_sentence: f64,
    pub tokenizer_grad_norm: f64,
    pub tracked_mass: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Tracked mass before the first epoch, for monotonicity checks.
    pub start_tracked_mass: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    /// One JSON object per epoch, newline-delimited.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for epoch in &self.epochs {
            out.push_str(&serde_json::to_string(epoch).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub tokenizer_loss: f64,
    pub downstream_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PairStepStats {
    pub tokenizer_loss_a: f64,
    pub tokenizer_loss_b: f64,
    pub downstream_loss: f64,
    pub grad_norm: f64,
}

fn sample_tokenization(
    lat: &Lattice,
    log_probs: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Tokenization> {
    match cfg.k_candidates {
        None => lattice::ffbs_sample(lat, log_probs, cfg.alpha, rng),
        Some(k) => lattice::kbest_sample(lat, log_probs, cfg.alpha, k, rng),
    }
}

struct SingleEval {
    tokenizer_loss: f64,
    grads: NulmGrads,
    sampled: Tokenization,
}

fn eval_single(
    example: &LabeledExample,
    vocab: &SeedVocab,
    nulm: &Nulm,
    model: &dyn DownstreamModel,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<SingleEval> {
    let log_probs = nulm.log_probs()?;
    let lat = lattice::build_lattice(&example.texts[0], vocab)?;
    let candidates = lattice::nbest(&lat, &log_probs, cfg.n_best)?;
    let sampled = sample_tokenization(&lat, &log_probs, cfg, rng)?;
    let losses = candidates
        .iter()
        .map(|c| model.loss(&[c], example.label))
        .collect::<Result<Vec<f64>>>()?;
    let (tokenizer_loss, grads) =
        nulm::tokenizer_loss_and_grad(&nulm.params, &candidates, &losses)?;
    Ok(SingleEval {
        tokenizer_loss,
        grads,
        sampled,
    })
}

struct PairEval {
    loss_a: f64,
    loss_b: f64,
    grads_a: NulmGrads,
    grads_b: NulmGrads,
    sampled_a: Tokenization,
    sampled_b: Tokenization,
}

fn eval_pair(
    example: &LabeledExample,
    vocab: &SeedVocab,
    nulm_a: &Nulm,
    nulm_b: &Nulm,
    model: &dyn DownstreamModel,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<PairEval> {
    let log_probs_a = nulm_a.log_probs()?;
    let log_probs_b = nulm_b.log_probs()?;
    let lat_a = lattice::build_lattice(&example.texts[0], vocab)?;
    let lat_b = lattice::build_lattice(&example.texts[1], vocab)?;
    let sampled_b = sample_tokenization(&lat_b, &log_probs_b, cfg, rng)?;
    let sampled_a = sample_tokenization(&lat_a, &log_probs_a, cfg, rng)?;

    // Side A: its candidates paired with the sampled other side.
    let cands_a = lattice::nbest(&lat_a, &log_probs_a, cfg.n_best)?;
    let losses_a = cands_a
        .iter()
        .map(|c| model.loss(&[c, &sampled_b], example.label))
        .collect::<Result<Vec<f64>>>()?;
    let (loss_a, grads_a) = nulm::tokenizer_loss_and_grad(&nulm_a.params, &cands_a, &losses_a)?;

    let cands_b = lattice::nbest(&lat_b, &log_probs_b, cfg.n_best)?;
    let losses_b = cands_b
        .iter()
        .map(|c| model.loss(&[&sampled_a, c], example.label))
        .collect::<Result<Vec<f64>>>()?;
    let (loss_b, grads_b) = nulm::tokenizer_loss_and_grad(&nulm_b.params, &cands_b, &losses_b)?;

    Ok(PairEval {
        loss_a,
        loss_b,
        grads_a,
        grads_b,
        sampled_a,
        sampled_b,
    })
}

/// One joint step on a single-input example: tokenizer update from the
/// N-best losses, then one downstream step on a sampled tokenization.
pub fn train_step_single(
    example: &LabeledExample,
    vocab: &SeedVocab,
    nulm: &mut Nulm,
    model: &mut dyn DownstreamModel,
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepStats> {
    let eval = eval_single(example, vocab, nulm, model, cfg, rng)?;
    let grad_norm = eval.grads.norm();
    nulm.step(&eval.grads);
    let downstream_loss = model.train_step(&[&eval.sampled], example.label)?;
    Ok(StepStats {
        tokenizer_loss: eval.tokenizer_loss,
        downstream_loss,
        grad_norm,
    })
}

/// One joint step on a two-input example. `gate` suppresses either side's
/// tokenizer update; with a shared NULM the two per-side gradients are
/// summed in fixed order before one update.
pub fn train_step_pair(
    example: &LabeledExample,
    vocab: &SeedVocab,
    tokenizers: &mut Tokenizers,
    model: &mut dyn DownstreamModel,
    cfg: &TrainConfig,
    gate: (bool, bool),
    rng: &mut ChaCha12Rng,
) -> Result<PairStepStats> {
    let (eval, grad_norm) = match tokenizers {
        Tokenizers::SharedPair(nulm) => {
            let eval = eval_pair(example, vocab, nulm, nulm, model, cfg, rng)?;
            let mut total = eval.grads_a.clone();
            total.scale(if gate.0 { 1.0 } else { 0.0 });
            if gate.1 {
                total.add_assign(&eval.grads_b);
            }
            let norm = total.norm();
            if gate.0 || gate.1 {
                nulm.step(&total);
            }
            (eval, norm)
        }
        Tokenizers::SplitPair { a, b } => {
            let eval = eval_pair(example, vocab, a, b, model, cfg, rng)?;
            let norm = (eval.grads_a.norm().powi(2) + eval.grads_b.norm().powi(2)).sqrt();
            if gate.0 {
                a.step(&eval.grads_a);
            }
            if gate.1 {
                b.step(&eval.grads_b);
            }
            (eval, norm)
        }
        Tokenizers::Single(_) => panic!("pair step requires a pair tokenizer"),
    };
    let downstream_loss = model.train_step(&[&eval.sampled_a, &eval.sampled_b], example.label)?;
    Ok(PairStepStats {
        tokenizer_loss_a: eval.loss_a,
        tokenizer_loss_b: eval.loss_b,
        downstream_loss,
        grad_norm,
    })
}

/// Which NULM sides to update this batch.
pub fn schedule_gate<R: Rng>(
    strategy: Schedule,
    epoch: usize,
    total_epochs: usize,
    rng: &mut R,
) -> (bool, bool) {
    assert!(epoch < total_epochs.max(1));
    match strategy {
        Schedule::Both => (true, true),
        Schedule::AThenB => {
            if epoch < total_epochs / 2 {
                (true, false)
            } else {
                (false, true)
            }
        }
        Schedule::BThenA => {
            if epoch < total_epochs / 2 {
                (false, true)
            } else {
                (true, false)
            }
        }
        Schedule::Random => {
            if rng.gen_bool(0.5) {
                (true, false)
            } else {
                (false, true)
            }
        }
    }
}

fn viterbi_inputs(
    example: &LabeledExample,
    vocab: &SeedVocab,
    tokenizers: &Tokenizers,
) -> Result<Vec<Tokenization>> {
    let log_probs_a = tokenizers.nulm_a().log_probs()?;
    let mut toks = vec![lattice::viterbi(
        &lattice::build_lattice(&example.texts[0], vocab)?,
        &log_probs_a,
    )?];
    if example.texts.len() == 2 {
        let log_probs_b = tokenizers.nulm_b().log_probs()?;
        toks.push(lattice::viterbi(
            &lattice::build_lattice(&example.texts[1], vocab)?,
            &log_probs_b,
        )?);
    }
    Ok(toks)
}

/// Viterbi-tokenizes every input, runs `predict`, and reports accuracy,
/// macro-F1 (averaged over classes present in the gold labels), and mean
/// tokens per sentence.
pub fn evaluate(
    corpus: &[LabeledExample],
    vocab: &SeedVocab,
    tokenizers: &Tokenizers,
    model: &dyn DownstreamModel,
) -> Result<EvalSummary> {
    let classes = model.num_classes();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut token_count = 0usize;
    let mut sentence_count = 0usize;
    for example in corpus {
        let toks = viterbi_inputs(example, vocab, tokenizers)?;
        let refs: Vec<&Tokenization> = toks.iter().collect();
        let pred = model.predict(&refs)?;
        confusion[example.label][pred] += 1;
        for t in &toks {
            token_count += t.word_ids.len();
            sentence_count += 1;
        }
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for c in 0..classes {
        let gold: usize = confusion[c].iter().sum();
        if gold == 0 {
            continue;
        }
        let predicted: usize = (0..classes).map(|g| confusion[g][c]).sum();
        let tp = confusion[c][c];
        let f1 = if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / predicted as f64;
            let recall = tp as f64 / gold as f64;
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        f1_classes += 1;
    }
    Ok(EvalSummary {
        accuracy: correct as f64 / total.max(1) as f64,
        macro_f1: if f1_classes == 0 {
            0.0
        } else {
            f1_sum / f1_classes as f64
        },
        mean_tokens_per_sentence: token_count as f64 / sentence_count.max(1) as f64,
    })
}

/// Mean posterior mass of segmentations that use `surface` as one token,
/// over the sentences of `texts` that contain it. `None` when no sentence
/// contains the surface or the surface is not in the vocabulary.
pub fn pattern_token_mass(
    texts: &[&str],
    vocab: &SeedVocab,
    log_probs: &[f64],
    surface: &str,
) -> Result<Option<f64>> {
    let Some(id) = vocab.id_of(surface) else {
        return Ok(None);
    };
    let mut masked = log_probs.to_vec();
    masked[id as usize] = f64::NEG_INFINITY;
    let mut total = 0.0;
    let mut count = 0usize;
    for text in texts {
        if !text.contains(surface) {
            continue;
        }
        let lat = lattice::build_lattice(text, vocab)?;
        let log_z = lattice::forward_log_z(&lat, log_probs, 1.0);
        let log_z_without = lattice::forward_log_z(&lat, &masked, 1.0);
        total += 1.0 - (log_z_without - log_z).exp();
        count += 1;
    }
    Ok(if count == 0 {
        None
    } else {
        Some(total / count as f64)
    })
}

fn tracked_mass(
    eval_corpus: &[LabeledExample],
    vocab: &SeedVocab,
    tokenizers: &Tokenizers,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let Some(surface) = cfg.tracked_surface.as_deref() else {
        return Ok(None);
    };
    let texts: Vec<&str> = eval_corpus
        .iter()
        .flat_map(|e| e.texts.iter().map(String::as_str))
        .collect();
    let log_probs = tokenizers.nulm_a().log_probs()?;
    pattern_token_mass(&texts, vocab, &log_probs, surface)
}

enum ModelRef<'a> {
    Mutable(&'a mut dyn DownstreamModel),
    Frozen(&'a dyn DownstreamModel),
}

impl ModelRef<'_> {
    fn as_ref(&self) -> &dyn DownstreamModel {
        match self {
            ModelRef::Mutable(m) => &**m,
            ModelRef::Frozen(m) => *m,
        }
    }
}

fn run_epochs(
    train: &[LabeledExample],
    eval_corpus: &[LabeledExample],
    vocab: &SeedVocab,
    tokenizers: &mut Tokenizers,
    mut model: ModelRef<'_>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Metrics> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut metrics = Metrics {
        start_tracked_mass: tracked_mass(eval_corpus, vocab, tokenizers, cfg)?,
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut tokenizer_loss_sum = 0.0;
        let mut downstream_loss_sum = 0.0;
        let mut downstream_steps = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let gate = schedule_gate(cfg.schedule, epoch, epochs, &mut rng);
            // Phase 1: tokenizer gradients for the whole batch from the
            // batch-start parameters.
            let mut samples: Vec<(usize, Vec<Tokenization>)> = Vec::with_capacity(batch.len());
            let mut acc_a: Option<NulmGrads> = None;
            let mut acc_b: Option<NulmGrads> = None;
            let accumulate = |acc: &mut Option<NulmGrads>, grads: NulmGrads| {
                match acc {
                    Some(total) => total.add_assign(&grads),
                    None => *acc = Some(grads),
                }
            };
            for &idx in batch {
                let example = &train[idx];
                match tokenizers {
                    Tokenizers::Single(nulm) => {
                        let eval =
                            eval_single(example, vocab, nulm, model.as_ref(), cfg, &mut rng)?;
                        tokenizer_loss_sum += eval.tokenizer_loss;
                        accumulate(&mut acc_a, eval.grads);
                        samples.push((idx, vec![eval.sampled]));
                    }
                    Tokenizers::SharedPair(nulm) => {
                        let eval =
                            eval_pair(example, vocab, nulm, nulm, model.as_ref(), cfg, &mut rng)?;
                        tokenizer_loss_sum += 0.5 * (eval.loss_a + eval.loss_b);
                        if gate.0 {
                            accumulate(&mut acc_a, eval.grads_a);
                        }
                        if gate.1 {
                            accumulate(&mut acc_a, eval.grads_b);
                        }
                        samples.push((idx, vec![eval.sampled_a, eval.sampled_b]));
                    }
                    Tokenizers::SplitPair { a, b } => {
                        let eval =
                            eval_pair(example, vocab, a, b, model.as_ref(), cfg, &mut rng)?;
                        tokenizer_loss_sum += 0.5 * (eval.loss_a + eval.loss_b);
                        if gate.0 {
                            accumulate(&mut acc_a, eval.grads_a);
                        }
                        if gate.1 {
                            accumulate(&mut acc_b, eval.grads_b);
                        }
                        samples.push((idx, vec![eval.sampled_a, eval.sampled_b]));
                    }
                }
            }
            // Phase 2: apply the mean tokenizer gradient per side.
            let scale = 1.0 / batch.len() as f64;
            let mut batch_norm_sq = 0.0;
            if let Some(mut grads) = acc_a {
                grads.scale(scale);
                batch_norm_sq += grads.norm().powi(2);
                match tokenizers {
                    Tokenizers::Single(nulm)
                    | Tokenizers::SharedPair(nulm)
                    | Tokenizers::SplitPair { a: nulm, .. } => nulm.step(&grads),
                }
            }
            if let Some(mut grads) = acc_b {
                grads.scale(scale);
                batch_norm_sq += grads.norm().powi(2);
                if let Tokenizers::SplitPair { b, .. } = tokenizers {
                    b.step(&grads);
                }
            }
            grad_norm_sum += batch_norm_sq.sqrt();
            batches += 1;
            // Phase 3: downstream updates on the sampled tokenizations.
            if let ModelRef::Mutable(model) = &mut model {
                for (idx, toks) in &samples {
                    let refs: Vec<&Tokenization> = toks.iter().collect();
                    downstream_loss_sum += model.train_step(&refs, train[*idx].label)?;
                    downstream_steps += 1;
                }
            }
        }
        let eval_summary = evaluate(eval_corpus, vocab, tokenizers, model.as_ref())?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            tokenizer_loss: tokenizer_loss_sum / train.len().max(1) as f64,
            downstream_loss: if downstream_steps == 0 {
                0.0
            } else {
                downstream_loss_sum / downstream_steps as f64
            },
            accuracy: eval_summary.accuracy,
            macro_f1: eval_summary.macro_f1,
            mean_tokens_per_sentence: eval_summary.mean_tokens_per_sentence,
            tokenizer_grad_norm: grad_norm_sum / batches.max(1) as f64,
            tracked_mass: tracked_mass(eval_corpus, vocab, tokenizers, cfg)?,
        });
    }
    Ok(metrics)
}

/// Joint training: `cfg.epochs` over seeded shuffles of `train`, with
/// per-epoch evaluation on `eval_corpus`.
pub fn train_joint(
    train: &[LabeledExample],
    eval_corpus: &[LabeledExample],
    vocab: &SeedVocab,
    tokenizers: &mut Tokenizers,
    model: &mut dyn DownstreamModel,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    run_epochs(
        train,
        eval_corpus,
        vocab,
        tokenizers,
        ModelRef::Mutable(model),
        cfg,
        cfg.epochs,
    )
}

/// Post-processing: `cfg.post_epochs` of tokenizer-only updates against a
/// frozen downstream model. The immutable borrow guarantees the model's
/// parameters cannot change.
pub fn post_train(
    train: &[LabeledExample],
    eval_corpus: &[LabeledExample],
    vocab: &SeedVocab,
    tokenizers: &mut Tokenizers,
    model: &dyn DownstreamModel,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    run_epochs(
        train,
        eval_corpus,
        vocab,
        tokenizers,
        ModelRef::Frozen(model),
        cfg,
        cfg.post_epochs,
    )
}

/// Ratio of Viterbi token counts: variant over baseline.
pub fn token_ratio(
    texts: &[&str],
    vocab: &SeedVocab,
    log_probs_variant: &[f64],
    log_probs_baseline: &[f64],
) -> Result<f64> {
    let mut variant = 0usize;
    let mut baseline = 0usize;
    for text in texts {
        let lat = lattice::build_lattice(text, vocab)?;
        variant += lattice::viterbi(&lat, log_probs_variant)?.word_ids.len();
        baseline += lattice::viterbi(&lat, log_probs_baseline)?.word_ids.len();
    }
    Ok(variant as f64 / baseline as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::MeanEmbedClassifier;
    use crate::nulm::NulmParams;
    use crate::opt::AdamHyper;

    fn fixture_vocab() -> SeedVocab {
        SeedVocab::from_probs(vec![
            ("a".to_string(), 0.4),
            ("b".to_string(), 0.2),
            ("ab".to_string(), 0.4),
        ])
        .unwrap()
    }

    fn fixture_nulm() -> Nulm {
        Nulm::from_params(
            NulmParams::with_target_probs(&[0.4, 0.2, 0.4]),
            AdamHyper::default(),
        )
    }

    /// A model whose loss depends only on token count: fewer tokens, lower
    /// loss. Makes the tokenizer's descent direction predictable.
    struct TokenCountLoss;
    impl DownstreamModel for TokenCountLoss {
        fn num_inputs(&self) -> usize {
            1
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn loss(&self, inputs: &[&Tokenization], _label: usize) -> Result<f64> {
            Ok(inputs.iter().map(|t| t.word_ids.len() as f64).sum())
        }
        fn train_step(&mut self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
            self.loss(inputs, label)
        }
        fn predict(&self, _inputs: &[&Tokenization]) -> Result<usize> {
            Ok(0)
        }
    }

    #[test]
    fn single_step_fixture_loss_and_descent() {
        // Candidates [ab] (loss 1) and [a,b] (loss 2): L_s = 7/6, and the
        // step raises p(ab).
        let vocab = fixture_vocab();
        let mut nulm = fixture_nulm();
        let mut model = TokenCountLoss;
        let cfg = TrainConfig {
            n_best: 2,
            ..TrainConfig::default()
        };
        let p_ab_before = nulm.log_probs().unwrap()[2].exp();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let example = LabeledExample::single("ab", 1);
        let stats =
            train_step_single(&example, &vocab, &mut nulm, &mut model, &cfg, &mut rng).unwrap();
        assert!((stats.tokenizer_loss - 7.0 / 6.0).abs() < 1e-9);
        let p_ab_after = nulm.log_probs().unwrap()[2].exp();
        assert!(p_ab_after > p_ab_before);
    }

    #[test]
    fn n1_has_zero_tokenizer_gradient() {
        let vocab = fixture_vocab();
        let mut nulm = fixture_nulm();
        let params_before = nulm.params.clone();
        let mut model = TokenCountLoss;
        let cfg = TrainConfig {
            n_best: 1,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let stats = train_step_single(
            &LabeledExample::single("ab", 0),
            &vocab,
            &mut nulm,
            &mut model,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(nulm.params, params_before);
    }

    #[test]
    fn single_segmentation_sentence_samples_its_only_path() {
        let vocab = SeedVocab::from_probs(vec![("a".to_string(), 1.0)]).unwrap();
        let nulm = Nulm::from_params(NulmParams::with_target_probs(&[0.9]), AdamHyper::default());
        let lat = lattice::build_lattice("aaa", &vocab).unwrap();
        let log_probs = nulm.log_probs().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let cfg = TrainConfig::default();
        let sampled = sample_tokenization(&lat, &log_probs, &cfg, &mut rng).unwrap();
        let best = lattice::viterbi(&lat, &log_probs).unwrap();
        assert_eq!(sampled.word_ids, best.word_ids);
    }

    #[test]
    fn schedule_gates() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        assert_eq!(schedule_gate(Schedule::Both, 7, 10, &mut rng), (true, true));
        assert_eq!(schedule_gate(Schedule::AThenB, 49, 100, &mut rng), (true, false));
        assert_eq!(schedule_gate(Schedule::AThenB, 50, 100, &mut rng), (false, true));
        assert_eq!(schedule_gate(Schedule::BThenA, 49, 100, &mut rng), (false, true));
        assert_eq!(schedule_gate(Schedule::BThenA, 50, 100, &mut rng), (true, false));
    }

    #[test]
    fn random_schedule_is_balanced_and_reproducible() {
        let draw = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..10_000)
                .map(|_| schedule_gate(Schedule::Random, 0, 1, &mut rng))
                .collect::<Vec<_>>()
        };
        let gates = draw(9);
        assert_eq!(gates, draw(9));
        let a_only = gates.iter().filter(|g| **g == (true, false)).count();
        let rate = a_only as f64 / gates.len() as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate = {rate}");
        assert!(gates.iter().all(|g| g.0 ^ g.1));
    }

    #[test]
    fn gated_pair_step_leaves_other_side_unchanged() {
        let vocab = fixture_vocab();
        let mut tokenizers = Tokenizers::SplitPair {
            a: fixture_nulm(),
            b: fixture_nulm(),
        };
        struct PairCountLoss;
        impl DownstreamModel for PairCountLoss {
            fn num_inputs(&self) -> usize {
                2
            }
            fn num_classes(&self) -> usize {
                2
            }
            fn loss(&self, inputs: &[&Tokenization], _label: usize) -> Result<f64> {
                Ok(inputs.iter().map(|t| t.word_ids.len() as f64).sum())
            }
            fn train_step(&mut self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
                self.loss(inputs, label)
            }
            fn predict(&self, _inputs: &[&Tokenization]) -> Result<usize> {
                Ok(0)
            }
        }
        let mut model = PairCountLoss;
        let cfg = TrainConfig {
            n_best: 2,
            ..TrainConfig::default()
        };
        let b_before = tokenizers.nulm_b().params.clone();
        let p_ab_before = tokenizers.nulm_a().log_probs().unwrap()[2].exp();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        train_step_pair(
            &LabeledExample::pair("ab", "ab", 1),
            &vocab,
            &mut tokenizers,
            &mut model,
            &cfg,
            (true, false),
            &mut rng,
        )
        .unwrap();
        assert_eq!(tokenizers.nulm_b().params, b_before);
        let p_ab_after = tokenizers.nulm_a().log_probs().unwrap()[2].exp();
        assert!(p_ab_after > p_ab_before);
    }

    #[test]
    fn shared_pair_accumulates_both_sides() {
        let vocab = fixture_vocab();
        let mut shared = Tokenizers::SharedPair(fixture_nulm());
        // num_inputs mismatch is fine: the count loss ignores arity.
        struct Pair2(TokenCountLoss);
        impl DownstreamModel for Pair2 {
            fn num_inputs(&self) -> usize {
                2
            }
            fn num_classes(&self) -> usize {
                2
            }
            fn loss(&self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
                self.0.loss(inputs, label)
            }
            fn train_step(&mut self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
                self.0.train_step(inputs, label)
            }
            fn predict(&self, inputs: &[&Tokenization]) -> Result<usize> {
                self.0.predict(inputs)
            }
        }
        let mut pair_model = Pair2(TokenCountLoss);
        let cfg = TrainConfig {
            n_best: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let stats = train_step_pair(
            &LabeledExample::pair("ab", "ab", 1),
            &vocab,
            &mut shared,
            &mut pair_model,
            &cfg,
            (true, true),
            &mut rng,
        )
        .unwrap();
        assert!(stats.grad_norm > 0.0);
    }

    #[test]
    fn evaluate_perfect_and_constant_predictors() {
        let vocab = fixture_vocab();
        let tokenizers = Tokenizers::Single(fixture_nulm());
        let corpus = vec![
            LabeledExample::single("ab", 1),
            LabeledExample::single("a", 0),
            LabeledExample::single("b", 0),
            LabeledExample::single("ab", 1),
        ];

        struct Oracle;
        impl DownstreamModel for Oracle {
            fn num_inputs(&self) -> usize {
                1
            }
            fn num_classes(&self) -> usize {
                2
            }
            fn loss(&self, _: &[&Tokenization], _: usize) -> Result<f64> {
                Ok(0.0)
            }
            fn train_step(&mut self, _: &[&Tokenization], _: usize) -> Result<f64> {
                Ok(0.0)
            }
            fn predict(&self, inputs: &[&Tokenization]) -> Result<usize> {
                // One token means the "ab" merge happened (fixture corpus).
                Ok(usize::from(inputs[0].word_ids == vec![2]))
            }
        }
        let summary = evaluate(&corpus, &vocab, &tokenizers, &Oracle).unwrap();
        assert_eq!(summary.accuracy, 1.0);
        assert_eq!(summary.macro_f1, 1.0);

        let constant = TokenCountLoss; // always predicts class 0
        let summary = evaluate(&corpus, &vocab, &tokenizers, &constant).unwrap();
        assert_eq!(summary.accuracy, 0.5);
    }

    #[test]
    fn evaluate_matches_independent_confusion_matrix() {
        let vocab = fixture_vocab();
        let tokenizers = Tokenizers::Single(fixture_nulm());
        let corpus: Vec<LabeledExample> = ["ab", "a", "b", "ab", "aab", "ba"]
            .iter()
            .enumerate()
            .map(|(i, s)| LabeledExample::single(*s, i % 2))
            .collect();
        let model = MeanEmbedClassifier::new(3, 4, 2, 77, AdamHyper::default());
        let summary = evaluate(&corpus, &vocab, &tokenizers, &model).unwrap();

        // Independent recomputation from scratch.
        let log_probs = tokenizers.nulm_a().log_probs().unwrap();
        let mut tp = [0usize; 2];
        let mut gold_n = [0usize; 2];
        let mut pred_n = [0usize; 2];
        let mut correct = 0;
        for ex in &corpus {
            let lat = lattice::build_lattice(&ex.texts[0], &vocab).unwrap();
            let t = lattice::viterbi(&lat, &log_probs).unwrap();
            let pred = model.predict(&[&t]).unwrap();
            gold_n[ex.label] += 1;
            pred_n[pred] += 1;
            if pred == ex.label {
                tp[ex.label] += 1;
                correct += 1;
            }
        }
        let acc = correct as f64 / corpus.len() as f64;
        assert!((summary.accuracy - acc).abs() < 1e-12);
        let mut f1s = Vec::new();
        for c in 0..2 {
            if gold_n[c] == 0 {
                continue;
            }
            let f1 = if tp[c] == 0 {
                0.0
            } else {
                let p = tp[c] as f64 / pred_n[c] as f64;
                let r = tp[c] as f64 / gold_n[c] as f64;
                2.0 * p * r / (p + r)
            };
            f1s.push(f1);
        }
        let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        assert!((summary.macro_f1 - macro_f1).abs() < 1e-12);
    }

    #[test]
    fn token_ratio_identity_and_split() {
        let vocab = fixture_vocab();
        let texts = vec!["ab", "ab", "ab"];
        let lp = vocab.seed_logprobs();
        assert_eq!(token_ratio(&texts, &vocab, &lp, &lp).unwrap(), 1.0);
        // Variant that kills the multi-character entry: 2 tokens vs 1.
        let mut chars_only = lp.clone();
        chars_only[2] = f64::NEG_INFINITY;
        let ratio = token_ratio(&texts, &vocab, &chars_only, &lp).unwrap();
        assert_eq!(ratio, 2.0);
        assert!(ratio > 1.0);
    }

    #[test]
    fn zero_epochs_leaves_state_bit_identical() {
        let vocab = fixture_vocab();
        let mut tokenizers = Tokenizers::Single(fixture_nulm());
        let before = tokenizers.nulm_a().params.clone();
        let mut model = MeanEmbedClassifier::new(3, 4, 2, 0, AdamHyper::default());
        let model_before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let corpus = vec![LabeledExample::single("ab", 1)];
        let metrics =
            train_joint(&corpus, &corpus, &vocab, &mut tokenizers, &mut model, &cfg).unwrap();
        assert!(metrics.epochs.is_empty());
        assert_eq!(tokenizers.nulm_a().params, before);
        assert_eq!(model.params, model_before);
    }

    #[test]
    fn identical_seeds_give_bit_identical_metrics() {
        let vocab = fixture_vocab();
        let corpus = vec![
            LabeledExample::single("ab", 1),
            LabeledExample::single("ba", 0),
            LabeledExample::single("aab", 1),
            LabeledExample::single("bb", 0),
        ];
        let cfg = TrainConfig {
            n_best: 2,
            epochs: 3,
            batch_size: 2,
            seed: 21,
            tracked_surface: Some("ab".to_string()),
            ..TrainConfig::default()
        };
        let run = || {
            let mut tokenizers = Tokenizers::Single(fixture_nulm());
            let mut model = MeanEmbedClassifier::new(3, 4, 2, 1, AdamHyper::default());
            train_joint(&corpus, &corpus, &vocab, &mut tokenizers, &mut model, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn post_train_cannot_touch_downstream_parameters() {
        let vocab = fixture_vocab();
        let mut tokenizers = Tokenizers::Single(fixture_nulm());
        let model = MeanEmbedClassifier::new(3, 4, 2, 2, AdamHyper::default());
        let model_params = model.params.clone();
        let cfg = TrainConfig {
            n_best: 2,
            post_epochs: 2,
            ..TrainConfig::default()
        };
        let corpus = vec![
            LabeledExample::single("ab", 1),
            LabeledExample::single("ba", 0),
        ];
        post_train(&corpus, &corpus, &vocab, &mut tokenizers, &model, &cfg).unwrap();
        assert_eq!(model.params, model_params);
    }

    #[test]
    fn tokenizer_loss_is_convex_combination_of_candidate_losses() {
        let vocab = fixture_vocab();
        let nulm = fixture_nulm();
        let model = TokenCountLoss;
        let cfg = TrainConfig {
            n_best: 3,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for text in ["ab", "abab", "aabb"] {
            let example = LabeledExample::single(text, 0);
            let eval = eval_single(&example, &vocab, &nulm, &model, &cfg, &mut rng).unwrap();
            let log_probs = nulm.log_probs().unwrap();
            let lat = lattice::build_lattice(text, &vocab).unwrap();
            let cands = lattice::nbest(&lat, &log_probs, cfg.n_best).unwrap();
            let losses: Vec<f64> = cands
                .iter()
                .map(|c| model.loss(&[c], 0).unwrap())
                .collect();
            let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(eval.tokenizer_loss >= lo - 1e-12 && eval.tokenizer_loss <= hi + 1e-12);
        }
    }

    #[test]
    fn pattern_mass_tracks_probability_of_merged_token() {
        let vocab = fixture_vocab();
        let lp = vocab.seed_logprobs();
        let mass = pattern_token_mass(&["ab"], &vocab, &lp, "ab")
            .unwrap()
            .unwrap();
        // P([ab]) = 0.4 / 0.48.
        assert!((mass - 5.0 / 6.0).abs() < 1e-9);
        assert!(pattern_token_mass(&["bb"], &vocab, &lp, "ab").unwrap().is_none());
        assert!(pattern_token_mass(&["ab"], &vocab, &lp, "zz").unwrap().is_none());
    }
}
