//! The neural unigram language model: one embedding per vocabulary word fed
//! through a single tanh hidden layer to a scalar logit, softmaxed over the
//! vocabulary.
//!
//! Besides the forward pass this module carries the model's pretraining
//! toward a seed distribution and the loss-weighted tokenizer objective:
//! candidate losses are mixed with weights `a_n = p(s'_n) / Σ_m p(s'_m)`
//! and the weighted sum is differentiated treating the losses as constants,
//! so gradients flow only through the candidate probabilities.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::lattice::Tokenization;
use crate::opt::{AdamHyper, AdamState};

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_PRETRAIN_TOL: f64 = 1e-7;
pub const DEFAULT_PRETRAIN_MAX_EPOCHS: usize = 100_000;

/// Word embeddings plus MLP weights. `embeddings` is `|V|×d`; the hidden
/// layer is `w1: h×d`, `b1: h` with tanh activation, and `w2: h`, `b2`
/// produce the scalar logit per word.
#[derive(Debug, Clone, PartialEq)]
pub struct NulmParams {
    pub embeddings: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

/// Gradients with the same shapes as [`NulmParams`].
#[derive(Debug, Clone)]
pub struct NulmGrads {
    pub embeddings: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl NulmParams {
    /// Random embeddings and first layer; output layer zeroed so the
    /// initial distribution over the vocabulary is exactly uniform.
    pub fn new_random(vocab_size: usize, d: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, scale: f64| {
            Array1::from_iter((0..n).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale))
        };
        NulmParams {
            embeddings: uniform(vocab_size * d, 0.1)
                .into_shape_with_order((vocab_size, d))
                .unwrap(),
            w1: uniform(h * d, (1.0 / d as f64).sqrt())
                .into_shape_with_order((h, d))
                .unwrap(),
            b1: Array1::zeros(h),
            w2: Array1::zeros(h),
            b2: 0.0,
        }
    }

    /// Parameters that realize a given probability distribution exactly
    /// (up to float rounding), via a one-dimensional identity network.
    /// Diagnostic helper for fixtures that need known word probabilities.
    pub fn with_target_probs(probs: &[f64]) -> Self {
        assert!(probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Center within tanh's open range and widen the output weight so any
        // spread of log-probs is representable.
        let b2 = 0.5 * (lo + hi);
        let scale = ((hi - lo) / 1.8).max(1.0);
        let embeddings =
            Array2::from_shape_fn((probs.len(), 1), |(i, _)| ((logs[i] - b2) / scale).atanh());
        NulmParams {
            embeddings,
            w1: Array2::from_elem((1, 1), 1.0),
            b1: Array1::zeros(1),
            w2: Array1::from_elem(1, scale),
            b2,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.embeddings.ncols(), self.w1.nrows())
    }

    fn hidden(&self) -> Array2<f64> {
        let mut h = self.embeddings.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(f64::tanh);
        h
    }

    /// One scalar logit per vocabulary word.
    pub fn word_logits(&self) -> Result<Array1<f64>> {
        let logits = self.hidden().dot(&self.w2) + self.b2;
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow);
        }
        Ok(logits)
    }

    /// Log-softmax of [`word_logits`](Self::word_logits); `exp` sums to 1.
    pub fn log_unigram_probs(&self) -> Result<Vec<f64>> {
        Ok(log_softmax(self.word_logits()?.as_slice().unwrap()))
    }

    pub fn flat_sizes(&self) -> Vec<usize> {
        vec![
            self.embeddings.len(),
            self.w1.len(),
            self.b1.len(),
            self.w2.len(),
            1,
        ]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.embeddings.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            std::slice::from_mut(&mut self.b2),
        ]
    }
}

impl NulmGrads {
    fn zeros_like(params: &NulmParams) -> Self {
        NulmGrads {
            embeddings: Array2::zeros(params.embeddings.raw_dim()),
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array1::zeros(params.b1.raw_dim()),
            w2: Array1::zeros(params.w2.raw_dim()),
            b2: 0.0,
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            self.embeddings.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            std::slice::from_ref(&self.b2),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &NulmGrads) {
        self.embeddings += &other.embeddings;
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += other.b2;
    }

    pub fn scale(&mut self, factor: f64) {
        self.embeddings *= factor;
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max
        + logits
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `Σ_{w ∈ s'} log p(w)` for a tokenization.
pub fn tokenization_logprob(tok: &Tokenization, log_probs: &[f64]) -> f64 {
    tok.word_ids.iter().map(|&id| log_probs[id as usize]).sum()
}

/// Backpropagates a gradient on the per-word logits into all parameters.
fn backprop_logits(params: &NulmParams, dlogits: &Array1<f64>) -> NulmGrads {
    let hidden = params.hidden();
    let db2 = dlogits.sum();
    let dw2 = hidden.t().dot(dlogits);
    // dH = dlogits ⊗ w2, then through tanh.
    let mut dhpre = Array2::from_shape_fn(hidden.raw_dim(), |(i, j)| dlogits[i] * params.w2[j]);
    dhpre *= &hidden.mapv(|t| 1.0 - t * t);
    let dw1 = dhpre.t().dot(&params.embeddings);
    let db1 = dhpre.sum_axis(Axis(0));
    let dembed = dhpre.dot(&params.w1);
    NulmGrads {
        embeddings: dembed,
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
    }
}

/// The loss-weighted tokenizer objective and its analytic gradient.
///
/// Weights are the candidate probabilities under the current parameters,
/// normalized to sum 1 (a softmax over candidate log-probabilities); the
/// returned loss is the weighted sum of `losses`. Downstream loss values
/// are treated as constants, so a single candidate yields exactly zero
/// gradients.
pub fn tokenizer_loss_and_grad(
    params: &NulmParams,
    candidates: &[Tokenization],
    losses: &[f64],
) -> Result<(f64, NulmGrads)> {
    assert_eq!(candidates.len(), losses.len());
    assert!(!candidates.is_empty());
    assert!(losses.iter().all(|l| l.is_finite()));
    if candidates.len() == 1 {
        return Ok((losses[0], NulmGrads::zeros_like(params)));
    }
    let log_probs = params.log_unigram_probs()?;
    let cand_logprobs: Vec<f64> = candidates
        .iter()
        .map(|c| tokenization_logprob(c, &log_probs))
        .collect();
    let weights = softmax(&cand_logprobs);
    let total_loss: f64 = weights.iter().zip(losses).map(|(a, l)| a * l).sum();

    // dL/d(log p_n) = a_n (ℓ_n − L); distribute over word occurrences.
    let mut coeff = vec![0.0f64; params.vocab_size()];
    for ((cand, &a), &l) in candidates.iter().zip(&weights).zip(losses) {
        let dlp = a * (l - total_loss);
        for &id in &cand.word_ids {
            coeff[id as usize] += dlp;
        }
    }
    // log-softmax backward: dlogits = c − p · Σ_w c_w.
    let coeff_sum: f64 = coeff.iter().sum();
    let dlogits = Array1::from_shape_fn(params.vocab_size(), |w| {
        coeff[w] - log_probs[w].exp() * coeff_sum
    });
    Ok((total_loss, backprop_logits(params, &dlogits)))
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).iter().map(|&x| x.exp()).collect()
}

/// One Adam step; deterministic given identical state.
pub fn apply_update(params: &mut NulmParams, grads: &NulmGrads, opt: &mut AdamState) {
    opt.apply(params.flat_mut(), &grads.flat());
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOptions {
    pub tol: f64,
    pub max_epochs: usize,
    pub lr: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            tol: DEFAULT_PRETRAIN_TOL,
            max_epochs: DEFAULT_PRETRAIN_MAX_EPOCHS,
            lr: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    pub converged: bool,
    pub epochs: usize,
    pub final_kl: f64,
}

/// Fits the model distribution to the seed distribution by full-batch
/// cross-entropy descent, stopping when `KL(seed ‖ model) < tol` or at the
/// epoch cap. Non-convergence is reported, not an error.
pub fn pretrain(
    params: &mut NulmParams,
    seed_logprobs: &[f64],
    opts: PretrainOptions,
) -> Result<PretrainReport> {
    assert!(opts.tol > 0.0);
    assert_eq!(seed_logprobs.len(), params.vocab_size());
    let seed_probs: Vec<f64> = seed_logprobs.iter().map(|&lp| lp.exp()).collect();
    let mut opt = AdamState::new(AdamHyper::with_lr(opts.lr), &params.flat_sizes());
    let mut best_kl = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..opts.max_epochs {
        let log_probs = params.log_unigram_probs()?;
        let kl: f64 = seed_probs
            .iter()
            .zip(seed_logprobs)
            .zip(&log_probs)
            .map(|((&p, &slp), &mlp)| if p > 0.0 { p * (slp - mlp) } else { 0.0 })
            .sum();
        if kl < opts.tol {
            return Ok(PretrainReport {
                converged: true,
                epochs: epoch,
                final_kl: kl,
            });
        }
        if kl < best_kl - 1e-15 {
            best_kl = kl;
            stale = 0;
        } else {
            stale += 1;
            // Adam oscillates at a fixed step scale near the optimum;
            // halve the rate when progress stalls.
            if stale >= 300 {
                opt.hyper.lr = (opt.hyper.lr * 0.5).max(1e-7);
                stale = 0;
            }
        }
        let dlogits = Array1::from_shape_fn(params.vocab_size(), |w| {
            log_probs[w].exp() - seed_probs[w]
        });
        let grads = backprop_logits(params, &dlogits);
        apply_update(params, &grads, &mut opt);
    }
    let log_probs = params.log_unigram_probs()?;
    let kl: f64 = seed_probs
        .iter()
        .zip(seed_logprobs)
        .zip(&log_probs)
        .map(|((&p, &slp), &mlp)| if p > 0.0 { p * (slp - mlp) } else { 0.0 })
        .sum();
    Ok(PretrainReport {
        converged: false,
        epochs: opts.max_epochs,
        final_kl: kl,
    })
}

/// A NULM bundled with its optimizer state.
#[derive(Debug, Clone)]
pub struct Nulm {
    pub params: NulmParams,
    pub opt: AdamState,
}

impl Nulm {
    pub fn new(vocab_size: usize, d: usize, h: usize, seed: u64, hyper: AdamHyper) -> Self {
        let params = NulmParams::new_random(vocab_size, d, h, seed);
        let opt = AdamState::new(hyper, &params.flat_sizes());
        Nulm { params, opt }
    }

    pub fn from_params(params: NulmParams, hyper: AdamHyper) -> Self {
        let opt = AdamState::new(hyper, &params.flat_sizes());
        Nulm { params, opt }
    }

    pub fn log_probs(&self) -> Result<Vec<f64>> {
        self.params.log_unigram_probs()
    }

    pub fn step(&mut self, grads: &NulmGrads) {
        apply_update(&mut self.params, grads, &mut self.opt);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Tokenization;

    fn tok(ids: &[u32]) -> Tokenization {
        Tokenization {
            word_ids: ids.to_vec(),
            logprob: 0.0,
        }
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let params = NulmParams {
            embeddings: Array2::zeros((4, 3)),
            w1: Array2::zeros((2, 3)),
            b1: Array1::zeros(2),
            w2: Array1::zeros(2),
            b2: 0.0,
        };
        let logits = params.word_logits().unwrap();
        assert!(logits.iter().all(|&x| x == 0.0));
        let lp = params.log_unigram_probs().unwrap();
        for &x in &lp {
            assert!((x + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_embeddings_give_identical_logits() {
        let mut params = NulmParams::new_random(3, 4, 5, 1);
        let row = params.embeddings.row(0).to_owned();
        params.embeddings.row_mut(2).assign(&row);
        let logits = params.word_logits().unwrap();
        assert!((logits[0] - logits[2]).abs() < 1e-15);
    }

    #[test]
    fn logits_match_straight_line_recomputation() {
        let params = NulmParams::new_random(3, 4, 5, 9);
        let logits = params.word_logits().unwrap();
        for w in 0..3 {
            let mut expect = params.b2;
            for j in 0..5 {
                let mut pre = params.b1[j];
                for k in 0..4 {
                    pre += params.w1[(j, k)] * params.embeddings[(w, k)];
                }
                expect += params.w2[j] * pre.tanh();
            }
            assert!((logits[w] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn log_probs_hand_softmax_and_shift_invariance() {
        let params = NulmParams::with_target_probs(&[0.5, 0.25, 0.25]);
        let lp = params.log_unigram_probs().unwrap();
        assert!((lp[0].exp() - 0.5).abs() < 1e-12);
        assert!((lp[1].exp() - 0.25).abs() < 1e-12);
        let sum: f64 = lp.iter().map(|&x| x.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = [0.5f64, 0.25, 0.25]
            .iter()
            .map(|p| p.ln() + 7.5)
            .collect();
        let base: Vec<f64> = [0.5f64, 0.25, 0.25].iter().map(|p| p.ln()).collect();
        for (a, b) in log_softmax(&shifted).iter().zip(log_softmax(&base).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tokenization_logprob_sums() {
        let lp = [0.4f64.ln(), 0.2f64.ln(), 0.4f64.ln()];
        assert!((tokenization_logprob(&tok(&[2]), &lp) - 0.4f64.ln()).abs() < 1e-12);
        assert!((tokenization_logprob(&tok(&[0, 1]), &lp) - 0.08f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_loss_fixture() {
        // Candidates with probabilities 0.4 and 0.08, losses 1.0 and 2.0:
        // a = (5/6, 1/6), L = 7/6.
        let params = NulmParams::with_target_probs(&[0.4, 0.2, 0.4]);
        let candidates = vec![tok(&[2]), tok(&[0, 1])];
        let losses = vec![1.0, 2.0];
        let (loss, grads) = tokenizer_loss_and_grad(&params, &candidates, &losses).unwrap();
        assert!((loss - 7.0 / 6.0).abs() < 1e-9, "loss = {loss}");
        assert!(grads.norm() > 0.0);
    }

    #[test]
    fn equal_losses_give_zero_gradient() {
        let params = NulmParams::with_target_probs(&[0.4, 0.2, 0.4]);
        let candidates = vec![tok(&[2]), tok(&[0, 1])];
        let (loss, grads) = tokenizer_loss_and_grad(&params, &candidates, &[1.5, 1.5]).unwrap();
        assert!((loss - 1.5).abs() < 1e-12);
        assert!(grads.norm() < 1e-14, "norm = {}", grads.norm());
    }

    #[test]
    fn single_candidate_gives_zero_gradient() {
        let params = NulmParams::new_random(5, 3, 3, 2);
        let (loss, grads) = tokenizer_loss_and_grad(&params, &[tok(&[1, 2])], &[0.7]).unwrap();
        assert_eq!(loss, 0.7);
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn gradient_step_shifts_weight_to_low_loss_candidate() {
        let mut params = NulmParams::with_target_probs(&[0.4, 0.2, 0.4]);
        let candidates = vec![tok(&[2]), tok(&[0, 1])];
        let losses = vec![1.0, 2.0];
        let before = params.log_unigram_probs().unwrap();
        let a1_before = weight_of_first(&candidates, &before);
        let (loss_before, grads) =
            tokenizer_loss_and_grad(&params, &candidates, &losses).unwrap();
        let mut opt = AdamState::new(AdamHyper::with_lr(1e-3), &params.flat_sizes());
        apply_update(&mut params, &grads, &mut opt);
        let after = params.log_unigram_probs().unwrap();
        let a1_after = weight_of_first(&candidates, &after);
        let (loss_after, _) = tokenizer_loss_and_grad(&params, &candidates, &losses).unwrap();
        assert!(a1_after > a1_before, "{a1_after} <= {a1_before}");
        assert!(loss_after < loss_before, "{loss_after} >= {loss_before}");
    }

    fn weight_of_first(candidates: &[Tokenization], log_probs: &[f64]) -> f64 {
        let lps: Vec<f64> = candidates
            .iter()
            .map(|c| tokenization_logprob(c, log_probs))
            .collect();
        softmax(&lps)[0]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let candidates = vec![tok(&[2]), tok(&[0, 1]), tok(&[0, 1, 1])];
        let losses = vec![0.9, 1.7, 0.3];
        for seed in 0..20 {
            let params = NulmParams::new_random(3, 2, 3, seed);
            let (_, grads) = tokenizer_loss_and_grad(&params, &candidates, &losses).unwrap();
            check_fd(&params, &grads, |p| {
                tokenizer_loss_and_grad(p, &candidates, &losses).unwrap().0
            });
        }
    }

    /// Central finite differences against analytic gradients, per coordinate.
    pub(crate) fn check_fd(
        params: &NulmParams,
        grads: &NulmGrads,
        f: impl Fn(&NulmParams) -> f64,
    ) {
        let eps = 1e-5;
        let flat_grads: Vec<f64> = grads.flat().iter().flat_map(|s| s.iter().copied()).collect();
        let mut idx = 0;
        for slot in 0..5 {
            let len = {
                let mut p = params.clone();
                p.flat_mut()[slot].len()
            };
            for i in 0..len {
                let mut plus = params.clone();
                plus.flat_mut()[slot][i] += eps;
                let mut minus = params.clone();
                minus.flat_mut()[slot][i] -= eps;
                let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
                let g = flat_grads[idx];
                let denom = g.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - g).abs() / denom < 1e-4,
                    "slot {slot} coord {i}: fd {fd} vs grad {g}"
                );
                idx += 1;
            }
        }
    }

    #[test]
    fn pretrain_uniform_seed_converges_immediately() {
        let mut params = NulmParams::new_random(4, 8, 8, 3);
        let seed: Vec<f64> = vec![(0.25f64).ln(); 4];
        let report = pretrain(&mut params, &seed, PretrainOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.epochs, 0);
    }

    #[test]
    fn pretrain_matches_seed_distribution() {
        let mut params = NulmParams::new_random(3, 8, 8, 4);
        let seed: Vec<f64> = [0.4f64, 0.2, 0.4].iter().map(|p| p.ln()).collect();
        let report = pretrain(
            &mut params,
            &seed,
            PretrainOptions {
                tol: 1e-7,
                max_epochs: 50_000,
                lr: 0.02,
            },
        )
        .unwrap();
        assert!(report.converged, "final KL = {}", report.final_kl);
        let lp = params.log_unigram_probs().unwrap();
        for (got, want) in lp.iter().zip([0.4f64, 0.2, 0.4]) {
            assert!((got.exp() - want).abs() < 1e-3);
        }
        assert!(report.final_kl < 1e-7);
    }
}
