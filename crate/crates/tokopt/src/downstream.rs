//! The pluggable downstream-model contract and two reference classifiers
//! with analytic gradients.
//!
//! The joint-training loop only ever asks a downstream model for loss
//! values, gradient steps, and predictions, so anything implementing
//! [`DownstreamModel`] plugs in. The reference models are mean-pooled
//! linear classifiers over token embeddings: [`MeanEmbedClassifier`] for
//! single-sentence tasks and [`PairClassifier`] for two-sentence tasks
//! (the two mean-pooled vectors concatenated before the head).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::lattice::Tokenization;
use crate::opt::{AdamHyper, AdamState};

pub const DEFAULT_EMBED_DIM: usize = 16;

/// One training instance: one or two raw sentences and a class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub texts: Vec<String>,
    pub label: usize,
}

impl LabeledExample {
    pub fn single(text: impl Into<String>, label: usize) -> Self {
        LabeledExample {
            texts: vec![text.into()],
            label,
        }
    }

    pub fn pair(a: impl Into<String>, b: impl Into<String>, label: usize) -> Self {
        LabeledExample {
            texts: vec![a.into(), b.into()],
            label,
        }
    }
}

/// Behavioral contract of a downstream model.
///
/// `loss` and `predict` must be deterministic and must not mutate
/// parameters; `train_step` returns the pre-update loss and then updates.
pub trait DownstreamModel {
    fn num_inputs(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn loss(&self, inputs: &[&Tokenization], label: usize) -> Result<f64>;
    fn train_step(&mut self, inputs: &[&Tokenization], label: usize) -> Result<f64>;
    fn predict(&self, inputs: &[&Tokenization]) -> Result<usize>;
}

/// Token embeddings plus a linear softmax head. The head width is `e` for
/// single-input models and `2e` for pair models.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub embeddings: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub embeddings: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ClassifierParams {
    fn new_random(vocab_size: usize, e: usize, classes: usize, inputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let embeddings = Array2::from_shape_fn((vocab_size, e), |_| {
            (rng.gen::<f64>() - 0.5) * 0.2
        });
        ClassifierParams {
            embeddings,
            head_w: Array2::zeros((classes, e * inputs)),
            head_b: Array1::zeros(classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn flat_sizes(&self) -> Vec<usize> {
        vec![self.embeddings.len(), self.head_w.len(), self.head_b.len()]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.embeddings.as_slice_mut().unwrap(),
            self.head_w.as_slice_mut().unwrap(),
            self.head_b.as_slice_mut().unwrap(),
        ]
    }

    fn mean_embed(&self, tok: &Tokenization) -> Array1<f64> {
        assert!(!tok.word_ids.is_empty());
        let mut x = Array1::zeros(self.embed_dim());
        for &id in &tok.word_ids {
            x += &self.embeddings.row(id as usize);
        }
        x / tok.word_ids.len() as f64
    }

    fn feature(&self, inputs: &[&Tokenization]) -> Array1<f64> {
        match inputs {
            [single] => self.mean_embed(single),
            [a, b] => {
                let mut x = Array1::zeros(self.embed_dim() * 2);
                x.slice_mut(ndarray::s![..self.embed_dim()])
                    .assign(&self.mean_embed(a));
                x.slice_mut(ndarray::s![self.embed_dim()..])
                    .assign(&self.mean_embed(b));
                x
            }
            _ => panic!("expected 1 or 2 inputs, got {}", inputs.len()),
        }
    }

    fn logits(&self, x: &Array1<f64>) -> Array1<f64> {
        self.head_w.dot(x) + &self.head_b
    }
}

impl ClassifierGrads {
    pub fn flat(&self) -> Vec<&[f64]> {
        vec![
            self.embeddings.as_slice().unwrap(),
            self.head_w.as_slice().unwrap(),
            self.head_b.as_slice().unwrap(),
        ]
    }
}

fn cross_entropy(logits: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    let lp = crate::nulm::log_softmax(logits.as_slice().unwrap());
    Ok(-lp[label])
}

fn classifier_loss(params: &ClassifierParams, inputs: &[&Tokenization], label: usize) -> Result<f64> {
    cross_entropy(&params.logits(&params.feature(inputs)), label)
}

fn classifier_loss_and_grad(
    params: &ClassifierParams,
    inputs: &[&Tokenization],
    label: usize,
) -> Result<(f64, ClassifierGrads)> {
    let e = params.embed_dim();
    let x = params.feature(inputs);
    let logits = params.logits(&x);
    let loss = cross_entropy(&logits, label)?;
    let probs = crate::nulm::log_softmax(logits.as_slice().unwrap());
    let mut dlogits = Array1::from_iter(probs.iter().map(|&lp| lp.exp()));
    dlogits[label] -= 1.0;

    let head_w_grad = Array2::from_shape_fn(params.head_w.raw_dim(), |(c, j)| dlogits[c] * x[j]);
    let dx = params.head_w.t().dot(&dlogits);
    let mut emb_grad = Array2::zeros(params.embeddings.raw_dim());
    for (slot, tok) in inputs.iter().enumerate() {
        let scale = 1.0 / tok.word_ids.len() as f64;
        let dxi = dx.slice(ndarray::s![slot * e..(slot + 1) * e]);
        for &id in &tok.word_ids {
            let mut row = emb_grad.row_mut(id as usize);
            row += &(&dxi * scale);
        }
    }
    Ok((
        loss,
        ClassifierGrads {
            embeddings: emb_grad,
            head_w: head_w_grad,
            head_b: dlogits,
        },
    ))
}

fn classifier_predict(params: &ClassifierParams, inputs: &[&Tokenization]) -> usize {
    let logits = params.logits(&params.feature(inputs));
    let mut best = 0;
    for c in 1..logits.len() {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// Mean-pooled token embeddings → linear head → softmax, for one input.
#[derive(Debug, Clone)]
pub struct MeanEmbedClassifier {
    pub params: ClassifierParams,
    pub opt: AdamState,
}

impl MeanEmbedClassifier {
    pub fn new(vocab_size: usize, e: usize, classes: usize, seed: u64, hyper: AdamHyper) -> Self {
        let params = ClassifierParams::new_random(vocab_size, e, classes, 1, seed);
        let opt = AdamState::new(hyper, &params.flat_sizes());
        MeanEmbedClassifier { params, opt }
    }
}

/// Two mean-pooled vectors concatenated before the head, for pair tasks.
#[derive(Debug, Clone)]
pub struct PairClassifier {
    pub params: ClassifierParams,
    pub opt: AdamState,
}

impl PairClassifier {
    pub fn new(vocab_size: usize, e: usize, classes: usize, seed: u64, hyper: AdamHyper) -> Self {
        let params = ClassifierParams::new_random(vocab_size, e, classes, 2, seed);
        let opt = AdamState::new(hyper, &params.flat_sizes());
        PairClassifier { params, opt }
    }
}

macro_rules! impl_downstream {
    ($ty:ty, $inputs:expr) => {
        impl DownstreamModel for $ty {
            fn num_inputs(&self) -> usize {
                $inputs
            }
            fn num_classes(&self) -> usize {
                self.params.num_classes()
            }
            fn loss(&self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
                assert_eq!(inputs.len(), $inputs);
                classifier_loss(&self.params, inputs, label)
            }
            fn train_step(&mut self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
                assert_eq!(inputs.len(), $inputs);
                let (loss, grads) = classifier_loss_and_grad(&self.params, inputs, label)?;
                self.opt.apply(self.params.flat_mut(), &grads.flat());
                Ok(loss)
            }
            fn predict(&self, inputs: &[&Tokenization]) -> Result<usize> {
                assert_eq!(inputs.len(), $inputs);
                Ok(classifier_predict(&self.params, inputs))
            }
        }
    };
}

impl_downstream!(MeanEmbedClassifier, 1);
impl_downstream!(PairClassifier, 2);

/// Single-input cross-entropy loss; standalone entry point mirrored by
/// [`MeanEmbedClassifier::loss`].
pub fn mean_embed_loss(params: &ClassifierParams, tok: &Tokenization, label: usize) -> Result<f64> {
    classifier_loss(params, &[tok], label)
}

pub fn mean_embed_loss_and_grad(
    params: &ClassifierParams,
    tok: &Tokenization,
    label: usize,
) -> Result<(f64, ClassifierGrads)> {
    classifier_loss_and_grad(params, &[tok], label)
}

/// Two-input cross-entropy loss; the head is position-aware.
pub fn pair_loss(
    params: &ClassifierParams,
    tok_a: &Tokenization,
    tok_b: &Tokenization,
    label: usize,
) -> Result<f64> {
    classifier_loss(params, &[tok_a, tok_b], label)
}

pub fn pair_loss_and_grad(
    params: &ClassifierParams,
    tok_a: &Tokenization,
    tok_b: &Tokenization,
    label: usize,
) -> Result<(f64, ClassifierGrads)> {
    classifier_loss_and_grad(params, &[tok_a, tok_b], label)
}
