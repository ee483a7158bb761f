//! Full training-state snapshots with bit-exact round-trips.
//!
//! Snapshots are JSON: dimensions, nested parameter arrays, optimizer
//! moments, the vocabulary, and the run seed. Floats are written in the
//! shortest decimal form that parses back to the same bits, so
//! save → load → save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::downstream::{
    ClassifierParams, DownstreamModel, MeanEmbedClassifier, PairClassifier,
};
use crate::error::{Error, Result};
use crate::lattice::Tokenization;
use crate::nulm::{Nulm, NulmParams};
use crate::opt::AdamState;
use crate::trainer::Tokenizers;
use crate::vocab::SeedVocab;

pub const SNAPSHOT_FORMAT: u32 = 1;

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Snapshot(format!("ragged rows in {what}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::Snapshot(format!("bad shape in {what}: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NulmState {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub opt: AdamState,
}

impl NulmState {
    pub fn capture(nulm: &Nulm) -> Self {
        let (d, h) = nulm.params.dims();
        NulmState {
            embed_dim: d,
            hidden_dim: h,
            embeddings: rows(&nulm.params.embeddings),
            w1: rows(&nulm.params.w1),
            b1: nulm.params.b1.to_vec(),
            w2: nulm.params.w2.to_vec(),
            b2: nulm.params.b2,
            opt: nulm.opt.clone(),
        }
    }

    pub fn restore(&self) -> Result<Nulm> {
        let params = NulmParams {
            embeddings: from_rows(&self.embeddings, "nulm embeddings")?,
            w1: from_rows(&self.w1, "nulm w1")?,
            b1: Array1::from_vec(self.b1.clone()),
            w2: Array1::from_vec(self.w2.clone()),
            b2: self.b2,
        };
        let (d, h) = params.dims();
        if d != self.embed_dim || h != self.hidden_dim {
            return Err(Error::Snapshot(format!(
                "nulm dims {d}x{h} do not match declared {}x{}",
                self.embed_dim, self.hidden_dim
            )));
        }
        Ok(Nulm {
            params,
            opt: self.opt.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub num_inputs: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub head_w: Vec<Vec<f64>>,
    pub head_b: Vec<f64>,
    pub opt: AdamState,
}

/// Either reference classifier, for loading without knowing the arity in
/// advance.
#[derive(Debug, Clone)]
pub enum AnyClassifier {
    Single(MeanEmbedClassifier),
    Pair(PairClassifier),
}

impl AnyClassifier {
    pub fn params(&self) -> &ClassifierParams {
        match self {
            AnyClassifier::Single(m) => &m.params,
            AnyClassifier::Pair(m) => &m.params,
        }
    }
}

impl DownstreamModel for AnyClassifier {
    fn num_inputs(&self) -> usize {
        match self {
            AnyClassifier::Single(m) => m.num_inputs(),
            AnyClassifier::Pair(m) => m.num_inputs(),
        }
    }
    fn num_classes(&self) -> usize {
        match self {
            AnyClassifier::Single(m) => m.num_classes(),
            AnyClassifier::Pair(m) => m.num_classes(),
        }
    }
    fn loss(&self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
        match self {
            AnyClassifier::Single(m) => m.loss(inputs, label),
            AnyClassifier::Pair(m) => m.loss(inputs, label),
        }
    }
    fn train_step(&mut self, inputs: &[&Tokenization], label: usize) -> Result<f64> {
        match self {
            AnyClassifier::Single(m) => m.train_step(inputs, label),
            AnyClassifier::Pair(m) => m.train_step(inputs, label),
        }
    }
    fn predict(&self, inputs: &[&Tokenization]) -> Result<usize> {
        match self {
            AnyClassifier::Single(m) => m.predict(inputs),
            AnyClassifier::Pair(m) => m.predict(inputs),
        }
    }
}

impl ClassifierState {
    fn capture_params(params: &ClassifierParams, opt: &AdamState, num_inputs: usize) -> Self {
        ClassifierState {
            embed_dim: params.embed_dim(),
            num_classes: params.num_classes(),
            num_inputs,
            embeddings: rows(&params.embeddings),
            head_w: rows(&params.head_w),
            head_b: params.head_b.to_vec(),
            opt: opt.clone(),
        }
    }

    pub fn capture(model: &AnyClassifier) -> Self {
        match model {
            AnyClassifier::Single(m) => Self::capture_params(&m.params, &m.opt, 1),
            AnyClassifier::Pair(m) => Self::capture_params(&m.params, &m.opt, 2),
        }
    }

    pub fn restore(&self) -> Result<AnyClassifier> {
        let params = ClassifierParams {
            embeddings: from_rows(&self.embeddings, "classifier embeddings")?,
            head_w: from_rows(&self.head_w, "classifier head")?,
            head_b: Array1::from_vec(self.head_b.clone()),
        };
        if params.embed_dim() != self.embed_dim
            || params.num_classes() != self.num_classes
            || params.head_w.ncols() != self.embed_dim * self.num_inputs
        {
            return Err(Error::Snapshot("classifier dims inconsistent".into()));
        }
        let opt = self.opt.clone();
        match self.num_inputs {
            1 => Ok(AnyClassifier::Single(MeanEmbedClassifier { params, opt })),
            2 => Ok(AnyClassifier::Pair(PairClassifier { params, opt })),
            n => Err(Error::Snapshot(format!("unsupported input arity {n}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: u32,
    pub rng_seed: u64,
    pub vocab: Vec<(String, f64)>,
    pub nulm: NulmState,
    /// Second tokenizer for split-pair training; absent for single or
    /// shared setups.
    pub nulm_b: Option<NulmState>,
    pub shared_nulm: bool,
    pub model: Option<ClassifierState>,
}

impl Snapshot {
    pub fn capture(
        rng_seed: u64,
        vocab: &SeedVocab,
        tokenizers: &Tokenizers,
        model: Option<&AnyClassifier>,
    ) -> Self {
        let (nulm, nulm_b, shared) = match tokenizers {
            Tokenizers::Single(n) => (NulmState::capture(n), None, false),
            Tokenizers::SharedPair(n) => (NulmState::capture(n), None, true),
            Tokenizers::SplitPair { a, b } => {
                (NulmState::capture(a), Some(NulmState::capture(b)), false)
            }
        };
        Snapshot {
            format: SNAPSHOT_FORMAT,
            rng_seed,
            vocab: vocab
                .entries()
                .iter()
                .map(|e| (e.surface.clone(), e.seed_logprob))
                .collect(),
            nulm,
            nulm_b,
            shared_nulm: shared,
            model: model.map(ClassifierState::capture),
        }
    }

    pub fn restore_tokenizers(&self) -> Result<Tokenizers> {
        let a = self.nulm.restore()?;
        Ok(match (&self.nulm_b, self.shared_nulm) {
            (Some(b), _) => Tokenizers::SplitPair {
                a,
                b: b.restore()?,
            },
            (None, true) => Tokenizers::SharedPair(a),
            (None, false) => Tokenizers::Single(a),
        })
    }

    pub fn restore_vocab(&self) -> Result<SeedVocab> {
        SeedVocab::new(self.vocab.clone())
    }

    pub fn restore_model(&self) -> Result<Option<AnyClassifier>> {
        self.model.as_ref().map(ClassifierState::restore).transpose()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| Error::Snapshot(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot format {}",
                snap.format
            )));
        }
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
