//! Synthetic corpora with known ground-truth "useful" tokenizations.
//!
//! The pattern task labels a random sentence positive iff a marker
//! substring occurs in it. Mean pooling over single characters cannot
//! separate the classes (both classes use the whole alphabet), while a
//! vocabulary entry equal to the marker makes them separable, so high
//! accuracy is only reachable by learning the marker token.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::downstream::LabeledExample;
use crate::error::{Error, Result};

const ATTEMPT_FACTOR: usize = 1000;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub alphabet: Vec<char>,
    pub pattern: String,
    /// Inclusive character-length range of generated sentences.
    pub len_range: (usize, usize),
    pub positive_fraction: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pattern.chars().count() < 2 {
            return Err(Error::InvalidConfig("pattern length must be >= 2".into()));
        }
        if !self.pattern.chars().all(|c| self.alphabet.contains(&c)) {
            return Err(Error::InvalidConfig(
                "pattern must be composed of alphabet characters".into(),
            ));
        }
        if self.len_range.0 < self.pattern.chars().count() || self.len_range.0 > self.len_range.1 {
            return Err(Error::InvalidConfig("bad sentence length range".into()));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "positive fraction must be strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }

    fn sentence(&self, rng: &mut ChaCha12Rng) -> String {
        let len = rng.gen_range(self.len_range.0..=self.len_range.1);
        (0..len)
            .map(|_| self.alphabet[rng.gen_range(0..self.alphabet.len())])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<LabeledExample>,
    pub valid: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

fn fill_split<F>(
    spec: &SynthSpec,
    size: usize,
    split_tag: u64,
    mut make: F,
) -> Result<Vec<LabeledExample>>
where
    F: FnMut(&mut ChaCha12Rng) -> LabeledExample,
{
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(split_tag + 1)));
    let want_pos = (size as f64 * spec.positive_fraction).round() as usize;
    let want_neg = size - want_pos;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let cap = ATTEMPT_FACTOR * size.max(1);
    for _ in 0..cap {
        if pos.len() == want_pos && neg.len() == want_neg {
            break;
        }
        let ex = make(&mut rng);
        let bucket = if ex.label == 1 { &mut pos } else { &mut neg };
        let want = if ex.label == 1 { want_pos } else { want_neg };
        if bucket.len() < want {
            bucket.push(ex);
        }
    }
    if pos.len() != want_pos || neg.len() != want_neg {
        return Err(Error::UnreachableBalance(cap));
    }
    // Interleave by rejection-sampled draw order; deterministic shuffle.
    let mut out: Vec<LabeledExample> = pos.into_iter().chain(neg).collect();
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    Ok(out)
}

/// Binary single-sentence task: label 1 iff the marker pattern occurs as a
/// contiguous substring. Rejection-sampled to the requested class balance;
/// deterministic given the spec seed.
pub fn generate_pattern_task(spec: &SynthSpec) -> Result<CorpusSplits> {
    spec.validate()?;
    let make = |spec: &SynthSpec, rng: &mut ChaCha12Rng| {
        let text = spec.sentence(rng);
        let label = usize::from(text.contains(&spec.pattern));
        LabeledExample::single(text, label)
    };
    Ok(CorpusSplits {
        train: fill_split(spec, spec.train, 0, |rng| make(spec, rng))?,
        valid: fill_split(spec, spec.valid, 1, |rng| make(spec, rng))?,
        test: fill_split(spec, spec.test, 2, |rng| make(spec, rng))?,
    })
}

/// Two-sentence task: label 1 iff both sentences contain the marker.
pub fn generate_pair_task(spec: &SynthSpec) -> Result<CorpusSplits> {
    spec.validate()?;
    let make = |spec: &SynthSpec, rng: &mut ChaCha12Rng| {
        let a = spec.sentence(rng);
        let b = spec.sentence(rng);
        let label = usize::from(a.contains(&spec.pattern) && b.contains(&spec.pattern));
        LabeledExample::pair(a, b, label)
    };
    Ok(CorpusSplits {
        train: fill_split(spec, spec.train, 3, |rng| make(spec, rng))?,
        valid: fill_split(spec, spec.valid, 4, |rng| make(spec, rng))?,
        test: fill_split(spec, spec.test, 5, |rng| make(spec, rng))?,
    })
}
