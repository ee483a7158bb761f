//! Tokenizer optimization with downstream feedback.
//!
//! This crate trains a neural unigram language model (NULM) tokenizer
//! jointly with a downstream classifier: every step weights the downstream
//! losses of the N best segmentations by their normalized probabilities and
//! descends that weighted loss through the tokenizer, while the classifier
//! itself trains on sampled segmentations (subword regularization). A
//! trained tokenizer can also be re-fit against a frozen downstream model
//! (post-processing) without touching the model's parameters.
//!
//! The pieces:
//!
//! - [`vocab`]: seed vocabularies (substring candidates, unigram EM,
//!   trimming, TSV persistence).
//! - [`lattice`]: segmentation lattices with exact N-best, marginals, and
//!   tempered sampling.
//! - [`nulm`]: the neural unigram LM, its pretraining, and the weighted
//!   tokenizer loss with analytic gradients.
//! - [`downstream`]: the pluggable model contract plus two reference
//!   classifiers.
//! - [`trainer`]: joint training, schedules for two-input tasks,
//!   post-processing, evaluation, telemetry.
//! - [`synth`]: synthetic corpora with known useful tokens.
//! - [`snapshot`]: bit-exact JSON state persistence.
//!
//! # Example
//!
//! ```
//! use tokopt::vocab::SeedVocab;
//! use tokopt::lattice::{build_lattice, nbest};
//!
//! let vocab = SeedVocab::from_probs(vec![
//!     ("a".to_string(), 0.4),
//!     ("b".to_string(), 0.2),
//!     ("ab".to_string(), 0.4),
//! ])?;
//! let lat = build_lattice("ab", &vocab)?;
//! let top = nbest(&lat, &vocab.seed_logprobs(), 2)?;
//! assert_eq!(top[0].surfaces(&vocab, "ab"), vec!["ab"]);
//! assert_eq!(top[1].surfaces(&vocab, "ab"), vec!["a", "b"]);
//! # Ok::<(), tokopt::Error>(())
//! ```

pub mod downstream;
pub mod error;
pub mod lattice;
pub mod nulm;
pub mod opt;
pub mod snapshot;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
