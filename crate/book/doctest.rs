//! Doc-test shim for the guide: each chapter of the mdbook is included as
//! module documentation so its code blocks compile and run under
//! `cargo test`. The book and the tested snippets can never drift apart.

#[doc = include_str!("src/intro.md")]
pub mod intro {}

#[doc = include_str!("src/vocabulary.md")]
pub mod vocabulary {}

#[doc = include_str!("src/lattices.md")]
pub mod lattices {}

#[doc = include_str!("src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("src/nulm.md")]
pub mod nulm {}

#[doc = include_str!("src/training.md")]
pub mod training {}

#[doc = include_str!("src/post_processing.md")]
pub mod post_processing {}

#[doc = include_str!("src/cli.md")]
pub mod cli {}
