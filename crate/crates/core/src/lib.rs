//! Adaptive visual tokenization of vision-encoder patch embeddings.
//!
//! Patches are grouped by a similarity-threshold greedy clustering whose
//! cluster count follows the image content; one token is then pooled per
//! cluster by cross-attention restricted to that cluster's patches.
//!
//! The pipeline in order:
//!
//! 1. [`embedding_io`] loads `DIVT`/`DIVL` embedding dumps or synthesizes them.
//! 2. [`similarity`] builds the cosine matrix and neighbor degrees.
//! 3. [`clustering`] picks centroids, refines assignments and orders tokens.
//! 4. [`token_former`] pools one token per cluster (forward and backward).
//!
//! [`oracle`] holds slow reference implementations, [`training`] a surrogate
//! fitting loop, [`metrics`] token-budget statistics and the KV-cache model,
//! and [`cli`] the `divt` command-line front end.

pub mod cli;
pub mod clustering;
pub mod embedding_io;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod oracle;
pub mod render;
pub mod similarity;
pub mod token_former;
pub mod training;

pub use clustering::{cluster, Clustering, DegreePolicy, GranularityConfig};
pub use embedding_io::{load_patch_set, save_patch_set, PatchSet};
pub use error::{Error, FormatError, Result};
pub use fsutil::atomic_write;
pub use matrix::Matrix;
pub use token_former::{form_tokens, TokenFormerParams, TokenSequence};
