//! Continual active learning over frozen embeddings.
//!
//! Each task hands the engine an unlabeled pool that mixes unseen samples of
//! already-learned classes with samples of classes it has never seen. The
//! engine scores every sample with per-class PCA reconstruction error, spends
//! a small oracle budget on the samples whose score sits closest to the
//! novelty threshold, pseudo-labels the most confidently novel ones, and folds
//! everything into a long-term classifier through class-balanced replay.
//!
//! Module map:
//!
//! - [`embedding`]: `EmbeddingSet`, the CEMB file format, synthetic datasets
//! - [`subspace`]: per-class PCA subspaces and reconstruction error
//! - [`scoring`]: novelty scores, threshold calibration, ambiguity, entropy
//! - [`heads`]: short-term and long-term classification heads, Adam training
//! - [`replay`]: class-balanced replay buffer and the weighted replay update
//! - [`inner_loop`]: the per-task query / pseudo-label / consolidate controller
//! - [`benchmark`]: task streams, the simulated oracle, strategies, metrics
//! - [`cli`]: run configuration, `run` / `sweep` commands and their outputs

pub mod benchmark;
pub mod cli;
pub mod embedding;
mod error;
pub mod heads;
mod ids;
pub mod inner_loop;
pub mod replay;
pub mod scoring;
pub mod seed;
pub mod subspace;

pub use error::{Error, Result};
pub use ids::{ClassId, SampleId};
