//! Concept-based self-explaining models with domain-adaptive training.
//!
//! The crate builds a five-network classifier (concept extractor `F`, decoder
//! `G`, relevance scorer `H`, aggregator `A`, salient-concept selector `T`),
//! trains it with a composite objective (reconstruction + sparsity,
//! cross-entropy on the weighted prediction, contrastive concept learning,
//! prototype-based concept grounding, and a concept-fidelity regularizer) and
//! evaluates concept quality via domain-adaptation accuracy and intra-class
//! concept-set overlap.
//!
//! All numeric work runs on a small reverse-mode tape ([`graph`]) over dense
//! `f64` tensors, so every loss term is differentiable and checkable against
//! central finite differences.

pub mod augment;
pub mod bank;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hash;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
