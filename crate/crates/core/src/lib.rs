//! Cross-lingual data augmentation over precomputed sentence embeddings.
//!
//! Unlabeled target-language vectors are mapped to their most similar
//! labeled source-language vectors, inherit those labels, and are mixed
//! with them (optionally after projecting the target onto a
//! language-separability basis) to train a classifier head.

pub mod digest;
pub mod error;
pub mod eval;
pub mod interpolate;
pub mod lda;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod similarity;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type LanguageBasis64 = lda::LanguageBasis<f64>;
pub type LanguageBasis32 = lda::LanguageBasis<f32>;
pub type HeadModel64 = trainer::HeadModel<f64>;
pub type HeadModel32 = trainer::HeadModel<f32>;
pub type Index64 = similarity::Index<f64>;
pub type Index32 = similarity::Index<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type InterpolatedExample64 = interpolate::InterpolatedExample<f64>;
