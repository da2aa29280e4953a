//! Entity-resolution toolkit built on contrastive text embeddings.
//!
//! The pipeline: serialize records to text, embed them with a hashed
//! character-n-gram encoder fine-tuned under a triplet objective, score
//! candidate pairs with a logistic-regression matcher over embedding pair
//! features, and cluster matched pairs into entities.
//!
//! Core types are generic over the floating-point scalar (`f32` or `f64`)
//! through [`scalar::Scalar`]; the crate root re-exports `f64` aliases for
//! the common case.

pub mod config;
pub mod corpus;
pub mod corruptor;
pub mod encoder;
pub mod hash;
pub mod matcher;
pub mod report;
pub mod scalar;
pub mod train;
pub mod triplets;
pub mod workflow;

pub use corpus::{CorpusError, Dataset, Provenance, Record, SplitSpec};
pub use corruptor::{corrupt_text, generate_benchmark, generate_duplicates, NoiseConfig};
pub use encoder::{Encoder, EncoderConfig, EncoderError, PooledEncoder};
pub use matcher::{pair_features, predict, train_logreg, LogRegModel, MatcherError};
pub use scalar::Scalar;
pub use triplets::{
    build_triplets, derive_pairs, PairExample, PairSet, TripletError, TripletExample, TripletSet,
};
pub use workflow::{
    block, cluster, run_pipeline, CandidatePair, ClusterAssignment, PipelineConfig,
    PipelineOutput, WorkflowError,
};

/// Concrete `f64` shorthands for the generic core types.
pub type NgramEncoder64 = encoder::NgramEncoder<f64>;
pub type TfidfEncoder64 = encoder::TfidfEncoder<f64>;
pub type FrozenHeadEncoder64 = encoder::FrozenHeadEncoder<f64>;
pub type LogRegModel64 = matcher::LogRegModel<f64>;
pub type PipelineOutput64 = workflow::PipelineOutput<f64>;
