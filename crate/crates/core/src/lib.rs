//! Cross-modal shared-representation learning for paired recipe/image data.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`corpus`]: JSONL corpus ingestion, synthetic toy corpora, stratified splits.
//! - [`tokenizer`]: greedy longest-match WordPiece over a line-per-token vocabulary.
//! - [`encoders`]: transformer recipe encoder, image projection head, shared
//!   final layer, cosine similarity, and attention rollout.
//! - [`training`]: margin triplet objective with online hard-negative mining,
//!   multilingual/image augmentation, Adam schedule, and the retrieval trainer.
//! - [`synthesis`]: conditional-augmentation GAN losses (adversarial,
//!   auxiliary classification, KL, retrieval supervision) and the GAN trainer.
//! - [`evaluation`]: median rank / recall@K under a seeded subset protocol,
//!   Frechet distance between feature sets, ablation and per-language reports.
//! - [`checkpoint`]: binary parameter checkpoints with a JSON header.
//!
//! All randomness is seeded and all training paths have a single-threaded
//! deterministic mode: equal seeds give byte-identical logs and checkpoints.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod params;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
