//! Instruction-tuning data synthesis by mutual alignment of a forward
//! (instruction to response) and a reverse (response to instruction) model.
//!
//! The pipeline has three stages:
//!
//! 1. [`align`]: alternate weighted refits of the two models on seed pairs
//!    mixed with pairs synthesized by the other direction.
//! 2. [`augment`]: back-translate unlabeled responses into candidate
//!    instructions with the final reverse model.
//! 3. [`curate`]: score every candidate by how well the forward model
//!    recovers the response from its pseudo-instruction, keep the K best,
//!    and append the seed data.
//!
//! Models are reached through [`modelcore::ModelHandle`]. The in-process
//! [`modelcore::reference::ReferenceModel`] is a smoothed count model whose
//! weighted fit is closed-form; [`remote`] drives external servers speaking
//! the `/v1` JSON protocol.

pub mod align;
pub mod augment;
pub mod corpus;
pub mod curate;
pub mod evalkit;
pub mod fanout;
pub mod modelcore;
pub mod remote;
pub mod seeding;

/// Version string written into every artifact header.
pub const ENGINE_VERSION: &str = concat!("mainforge-core/", env!("CARGO_PKG_VERSION"));
