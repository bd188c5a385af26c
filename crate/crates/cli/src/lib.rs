//! Command-line orchestration of the alignment, augmentation and curation
//! stages.

pub mod commands;
pub mod config;
pub mod fixture;
