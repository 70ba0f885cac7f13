//! Probing role-playing models for character knowledge errors.
//!
//! The crate covers the whole experimental loop:
//!
//! - [`corpus`], [`memgen`], [`inject`], [`screening`] and [`dataset`] build a
//!   probing dataset of binary questions that each carry one known-knowledge
//!   (KKE) or unknown-knowledge (UKE) error.
//! - [`retrieval`] and [`strategies`] run a responder model under seven
//!   reasoning strategies, including the self-recollection / self-doubt agent
//!   pipeline.
//! - [`judge`] and [`report`] score responses with an LLM judge and render
//!   accuracy tables.
//!
//! Every model call goes through [`provider::Provider`], which adds caching,
//! retries, rate limiting and a scripted mock backend for offline runs.

pub mod corpus;
pub mod dataset;
pub mod error;
pub mod inject;
pub mod judge;
pub mod jsonl;
pub mod memgen;
pub mod pipeline;
pub mod prompts;
pub mod provider;
pub mod report;
pub mod retrieval;
pub mod screening;
pub mod strategies;
pub mod taxonomy;
pub mod text;

pub use error::{Error, Result};
pub use taxonomy::{ErrorType, MemoryCategory, ScreeningStatus};
