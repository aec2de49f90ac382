//! Synthesis of challenging negative responses for multi-turn response
//! selection.
//!
//! The pipeline garbles a conversation history ([`garble`]), generates
//! candidate responses from the garbled history with a language model
//! ([`lm`], [`gen`]), optionally forcing a keyword of the original history
//! into the response ([`keywords`]), and keeps the candidate that is least
//! plausible as a continuation of the *original* history ([`select`]). The
//! [`matcher`] and [`metrics`] modules train and evaluate a small response
//! selection model on the augmented data.

pub mod corpus;
mod error;
pub mod garble;
pub mod gen;
pub mod keywords;
pub mod lm;
pub mod matcher;
pub mod metrics;
pub mod seed;
pub mod select;
pub mod synthetic;

pub use error::{Error, Result};
