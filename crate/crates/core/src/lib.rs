//! Conditional error assessment by simulated control problems.
//!
//! A scenario (prior, noise law, structural model) generates control
//! problems with known truths; a relevance predicate keeps those whose data
//! resemble the target's, and the procedure's error is averaged over them.

pub mod canon;
pub mod config;
pub mod distmodel;
mod error;
pub mod evaluate;
pub mod genctl;
pub mod linalg;
pub mod patterns;
pub mod procedures;
pub mod relevance;

pub use error::{Error, Result};
