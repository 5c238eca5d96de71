//! Diff risk scoring and release gating.
//!
//! The crate turns a history of code diffs into per-diff risk scores and
//! gating decisions: corpus ingestion ([`corpus`], [`unidiff`]), leak-free
//! feature extraction ([`features`]), three model families ([`logreg`],
//! [`embed`], [`riskalign`]), threshold calibration and decisions
//! ([`gating`]) and offline evaluation ([`eval`]).

pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod features;
pub mod gating;
pub mod logreg;
pub mod math;
pub mod pipeline;
pub mod protocol;
pub mod riskalign;
pub mod unidiff;

pub use error::{Error, Result};
