//! Offensive-language classification toolkit.
//!
//! Modules follow the pipeline order: [`corpus`] ingestion, [`textnorm`]
//! normalization, [`sentiment`] prepending, [`features`] TF-IDF n-grams,
//! the [`linear`] SVM and [`neural`] LSTM classifiers with their [`losses`],
//! [`eval`] metrics and analyses, and the [`runner`] that ties them together.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod linear;
pub mod losses;
pub mod neural;
pub mod runner;
pub mod sentiment;
pub mod textnorm;

pub use error::{Error, Result};
