//! Unsupervised skeleton action representation learning by prototypical
//! contrast and reverse prediction.
//!
//! The pipeline: [`data`] loads or generates skeleton sequences,
//! [`preprocess`] maps them into a view-invariant body frame, [`trainer`]
//! alternates k-means prototype estimation ([`clustering`]) with encoder
//! updates on the combined loss ([`loss`]) through a GRU encoder and a frozen
//! GRU decoder ([`rnn`]), and [`eval`] measures the frozen encodings with a
//! linear probe.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod numcore;
pub mod preprocess;
pub mod rnn;
pub mod seed;
pub mod trainer;

pub use error::{PcrpError, Result};
