//! Desk-scale real-time detection transformer.
//!
//! The pipeline is a small CNN backbone, a single-scale transformer encoder
//! over the stride-32 feature, and a query decoder with one prediction head
//! per layer. Two blocks target small objects:
//!
//! - [`fgpa`]: a top-down pyramid plus bottom-up paths, so the encoder input
//!   carries stride-8 detail as well as stride-32 semantics.
//! - [`aff`]: learned sigmoid attention maps that weight each pyramid level
//!   before cross-scale fusion, in place of plain concatenation.
//!
//! Everything runs on [`graph::Graph`], a small f64 reverse-mode tape whose
//! kernels are checked against finite differences by [`gradcheck`].

pub mod aff;
pub mod error;
pub mod fgpa;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
