//! Minimal-change synthetic data pipeline.
//!
//! Real photos are edited along exactly one attribute (background, colour or texture) toward
//! a feasible or infeasible target, verified by a VQA filter, and used to fine-tune low-rank
//! adapters on a dual-encoder classifier. Every heavy model sits behind a backend trait with
//! a deterministic stand-in, so the whole pipeline runs on a laptop.

pub mod annotate;
pub mod edit;
pub mod eval;
pub mod error;
pub mod filter;
pub mod manifest;
pub mod maps;
pub mod model;
pub mod pipeline;
pub mod priors;
pub mod prompts;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
