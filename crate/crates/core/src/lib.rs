//! Desk-scale two-stage dense retrieval.
//!
//! The crate covers the full offline path: synthetic corpus and triplet
//! construction ([`corpus`]), causal dual-tower encoders with Matryoshka
//! projections ([`encoder`]), joint contrastive training with hard negatives
//! ([`stage1`]), query-only distillation into a small student tower
//! ([`qkd`]), scaling-law fitting ([`scaling`]), residual K-means semantic
//! IDs and an IVFPQ index ([`index`]), retrieval metrics ([`eval`]) and the
//! orchestration plus serving loop ([`pipeline`]).

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod optim;
pub mod pipeline;
pub mod qkd;
pub mod scaling;
pub mod stage1;
mod util;

pub use error::{Error, Result};
