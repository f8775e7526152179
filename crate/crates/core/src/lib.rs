//! Near-duplicate video retrieval.
//!
//! Per-frame CNN features ([`feature_store`]) are reduced to keyframes
//! ([`keyframe`]), aggregated into two descriptor levels ([`aggregation`]),
//! projected by kernel PCA ([`kpca`]), indexed per video ([`ann_index`]) and
//! compared with a per-pair learned metric ([`fsuml`]). The two levels are
//! fused by neighbourhood re-ranking ([`rerank`]) and scored by [`eval`].
//! [`pipeline`] ties the stages to an on-disk workspace.

mod container;

pub mod aggregation;
pub mod ann_index;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod fsuml;
pub mod keyframe;
pub mod kpca;
pub mod pipeline;
pub mod rerank;
pub mod signature;

pub use error::{NdvrError, Result};
