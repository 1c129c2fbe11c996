//! Two-stream transformer classifier with correlation-alignment domain
//! adaptation for tabular credit data, plus the machinery around it:
//! dataset encoding and KL shift grouping, synthetic target oversampling,
//! a deterministic training loop, grouped evaluation metrics, and
//! attention/LIME interpretability outputs.
//!
//! Everything is driven by a [`data::TabularSchema`]; all randomized
//! steps are reproducible bit-for-bit from their seeds.

pub mod data;
pub mod explain;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod oversample;
pub mod train;
