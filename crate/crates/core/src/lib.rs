//! Tree branch network (TBN) for person re-identification.
//!
//! A CNN backbone produces a feature tensor T0 that feeds a global branch
//! and a coarse-to-fine hierarchy of horizontal partitions. Training combines
//! per-branch identity cross-entropy with an optional KL term between two
//! co-trained models; evaluation ranks a gallery by descriptor distance and
//! reports CMC and mAP, optionally after k-reciprocal re-ranking.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
