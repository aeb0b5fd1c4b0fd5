//! Contrastive regularization for open-set recognition with margin-based
//! classification heads.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod margin;
pub mod numerics;
pub mod pairing;
pub mod report;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{Error, Result};
