//! Desk-scale laboratory for detector-reward GRPO post-training.
//!
//! A conditional rectified-flow generator and an autoregressive prompt
//! policy are cold-started on a synthetic "real" distribution, then
//! post-trained with group-relative policy optimization against frozen
//! real-vs-fake detectors. [`realbench`] scores the result with
//! detector panels and forced-choice arena battles.

pub mod detectors;
pub mod error;
pub mod flowgen;
pub mod grpo;
pub mod harness;
pub mod numkit;
pub mod promptpolicy;
pub mod realbench;
pub mod rewardcore;
pub mod synthworld;

pub use error::{Error, Result};

/// `f64` instantiations used throughout the pipeline.
pub type Tensor64 = numkit::Tensor<f64>;
pub type Mlp64 = numkit::Mlp<f64>;
pub type Adam64 = numkit::Adam<f64>;
pub type AdamConfig64 = numkit::AdamConfig<f64>;
pub type Tensor32 = numkit::Tensor<f32>;
pub type Mlp32 = numkit::Mlp<f32>;
pub type RewardVector64 = rewardcore::RewardVector<f64>;

pub use numkit::{Params, Rng, Scalar};
