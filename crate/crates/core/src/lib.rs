//! Scaled wide residual networks for panoptic segmentation: network
//! building blocks, the `(w1, w2, l)` architecture family, an analytical
//! cost model, grid search with Pareto extraction, panoptic
//! post-processing and quality metrics, and the AutoAugment color policy.

pub mod arch;
pub mod augment;
pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod cost;
pub mod error;
pub mod network;
pub mod panoptic;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
