//! Ensembles of learnable input filters trained so that the input gradients
//! of the filtered pipelines disagree, together with the attacks and
//! diagnostics used to evaluate them.

pub mod attacks;
pub mod data;
pub mod diagnostics;
mod error;
pub mod losses;
pub mod models;
pub mod rng;
pub mod training;

pub use data::Dataset;
pub use error::{DriftError, Result};
pub use models::{ensemble_accuracy, ensemble_forward, BaseClassifier, Filter, FilterArch, FilterBank, PathSelect};
