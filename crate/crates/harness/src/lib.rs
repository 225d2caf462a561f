//! Experiment harness for DRIFT filter ensembles: the synthetic desk task,
//! the DTNS tensor container, JSON configuration and the end-to-end
//! train/attack/diagnose pipeline behind the `drift` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dtns;
mod error;
pub mod experiment;

pub use error::{HarnessError, Result, StageContext};
