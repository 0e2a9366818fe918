//! Per-pair registration: Adam on the displacement field with a cyclic
//! learning rate over a coarse-to-fine pyramid.

mod adam;
mod config;
mod engine;

pub use adam::Adam;
pub use config::{CyclicLr, LossKind, RegConfig};
pub use engine::{objective, objective_and_grad, register, ObjectiveValue, RegResult, Similarity, TraceRow};
