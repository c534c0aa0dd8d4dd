//! Toy-scale laboratory for few-step distillation of flow-matching models.

pub mod adversarial;
pub mod analysis;
pub mod config;
pub mod distill;
pub mod error;
pub mod flow;
pub mod nn;
pub mod seed;
pub mod trajstore;

pub use error::{Error, Result};
