//! Models, training loops, data generation and evaluation for efficient
//! computational-pathology feature extractors.

pub mod data;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod mil;
pub mod profiler;
pub mod resnet;
pub mod scan;
pub mod students;
pub mod transformer;

pub use error::{CoreError, Result};
