//! Frozen-backbone transfer learning for binary fundus image classification.

pub mod augmentation;
pub mod backbone;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod seed;

pub use error::{Error, Result};
