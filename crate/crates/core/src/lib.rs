//! Dimension-independent structural pruning for decoder-only transformers.

pub mod budget;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod hypernet;
pub mod model;
pub mod optim;
pub mod prune;
pub mod reinmax;
pub mod report;
pub mod rng;
pub mod search;
pub mod selection;
pub mod tensor;
pub mod verify;

pub use error::{DispError, Result};
