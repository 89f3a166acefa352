pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
