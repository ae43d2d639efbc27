pub mod alignment;
pub mod backbone;
pub mod container;
pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod prototypes;
pub mod training;

pub use error::{CilError, Result};
