pub mod community;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod segregation;
pub mod synth;
pub mod views;
pub mod whatif;

pub use error::{Error, Result};
