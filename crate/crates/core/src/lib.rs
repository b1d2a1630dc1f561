//! Dispatchable-region optimization under moment-based wind uncertainty.

pub mod conic;
pub mod drco;
pub mod error;
pub mod evaluation;
pub mod expected_cost;
pub mod frontier;
pub mod grid;
pub mod parallel;
pub mod uncertainty;

pub use error::{Error, Result};
