//! Compositional zero-shot recognition with a Hopfield retrieval memory and a
//! Soft Mixture-of-Experts composer, on CPU and without an ML framework.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod hopfield;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod softmoe;
pub mod training;

pub use error::{HopeError, Result};
