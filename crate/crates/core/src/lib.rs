//! Pseudo-healthy image synthesis by factoring an image into a healthy
//! appearance and a pathology mask.

pub mod baselines;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
