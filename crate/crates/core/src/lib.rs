//! Low-rank x-vector speaker embeddings.

pub mod error;
pub mod eval;
pub mod factorize;
pub mod features;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
