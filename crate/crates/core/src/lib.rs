pub mod data;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod gradcheck;
pub mod numerics;
pub mod pipeline;
pub mod rhl;
pub mod rng;
pub mod semantics;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
