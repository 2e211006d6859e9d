pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
