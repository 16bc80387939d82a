pub mod corpus;
pub mod error;
pub mod eval;
pub mod hpo;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod textseg;
pub mod trainer;

pub use error::{Error, Result};
