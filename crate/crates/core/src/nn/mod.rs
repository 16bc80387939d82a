//! Numerical substrate: arrays, kernels, parameter storage, differentiation,
//! checkpoints and gradient checking. Everything computes in `f64`.

pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::{layer_norm, softmax, softmax_rows, Array};
pub use gradcheck::{grad_check, GradCheckReport};
pub use init::{seeded_init, InitScheme};
pub use params::ParamStore;
pub use rng::SeedStream;
pub use tape::{Grads, Tape, Var};
