pub mod buffer;
pub mod error;
pub mod harness;
pub mod net;
pub mod numkernel;
pub mod optim;
pub mod softmax_approx;
pub mod synth;
pub mod theory_checks;
pub mod trainer;

pub use error::{Error, Result};
