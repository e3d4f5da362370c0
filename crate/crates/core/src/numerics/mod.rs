//! Special functions, random streams and sampling, and the maximizer.

pub mod optim;
pub mod rng;
pub mod sample;
pub mod special;
pub mod stats;

pub use optim::{maximize, maximize_with_steps, Maximum, OptimizerConfig};
pub use rng::RngStream;
pub use sample::{sample, Dist};
pub use special::{digamma, log_beta, log_gamma};
