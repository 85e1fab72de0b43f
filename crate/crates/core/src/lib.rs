//! Adaptive contrastive decoding over a synthetic vision-language testbed.

pub mod cd;
pub mod dpo;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod head;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod preference;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
