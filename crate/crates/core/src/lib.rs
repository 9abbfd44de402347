mod bytes;
pub mod config;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod harmonize;
pub mod modality;
pub mod pcdata;
pub mod rng;
pub mod rope;
pub mod serialize;
pub mod synthbench;

pub use error::{Error, Result};
