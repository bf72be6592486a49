pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod lattice;
pub mod model;
pub mod mwer;
pub mod rescore;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
