pub mod central;
pub mod dqn;
pub mod env;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod mfg;
pub mod nn;
pub mod offline;
pub mod statespace;

pub use error::{Error, Result};
