//! Command-line client and benchmark harness for hydra.

pub mod cli;
pub mod harness;
