#[cfg(feature = "cli")]
pub mod cli;
pub mod distributions;
pub mod error;
pub mod invariance;
pub mod numeric;
pub mod objective;
pub mod oracle_sim;
pub mod periodic;
pub mod predictors;
pub mod reductions;
pub mod rng;
pub mod variance_lab;
