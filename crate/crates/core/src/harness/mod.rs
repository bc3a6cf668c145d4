pub mod config;
pub mod metrics;
pub mod rng;
pub mod plot;
pub mod run;
