pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod numerics;
pub mod paths;
pub mod resampling;
pub mod rng;
pub mod targets;
