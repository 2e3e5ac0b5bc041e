pub mod align;
pub mod captions;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod evalkit;
pub mod fixture;
pub mod matrix;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod trainer;
