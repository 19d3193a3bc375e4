pub mod autograd;
pub mod checkpoint;
pub mod concept;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod latent;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod predictor;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;
