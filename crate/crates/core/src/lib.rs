//! Gradient-descent feature learning of a two-layer ReLU CNN on signal-noise
//! data with label flipping.

pub mod analysis;
pub mod config;
pub mod datagen;
pub mod decomposition;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod checks;
pub mod cli;
pub mod pipeline;
pub mod svg;
