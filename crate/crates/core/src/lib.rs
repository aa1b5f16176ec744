//! Environments, data generation, the in-context policy model, training and
//! evaluation for in-context reinforcement learning experiments.

pub mod datagen;
pub mod env;
pub mod eval;
pub mod hash;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod suite;
pub mod trainer;
