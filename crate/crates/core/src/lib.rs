pub mod domain;
pub mod ran_sim;
pub mod datagen;
pub mod metrics;
pub mod tree;
pub mod verifier;
pub mod bus;
pub mod agent;
pub mod experiment;
