pub mod attack;
pub mod augment;
pub mod engine;
pub mod harness;
pub mod methods;
pub mod models;
pub mod rng;
pub mod train;
