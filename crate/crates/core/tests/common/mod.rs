#![allow(dead_code)]

pub mod bench;
pub mod fuzz;
pub mod harness;
pub mod methods;
pub mod models;
pub mod ops;
pub mod trained;
