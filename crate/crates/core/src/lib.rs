#![no_std]
#![doc = include_str!("../README.md")]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod alignment;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod gradcheck;
pub mod lemma;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod semantic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
