//! Joint scene-text detection and recognition with RoI-masked attention decoding.

pub mod autograd;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod featnet;
pub mod geometry;
pub mod objective;
pub mod params;
pub mod recognizer;
pub mod roimask;
pub mod spotter;
pub mod tensor;

pub use error::{Error, Result};
