//! Desk-scale laboratory comparing standard and adversarially trained
//! convolutional classifiers on a synthetic shape/texture world.

pub mod analysis;
pub mod attack;
pub mod checks;
pub mod data;
pub mod distort;
pub mod error;
pub mod experiment;
pub mod model;
pub mod report;
pub mod tables;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
