//! Segmentation-free recognizer for fixed-alphabet text captcha.
//!
//! The pipeline is a small convolutional-recurrent network trained with
//! connectionist temporal classification, so no per-character segmentation
//! is ever needed: images map to per-timestep label distributions and a
//! decoder collapses those into strings.

pub mod ctc;
pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub mod cli;

#[cfg(test)]
pub(crate) mod fdcheck;
