//! Localized sparse facial expression coding.
//!
//! Learns a basis of facial-feature-local deformation atoms ("basis units")
//! from landmark deformations, codes videos into per-frame BU activations,
//! turns activation and head-pose series into windowed cross-correlation
//! features, and evaluates them with a nested leave-one-out linear SVM.

pub mod assignment;
pub mod classify;
pub mod cli;
pub mod coding;
pub mod error;
pub mod io;
pub mod learn;
pub mod model;
pub mod synth;
pub mod wcc;

pub use error::{Error, Result};
