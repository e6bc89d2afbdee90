//! Pyramidal Shapley-Taylor motion-language alignment.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode
//! autodiff core, [`sti`] computes Shapley-Taylor interaction indices,
//! [`knn_dpc`] clusters tokens, [`motion_patch`] turns skeletons into patch
//! grids, [`model`] and [`losses`] define the network and objectives,
//! [`corpus`] generates synthetic paired data, and [`trainer`] ties it all
//! together with retrieval and alignment evaluation.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod corpus;
pub mod knn_dpc;
pub mod losses;
pub mod model;
pub mod motion_patch;
pub mod sti;
pub mod trainer;
