//! Treatment-conditioned survival-time regression on 3D volumes.
//!
//! A small 3D convolutional backbone maps a multi-channel volume and a
//! one-hot treatment to predicted survival days. The treatment enters in one
//! of three ways ([`model::Fusion`]): not at all, appended to the first fully
//! connected layer, or injected into every convolutional stage through
//! adaptive instance normalization driven by a mapping network.

pub mod cli;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
