//! Integrative low-rank signal recovery across high- and low-dimensional
//! data modalities, with prediction sets for partially observed queries.
//!
//! The pipeline: spectral initialization and nuisance estimation per
//! modality, empirical-Bayes prior fits, iterative refinement with Onsager
//! corrections and an empirical state-evolution track, and posterior-ball
//! prediction sets for new subjects. A synthetic harness generates data from
//! the model, runs the oracle state evolution, and compares the two.

pub mod amp;
pub mod bundle;
pub mod config;
pub mod denoise;
pub mod error;
pub mod linalg;
pub mod matrix;
pub mod predict;
pub mod preprocess;
pub mod prior;
pub mod rng;
pub mod spectral;
pub mod synthetic;

pub use error::{Error, Result};
