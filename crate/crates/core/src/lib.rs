//! Patient-level multistain graph attention networks.
//!
//! The pipeline: per-patient graphs built from patch features and slide
//! coordinates (feature-space k-NN merged with region adjacency), random-walk
//! positional encodings, hierarchical blocks of graph attention plus
//! stain-aware attention pooling, self-attention over the per-block readouts,
//! and a classification head. Training, evaluation metrics, synthetic task
//! generation, and the derived explainability reports live here too.

// Index-based loops are the clearer form for the dense kernels here.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod commands;
pub mod data;
pub mod error;
pub mod explain;
pub mod gat;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rwpe;
pub mod saap;
pub mod seeding;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
