//! Gradient-magnitude importance analysis of training examples.
//!
//! Train a classifier, score every training example by the norm of its
//! loss gradient at the trained parameters, subsample the training set with
//! one of four policies, retrain on the subsample, and compare accuracy.
//! Diagnostics cover label entropy of top-k sets, cross-model top-k overlap,
//! per-epoch gradient heatmaps and the batch triangle-inequality bound.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod importance;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use nn::{Architecture, CnnShape, GradientVector, Model, ParameterSegment, Role, SegmentTag};
pub use tensor::Tensor;
