//! Multi-scale RoI extraction for two-stage detectors, built on a small
//! reverse-mode autodiff tape, with a desk-scale synthetic training and
//! evaluation harness.

pub mod blocks;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod params;
pub mod pyramid;
pub mod rng;
pub mod roi_align;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use params::{ParamSet, Parameter};
pub use pyramid::{AssignConfig, FeaturePyramid, RoiBox};
pub use rng::SeededRng;
pub use tensor::Tensor;
