//! Desk-scale training and evaluation harness: synthetic scenes, a toy
//! backbone + pyramid, two-stage heads with a pluggable extractor, a COCO
//! style AP evaluator, strategy comparison, and a throughput benchmark.

pub mod ap;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod proposals;
pub mod scene;
pub mod train;
