//! Framework-free building blocks for an anchor-free detection pipeline.
//!
//! The crate implements the training-side machinery of a YOLO-style detector
//! without any neural network: grid/anchor bookkeeping and box decoding,
//! label-assignment strategies (single-center, center 3x3 multi-positives,
//! SimOTA with a Sinkhorn-Knopp optimal-transport reference, Hungarian
//! one-to-one), detection losses with analytic gradients, mosaic/mixup
//! augmentation with exact box bookkeeping, NMS and NMS-free post-processing,
//! and a simplified COCO-style AP evaluator.
//!
//! A synthetic-scene harness ([`synthfit`]) optimizes raw prediction tensors
//! directly through the assign→loss path, which exercises the full pipeline
//! end to end and backs the `fit` / `roadmap` CLI commands.

pub mod assign;
pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod postprocess;
pub mod rng;
pub mod scene;
pub mod synthfit;

pub use error::{Error, Result};
pub use geometry::{Affine2D, BBox, LabeledBox};
pub use grid::{AnchorPoint, DecodedPrediction, FpnSpec, HeadKind, HeadLayout, RawPrediction};
pub use postprocess::Detection;
pub use scene::{Image, Scene};
