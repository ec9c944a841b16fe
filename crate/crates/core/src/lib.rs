//! Robust multi-view point-map alignment.
//!
//! Given per-image-pair point maps with confidences, the crate recovers focal
//! lengths and camera poses, refines a globally consistent reconstruction by
//! gradient descent with closed-form confidence re-weighting, and produces
//! calibrated confidences, pseudo-labels and evaluation metrics. A simulator
//! fabricates predictions with known ground truth.

mod adam;
pub mod align;
pub mod error;
pub mod geom;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod pairwise;
pub mod pipeline;
pub mod pseudo_label;
pub mod synth;

pub use align::{optimize, AlignConfig, AlignOutput, WeightMaps};
pub use error::{Error, Result};
pub use geom::{CameraIntrinsics, DepthMap, Grid, PoseSE3};
pub use graph::{build_view_graph, extract_spanning_tree, propagate_initialization, GlobalState, ViewGraph};
pub use pairwise::PairPrediction;
