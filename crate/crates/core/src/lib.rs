//! Offline video depth and pose estimation: keyframe selection, pose-graph
//! optimization, joint refinement of per-frame depth and pose, and a
//! flow-guided depth filter, with a synthetic oracle for evaluation.

// Negated comparisons reject NaN deliberately.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod geometry;
pub mod io;
pub mod keyframing;
pub mod optim;
pub mod pipeline;
pub mod pose_graph;
pub mod post_filter;
pub mod raster;
pub mod synth;
