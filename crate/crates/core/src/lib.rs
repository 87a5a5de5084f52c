//! Keypoint-free semi-dense object reconstruction and 2D-3D pose estimation.
//!
//! The crate is split along the pipeline:
//!
//! - [`geometry`]: pinhole projection, SE(3) and triangulation.
//! - [`scene`]: deterministic synthetic scenes used as ground truth.
//! - [`matcher`]: the semi-dense matcher seam (coarse grid matches, fine refinement).
//! - [`tracks`]: union-find track building and coarse triangulation.
//! - [`refine`]: reference-node refinement and depth-only optimization.
//! - [`localize`]: query-time 2D-3D matching (attention, dual-softmax, fine expectation).
//! - [`pnp`]: EPnP, RANSAC and pose polishing.
//! - [`metrics`]: pose and point-cloud accuracy metrics.
//! - [`io`] and [`pipeline`]: file formats and the end-to-end commands.

pub mod features;
pub mod geometry;
pub mod rng;
pub mod scene;
pub mod matcher;
pub mod refine;
pub mod tracks;
pub mod localize;
pub mod pnp;
pub mod metrics;
pub mod io;
pub mod pipeline;
