//! Reference-guided image inpainting.
//!
//! A hole in a target image is filled from a second photograph of the same
//! scene. The source is registered with several homographies (one per
//! depth layer plus a global one), each aligned proposal is corrected with a
//! bilateral affine color grid and a coarse warp field fitted on the known
//! overlap, and the proposals are fused per pixel together with a
//! single-image fill that covers whatever the source cannot.
//!
//! The entry point is [`pipeline::run_pipeline`]; every stage is also
//! exposed on its own.

pub mod cst;
pub mod error;
pub mod features;
pub mod fill;
pub mod fusion;
pub mod homography;
pub mod io;
pub mod pipeline;
pub mod proposals;
pub mod raster;

mod solver;

pub use error::{Error, Result};
pub use homography::Homography;
pub use pipeline::{
    fill_only, fuse, prepare, run_pipeline, run_pipeline_with_depth, ClusteringMode, CstMode, FillMethod, FuseParams,
    FusionResult, PipelineConfig,
};
pub use raster::{HoleMask, Image, Point, ValidMask};
