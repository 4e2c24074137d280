//! Test-data generation and evaluation for the inpainting engine: synthetic
//! source/target pairs, brush-stroke holes, a two-plane parallax scene,
//! PSNR/SSIM and a directory-driven batch evaluator.

pub mod brush;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod scene;
pub mod synth;
pub mod texture;

pub use brush::{brush_hole, BrushParams};
pub use error::{Error, Result};
pub use eval::{eval_run, evaluate, list_quadruples, load_quadruple, write_quadruple, Aggregate, EvalReport, EvalRow, Quadruple};
pub use metrics::{psnr, psnr_reported, ssim, PSNR_CAP};
pub use scene::{two_plane_scene, TwoPlaneParams, TwoPlaneScene};
pub use synth::{synth_pair, Regime, SynthRegime, SynthTruth};
pub use texture::Texture;
