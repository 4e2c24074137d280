//! End-to-end orchestration.
//!
//! [`prepare`] runs everything that depends only on the inputs and the
//! geometry settings (features, proposals, refinement, confidences, the
//! single-image fill). [`fuse`] turns a prepared set into the final image
//! for a given choice of toggles and softmax parameters and is cheap enough
//! to re-run interactively.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cst::{grid_json, refine_proposal, CstParams, CstResult};
use crate::error::{Error, Result};
use crate::features::{detect_keypoints_with, keypoints_json, match_descriptors, DetectorParams, Keypoint, MatchSet};
use crate::fill::{poisson_blend, single_image_fill, FillParams};
use crate::fusion::{
    boundary_residual, confidence_map, harmonic_extend, mpf_merge, mpf_weights, posthoc_refill, spf_merge,
    weights_summary, FusionWeights,
};
use crate::homography::Homography;
use crate::io;
use crate::proposals::{build_proposal_set, ClusterAssignment, ProposalOrigin, ProposalParams};
use crate::raster::{composite, masked_target, HoleMask, Image, ValidMask};

pub use crate::cst::CstMode;
pub use crate::fill::FillMethod;
pub use crate::proposals::ClusteringMode;

/// Minimum number of correspondences for the multi-proposal path.
pub const MIN_MATCHES: usize = 4;

/// Engine settings. Serialized field names are the JSON config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_clusters: usize,
    pub clustering_mode: ClusteringMode,
    pub grid_s: usize,
    pub grid_d: usize,
    pub ransac_threshold_px: f64,
    pub confidence_sigma: f64,
    pub softmax_temperature: f64,
    pub fallback_floor: f64,
    pub fill_method: FillMethod,
    /// Per proposal id `i` (entry `i - 1`); missing entries are enabled.
    pub proposal_toggles: Vec<bool>,
    pub rng_seed: u64,
    pub cst_mode: CstMode,
    pub ratio: f64,
    pub band_px: f64,
    pub max_flow_offset: f64,
    pub color_ridge: f64,
    pub poisson: bool,
    pub posthoc_fill: bool,
    pub posthoc_threshold: f64,
    pub depth_path: Option<PathBuf>,
    pub detector: DetectorParams,
    pub fill: FillParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            clustering_mode: ClusteringMode::Residual,
            grid_s: 8,
            grid_d: 8,
            ransac_threshold_px: 3.0,
            confidence_sigma: 0.05,
            softmax_temperature: 0.1,
            fallback_floor: 0.5 * (-1.0f64).exp(),
            fill_method: FillMethod::Patchmatch,
            proposal_toggles: Vec::new(),
            rng_seed: 0,
            cst_mode: CstMode::ColorThenSpatial,
            ratio: 0.75,
            band_px: 8.0,
            max_flow_offset: 32.0,
            color_ridge: 1e-3,
            poisson: false,
            posthoc_fill: false,
            posthoc_threshold: 0.5,
            depth_path: None,
            detector: DetectorParams::default(),
            fill: FillParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_clusters < 1 {
            return bad("n_clusters must be at least 1");
        }
        if self.grid_s < 2 || self.grid_d < 2 {
            return bad("grid_s and grid_d must be at least 2");
        }
        if !(self.confidence_sigma > 0.0) {
            return bad("confidence_sigma must be positive");
        }
        if !(self.softmax_temperature > 0.0) {
            return bad("softmax_temperature must be positive");
        }
        if !(self.fallback_floor > 0.0 && self.fallback_floor < 1.0) {
            return bad("fallback_floor must lie in (0, 1)");
        }
        if !(self.ransac_threshold_px > 0.0) {
            return bad("ransac_threshold_px must be positive");
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad("ratio must lie in (0, 1)");
        }
        if !(self.band_px >= 1.0) {
            return bad("band_px must be at least 1");
        }
        if !(self.max_flow_offset >= 0.0) || !(self.color_ridge > 0.0) {
            return bad("max_flow_offset must be non-negative and color_ridge positive");
        }
        if !(self.posthoc_threshold > 0.0 && self.posthoc_threshold < 1.0) {
            return bad("posthoc_threshold must lie in (0, 1)");
        }
        if self.detector.octaves == 0 || self.detector.scales_per_octave == 0 || self.detector.max_keypoints == 0 {
            return bad("detector octaves, scales and keypoint cap must be positive");
        }
        self.fill
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("fill: {e}")))?;
        Ok(())
    }

    /// Whether proposal `index` (1-based) is enabled.
    pub fn is_enabled(&self, index: usize) -> bool {
        index == 0 || self.proposal_toggles.get(index - 1).copied().unwrap_or(true)
    }

    fn fill_params(&self) -> FillParams {
        FillParams {
            seed: self.rng_seed,
            ..self.fill
        }
    }

    fn cst_params(&self) -> CstParams {
        CstParams {
            s: self.grid_s,
            d: self.grid_d,
            lambda: self.color_ridge,
            max_offset: self.max_flow_offset,
            mode: self.cst_mode,
        }
    }
}

/// One proposal after refinement, with its confidence.
#[derive(Debug, Clone)]
pub struct PreparedProposal {
    /// Stable id in `1..=n_clusters + 1`.
    pub index: usize,
    pub origin: ProposalOrigin,
    pub homography: Homography,
    pub match_count: usize,
    pub inlier_count: usize,
    pub warped: Image,
    pub warp_valid: ValidMask,
    pub cst: CstResult,
    /// Harmonically extended band residual.
    pub residual: Vec<f64>,
    pub confidence: Image,
    /// Confidence-weighted blend with the fill, composited.
    pub preview: Image,
}

impl PreparedProposal {
    pub fn refined(&self) -> &Image {
        &self.cst.refined
    }
}

/// Everything that fusion needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mask: HoleMask,
    pub masked: Image,
    pub fill: Image,
    pub n_clusters: usize,
    pub proposals: Vec<PreparedProposal>,
    pub keypoints_target: Vec<Keypoint>,
    pub keypoints_source: Vec<Keypoint>,
    pub matches: MatchSet,
    pub assignment: Option<ClusterAssignment>,
    /// No usable proposal could be formed; fusion reduces to the fill.
    pub degraded: bool,
    pub notes: Vec<String>,
}

/// Knobs that only affect fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseParams {
    /// Indexed by proposal id minus one; missing entries are enabled.
    pub toggles: Vec<bool>,
    pub tau: f64,
    pub gamma: f64,
    pub poisson: bool,
    pub posthoc_fill: bool,
    pub posthoc_threshold: f64,
    pub fill: FillParams,
}

impl FuseParams {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            toggles: cfg.proposal_toggles.clone(),
            tau: cfg.softmax_temperature,
            gamma: cfg.fallback_floor,
            poisson: cfg.poisson,
            posthoc_fill: cfg.posthoc_fill,
            posthoc_threshold: cfg.posthoc_threshold,
            fill: cfg.fill_params(),
        }
    }

    pub fn is_enabled(&self, index: usize) -> bool {
        index == 0 || self.toggles.get(index - 1).copied().unwrap_or(true)
    }
}

#[derive(Debug, Clone)]
pub struct Fused {
    pub weights: FusionWeights,
    /// Proposal ids in the order of `weights.proposals`.
    pub indices: Vec<usize>,
    pub merged: Image,
    pub output: Image,
    pub n_proposals_used: usize,
}

/// Outcome of a full run, intermediates included.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub prepared: Prepared,
    pub fused: Fused,
}

impl FusionResult {
    pub fn output(&self) -> &Image {
        &self.fused.output
    }

    pub fn degraded(&self) -> bool {
        self.prepared.degraded
    }
}

fn check_inputs(target: &Image, mask: &HoleMask, source: &Image) -> Result<()> {
    mask.check_dims(target.dims())?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidImage("empty image".into()));
    }
    if mask.known_count() == 0 {
        return Err(Error::AllHole);
    }
    Ok(())
}

/// Fill-only composite: the single-image fill pasted into the hole.
pub fn fill_only(target: &Image, mask: &HoleMask, cfg: &PipelineConfig) -> Result<Image> {
    cfg.validate()?;
    mask.check_dims(target.dims())?;
    if mask.known_count() == 0 {
        return Err(Error::AllHole);
    }
    let masked = masked_target(&target.to_rgb(), mask)?;
    let fill = single_image_fill(&masked, mask, cfg.fill_method, &cfg.fill_params())?;
    let mut out = composite(&masked, &fill, mask)?;
    let params = FuseParams::from_config(cfg);
    if params.posthoc_fill {
        // The fallback carries all weight, so the whole hole is refilled.
        let all = Image::filled(mask.width(), mask.height(), 1, 1.0);
        out = posthoc_refill(&out, &all, mask, params.posthoc_threshold, &params.fill)?;
    }
    Ok(out)
}

/// Runs every stage up to (not including) fusion.
pub fn prepare(
    target: &Image,
    mask: &HoleMask,
    source: &Image,
    depth: Option<&Image>,
    cfg: &PipelineConfig,
) -> Result<Prepared> {
    cfg.validate()?;
    check_inputs(target, mask, source)?;
    let target = target.to_rgb();
    let source = source.to_rgb();
    let masked = masked_target(&target, mask)?;
    let dims = target.dims();
    let mut notes = Vec::new();

    let (fill, generated) = rayon::join(
        || single_image_fill(&masked, mask, cfg.fill_method, &cfg.fill_params()),
        || generate_proposals(&masked, mask, &source, depth, cfg),
    );
    let fill = fill?;
    let Generated {
        keypoints_target,
        keypoints_source,
        matches,
        set,
        notes: gen_notes,
    } = generated?;
    notes.extend(gen_notes);

    let (proposals, assignment) = match set {
        Some(set) => {
            notes.extend(set.notes.iter().cloned());
            let cst = cfg.cst_params();
            let refined: Vec<Result<PreparedProposal>> = set
                .proposals
                .into_par_iter()
                .map(|p| {
                    let cst_out = refine_proposal(&p.warped, &p.valid, &masked, mask, &cst)?;
                    let band = boundary_residual(&cst_out.refined, &masked, mask, &cst_out.valid, cfg.band_px)?;
                    let residual = harmonic_extend(&band, mask, cfg.band_px)?;
                    let confidence = confidence_map(&residual, &cst_out.valid, cfg.confidence_sigma)?;
                    let (_, preview) = spf_merge(&cst_out.refined, &fill, &confidence, mask, &masked)?;
                    Ok(PreparedProposal {
                        index: p.index,
                        origin: p.origin,
                        homography: p.homography,
                        match_count: p.match_count,
                        inlier_count: p.inlier_count,
                        warped: p.warped,
                        warp_valid: p.valid,
                        cst: cst_out,
                        residual,
                        confidence,
                        preview,
                    })
                })
                .collect();
            (refined.into_iter().collect::<Result<Vec<_>>>()?, set.assignment)
        }
        None => (Vec::new(), None),
    };
    for p in &proposals {
        for n in &p.cst.notes {
            notes.push(format!("proposal {}: {n}", p.index));
        }
    }
    let degraded = proposals.is_empty();
    let _ = dims;
    Ok(Prepared {
        mask: mask.clone(),
        masked,
        fill,
        n_clusters: cfg.n_clusters,
        proposals,
        keypoints_target,
        keypoints_source,
        matches,
        assignment,
        degraded,
        notes,
    })
}

struct Generated {
    keypoints_target: Vec<Keypoint>,
    keypoints_source: Vec<Keypoint>,
    matches: MatchSet,
    set: Option<crate::proposals::ProposalSet>,
    notes: Vec<String>,
}

/// Features, matching and proposal construction. Failures degrade to an
/// empty proposal set with a note instead of aborting.
fn generate_proposals(
    masked: &Image,
    mask: &HoleMask,
    source: &Image,
    depth: Option<&Image>,
    cfg: &PipelineConfig,
) -> Result<Generated> {
    let mut out = Generated {
        keypoints_target: Vec::new(),
        keypoints_source: Vec::new(),
        matches: MatchSet::default(),
        set: None,
        notes: Vec::new(),
    };
    let (kt, ks) = rayon::join(
        || detect_keypoints_with(masked, Some(mask), &cfg.detector),
        || detect_keypoints_with(source, None, &cfg.detector),
    );
    let (kt, ks) = match (kt, ks) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            out.notes.push(format!("feature detection failed: {e}"));
            return Ok(out);
        }
    };
    out.keypoints_target = kt;
    out.keypoints_source = ks;
    out.matches = match_descriptors(&out.keypoints_target, &out.keypoints_source, cfg.ratio)?;
    if out.matches.len() < MIN_MATCHES {
        out.notes
            .push(Error::InsufficientMatches { found: out.matches.len() }.to_string());
        return Ok(out);
    }
    let params = ProposalParams {
        n_clusters: cfg.n_clusters,
        mode: cfg.clustering_mode,
        ransac_threshold_px: cfg.ransac_threshold_px,
        rng_seed: cfg.rng_seed,
    };
    let loaded;
    let depth = match (depth, &cfg.depth_path) {
        (Some(d), _) => Some(d),
        (None, Some(path)) if cfg.clustering_mode == ClusteringMode::DepthFile => {
            loaded = io::load_image(path, false)?;
            Some(&loaded)
        }
        _ => None,
    };
    match build_proposal_set(&out.matches, &params, source, masked.dims(), depth) {
        Ok(set) => out.set = Some(set),
        Err(e @ (Error::InvalidConfig(_) | Error::DimensionMismatch { .. })) => return Err(e),
        Err(e) => out.notes.push(format!("proposal generation failed: {e}")),
    }
    Ok(out)
}

/// Fuses a prepared set. Disabled proposals are left out of the merge
/// entirely; with no enabled proposal the result is the fill composite.
pub fn fuse(prepared: &Prepared, params: &FuseParams) -> Result<Fused> {
    if !(params.tau > 0.0) || !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(Error::InvalidConfig("tau must be positive and gamma in (0, 1)".into()));
    }
    let (w, h) = prepared.mask.dims();
    let indices: Vec<usize> = prepared.proposals.iter().map(|p| p.index).collect();
    let toggles: Vec<bool> = indices.iter().map(|&i| params.is_enabled(i)).collect();
    let weights = if prepared.proposals.is_empty() {
        FusionWeights {
            width: w,
            height: h,
            proposals: Vec::new(),
            fallback: vec![1.0; w * h],
        }
    } else {
        let confs: Vec<&Image> = prepared.proposals.iter().map(|p| &p.confidence).collect();
        mpf_weights(&confs, &toggles, params.tau, params.gamma)?
    };
    let refined: Vec<&Image> = prepared.proposals.iter().map(|p| p.refined()).collect();
    let (merged, mut output) = mpf_merge(&weights, &refined, &prepared.fill, &prepared.masked, &prepared.mask)?;
    if params.poisson {
        output = poisson_blend(&prepared.masked, &merged, &prepared.mask)?;
    }
    if params.posthoc_fill {
        let fallback = weights_to_image(w, h, &weights.fallback);
        output = posthoc_refill(&output, &fallback, &prepared.mask, params.posthoc_threshold, &params.fill)?;
    }
    let n_proposals_used = toggles.iter().filter(|&&t| t).count();
    Ok(Fused {
        weights,
        indices,
        merged,
        output,
        n_proposals_used,
    })
}

fn weights_to_image(w: usize, h: usize, v: &[f64]) -> Image {
    Image::from_vec(w, h, 1, v.iter().map(|&x| x as f32).collect()).expect("sized from weights")
}

/// Full pipeline. A depth map for `depth-file` clustering is read from
/// `cfg.depth_path` when set.
pub fn run_pipeline(target: &Image, mask: &HoleMask, source: &Image, cfg: &PipelineConfig) -> Result<FusionResult> {
    run_pipeline_with_depth(target, mask, source, None, cfg)
}

pub fn run_pipeline_with_depth(
    target: &Image,
    mask: &HoleMask,
    source: &Image,
    depth: Option<&Image>,
    cfg: &PipelineConfig,
) -> Result<FusionResult> {
    let prepared = prepare(target, mask, source, depth, cfg)?;
    let fused = fuse(&prepared, &FuseParams::from_config(cfg))?;
    Ok(FusionResult { prepared, fused })
}

#[derive(Serialize)]
struct ProposalRecord {
    index: usize,
    origin: ProposalOrigin,
    homography: Homography,
    match_count: usize,
    inlier_count: usize,
    residual_before: f64,
    residual_after: f64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    degraded: bool,
    n_keypoints_target: usize,
    n_keypoints_source: usize,
    n_matches: usize,
    n_proposals_used: usize,
    proposals: Vec<ProposalRecord>,
    notes: &'a [String],
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Writes every intermediate of a run into `dir` as PNG and JSON files.
pub fn dump_intermediates(result: &FusionResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = &result.prepared;
    let f = &result.fused;
    write_json(&dir.join("keypoints_target.json"), &keypoints_json(&p.keypoints_target))?;
    write_json(&dir.join("keypoints_source.json"), &keypoints_json(&p.keypoints_source))?;
    write_json(&dir.join("matches.json"), &p.matches.pairs)?;
    if let Some(a) = &p.assignment {
        write_json(&dir.join("clusters.json"), a)?;
    }
    let homographies: serde_json::Map<String, serde_json::Value> = p
        .proposals
        .iter()
        .map(|q| (q.index.to_string(), serde_json::to_value(q.homography).expect("matrix serializes")))
        .collect();
    write_json(&dir.join("homographies.json"), &homographies)?;
    for (k, q) in p.proposals.iter().enumerate() {
        let i = q.index;
        io::save_image(&q.warped, dir.join(format!("proposal_{i}.png")))?;
        io::save_image(&q.warp_valid.as_image(), dir.join(format!("valid_{i}.png")))?;
        io::save_image(q.refined(), dir.join(format!("refined_{i}.png")))?;
        io::save_image(&q.cst.guidance, dir.join(format!("guidance_{i}.png")))?;
        if let Some(g) = &q.cst.grid {
            write_json(&dir.join(format!("grid_{i}.json")), &grid_json(g))?;
        }
        if let Some(fl) = &q.cst.field {
            write_json(&dir.join(format!("field_{i}.json")), &fl.to_json())?;
        }
        io::save_image(&q.confidence, dir.join(format!("confidence_{i}.png")))?;
        io::save_image(&q.preview, dir.join(format!("preview_{i}.png")))?;
        io::save_image(&f.weights.proposal_image(k), dir.join(format!("weight_{i}.png")))?;
    }
    io::save_image(&f.weights.fallback_image(), dir.join("weight_g.png"))?;
    io::save_image(&p.fill, dir.join("fill.png"))?;
    io::save_image(&f.merged, dir.join("merged.png"))?;
    io::save_image(&f.output, dir.join("result.png"))?;
    write_json(&dir.join("weights.json"), &weights_summary(&f.weights, &f.indices, &p.mask))?;
    let summary = RunSummary {
        degraded: p.degraded,
        n_keypoints_target: p.keypoints_target.len(),
        n_keypoints_source: p.keypoints_source.len(),
        n_matches: p.matches.len(),
        n_proposals_used: f.n_proposals_used,
        proposals: p
            .proposals
            .iter()
            .map(|q| ProposalRecord {
                index: q.index,
                origin: q.origin,
                homography: q.homography,
                match_count: q.match_count,
                inlier_count: q.inlier_count,
                residual_before: q.cst.residual_before,
                residual_after: q.cst.residual_after,
            })
            .collect(),
        notes: &p.notes,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_json() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_clusters, 5);
        assert_eq!((cfg.grid_s, cfg.grid_d), (8, 8));
        let text = r#"{"n_clusters": 2, "clustering_mode": "depth-file", "fill_method": "diffusion", "cst_mode": "color_only"}"#;
        let cfg = PipelineConfig::from_json(text).unwrap();
        assert_eq!(cfg.n_clusters, 2);
        assert_eq!(cfg.clustering_mode, ClusteringMode::DepthFile);
        assert_eq!(cfg.fill_method, FillMethod::Diffusion);
        assert_eq!(cfg.cst_mode, CstMode::ColorOnly);
        let back = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&back).unwrap(), cfg);
    }

    #[test]
    fn config_validation() {
        for text in [
            r#"{"n_clusters": 0}"#,
            r#"{"grid_s": 1}"#,
            r#"{"confidence_sigma": 0}"#,
            r#"{"softmax_temperature": -1}"#,
            r#"{"fallback_floor": 1.0}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"clustering_mode": "bogus"}"#,
        ] {
            assert!(PipelineConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn textureless_pair_degrades() {
        let img = Image::filled(64, 48, 3, 0.4);
        let mask = HoleMask::rect(64, 48, 20, 15, 40, 30);
        let r = run_pipeline(&img, &mask, &img, &PipelineConfig::default()).unwrap();
        assert!(r.degraded());
        assert!(r.fused.weights.fallback.iter().all(|&v| v == 1.0));
        let fill = fill_only(&img, &mask, &PipelineConfig::default()).unwrap();
        assert_eq!(r.output(), &fill);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let img = Image::filled(64, 48, 3, 0.4);
        let mask = HoleMask::rect(60, 48, 20, 15, 40, 30);
        assert!(matches!(
            run_pipeline(&img, &mask, &img, &PipelineConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
