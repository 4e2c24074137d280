//! Batch evaluation over a directory of `(target, source, mask, gt)`
//! quadruples.
//!
//! Each quadruple is a subdirectory holding `target.png`, `source.png`,
//! `mask.png` and `gt.png`, plus an optional single-channel `depth.png`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use refill_core::io;
use refill_core::raster::{HoleMask, Image};
use refill_core::{run_pipeline_with_depth, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{psnr, psnr_reported, ssim};

#[derive(Debug, Clone)]
pub struct Quadruple {
    pub id: String,
    pub target: Image,
    pub source: Image,
    pub mask: HoleMask,
    pub gt: Image,
    pub depth: Option<Image>,
}

/// Writes `q` into `dir/<id>/` and returns that path.
pub fn write_quadruple(dir: &Path, q: &Quadruple) -> Result<PathBuf> {
    let out = dir.join(&q.id);
    std::fs::create_dir_all(&out)?;
    io::save_image(&q.target, out.join("target.png"))?;
    io::save_image(&q.source, out.join("source.png"))?;
    io::save_mask(&q.mask, out.join("mask.png"))?;
    io::save_image(&q.gt, out.join("gt.png"))?;
    if let Some(d) = &q.depth {
        io::save_image(d, out.join("depth.png"))?;
    }
    Ok(out)
}

pub fn load_quadruple(path: &Path) -> Result<Quadruple> {
    let id = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let depth_path = path.join("depth.png");
    let depth = if depth_path.exists() {
        Some(io::load_image(&depth_path, false)?)
    } else {
        None
    };
    let q = Quadruple {
        id,
        target: io::load_image(path.join("target.png"), true)?,
        source: io::load_image(path.join("source.png"), true)?,
        mask: io::load_mask(path.join("mask.png"))?,
        gt: io::load_image(path.join("gt.png"), true)?,
        depth,
    };
    if q.mask.dims() != q.target.dims() || q.gt.dims() != q.target.dims() {
        return Err(Error::DimensionMismatch(q.target.dims(), q.mask.dims()));
    }
    Ok(q)
}

/// Sorted quadruple directories under `dir`.
pub fn list_quadruples(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && path.join("target.png").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pair_id: String,
    /// Capped at [`crate::PSNR_CAP`].
    pub psnr_hole: f64,
    pub ssim_full: f64,
    pub hole_fraction: f64,
    pub n_proposals_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, median: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { mean, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub psnr_hole: Aggregate,
    pub ssim_full: Aggregate,
    pub hole_fraction: Aggregate,
    pub config: PipelineConfig,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config: PipelineConfig) -> Self {
        let col = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Self {
            psnr_hole: Aggregate::of(&col(|r| r.psnr_hole)),
            ssim_full: Aggregate::of(&col(|r| r.ssim_full)),
            hole_fraction: Aggregate::of(&col(|r| r.hole_fraction)),
            rows,
            config,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn evaluate(q: &Quadruple, cfg: &PipelineConfig) -> Result<EvalRow> {
    let result = run_pipeline_with_depth(&q.target, &q.mask, &q.source, q.depth.as_ref(), cfg)?;
    let out = result.output();
    let gt = q.gt.to_rgb();
    Ok(EvalRow {
        pair_id: q.id.clone(),
        psnr_hole: psnr_reported(psnr(out, &gt, Some(&q.mask))?),
        ssim_full: ssim(out, &gt)?,
        hole_fraction: q.mask.hole_fraction(),
        n_proposals_used: result.fused.n_proposals_used,
    })
}

/// Paths of the CSV and JSON reports for an output location: a `.json` or
/// `.csv` path names both files by extension, anything else is a directory
/// receiving `report.csv` and `report.json`.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    match out.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("csv") => (out.with_extension("csv"), out.with_extension("json")),
        _ => (out.join("report.csv"), out.join("report.json")),
    }
}

/// Runs the pipeline on every quadruple under `pairs_dir` and writes the
/// CSV and JSON reports.
pub fn eval_run(pairs_dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let dirs = list_quadruples(pairs_dir)?;
    if dirs.is_empty() {
        return Err(Error::EmptyCorpus(pairs_dir.display().to_string()));
    }
    let rows = dirs
        .par_iter()
        .map(|d| load_quadruple(d).and_then(|q| evaluate(&q, cfg)))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_rows(rows, cfg.clone());
    let (csv_path, json_path) = report_paths(out);
    for p in [&csv_path, &json_path] {
        if let Some(parent) = p.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
    }
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    Ok(report)
}
