//! Color and spatial refinement of a warped proposal.
//!
//! Both transforms are fitted on the known overlap between the proposal and
//! the target (outside the hole, fully covered by the warp) and then applied
//! everywhere, including inside the hole:
//!
//! * a bilateral grid of 3x4 affine color matrices, sliced trilinearly by
//!   pixel position and a luminance guidance value;
//! * an `s x s` lattice of 2-D offsets, bilinearly upsampled and applied as
//!   a backward warp.

use nalgebra::{DMatrix, DVector, Matrix4, Matrix4x3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{fit_region, HoleMask, Image, ValidMask};

/// Fewer fit pixels than this leaves the color grid at identity.
pub const MIN_COLOR_FIT_PIXELS: usize = 12;
/// Fewer fit pixels than this leaves the flow field at zero.
pub const MIN_FLOW_FIT_PIXELS: usize = 100;

const CHARBONNIER_EPS: f64 = 1e-3;
const OUTSIDE_PENALTY: f64 = 0.25;
const FLOW_LEVELS: usize = 3;
const FLOW_MAX_SIDE: usize = 512;
const FLOW_MAX_ITERS: usize = 30;
const FLOW_DAMPING: f64 = 1e-4;
const FLOW_SMOOTHNESS: f64 = 1e-3;
const ROW_CHUNK: usize = 16;
const SMOOTH_WEIGHT: f64 = 0.25;

const IDENTITY: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CstMode {
    #[default]
    ColorThenSpatial,
    SpatialThenColor,
    ColorOnly,
    SpatialOnly,
    Off,
}

impl std::str::FromStr for CstMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_then_spatial" => Ok(Self::ColorThenSpatial),
            "spatial_then_color" => Ok(Self::SpatialThenColor),
            "color_only" => Ok(Self::ColorOnly),
            "spatial_only" => Ok(Self::SpatialOnly),
            "off" => Ok(Self::Off),
            other => Err(Error::InvalidConfig(format!("unknown cst mode '{other}'"))),
        }
    }
}

/// Rec. 601 luminance clamped to `[0, 1]`; single-channel input passes
/// through (clamped).
pub fn luminance_guidance(img: &Image) -> Image {
    let mut g = img.to_gray();
    g.clamp_unit();
    g
}

/// `s x s x d` lattice of row-major 3x4 affine color matrices `[K | b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorGrid {
    pub s: usize,
    pub d: usize,
    /// Indexed `(y * s + x) * d + z`.
    pub cells: Vec<[f64; 12]>,
}

/// Lattice coordinates and weights of the eight cells around a sample.
#[inline]
fn trilinear(s: usize, d: usize, x: f64, y: f64, z: f64) -> [(usize, f64); 8] {
    let axis = |v: f64, n: usize| {
        let v = v.clamp(0.0, (n - 1) as f64);
        let i0 = (v.floor() as usize).min(n - 2);
        (i0, v - i0 as f64)
    };
    let (x0, fx) = axis(x, s);
    let (y0, fy) = axis(y, s);
    let (z0, fz) = axis(z, d);
    let mut out = [(0usize, 0.0f64); 8];
    let mut k = 0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                out[k] = (((y0 + dy) * s + x0 + dx) * d + z0 + dz, wx * wy * wz);
                k += 1;
            }
        }
    }
    out
}

#[inline]
fn lattice_xy(x: usize, y: usize, w: usize, h: usize, s: usize) -> (f64, f64) {
    let cx = if w > 1 { x as f64 / (w - 1) as f64 * (s - 1) as f64 } else { 0.0 };
    let cy = if h > 1 { y as f64 / (h - 1) as f64 * (s - 1) as f64 } else { 0.0 };
    (cx, cy)
}

impl ColorGrid {
    pub fn identity(s: usize, d: usize) -> Self {
        Self {
            s,
            d,
            cells: vec![IDENTITY; s * s * d],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.cells.iter().all(|c| *c == IDENTITY)
    }

    pub fn cell(&self, x: usize, y: usize, z: usize) -> &[f64; 12] {
        &self.cells[(y * self.s + x) * self.d + z]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f64; 12] {
        &mut self.cells[(y * self.s + x) * self.d + z]
    }

    /// Affine matrix at lattice coordinates `(x, y, z)`. The deviation from
    /// identity is interpolated so that an identity grid slices to exact
    /// identity.
    pub fn slice(&self, x: f64, y: f64, z: f64) -> [f64; 12] {
        let mut out = IDENTITY;
        for (idx, w) in trilinear(self.s, self.d, x, y, z) {
            if w == 0.0 {
                continue;
            }
            let c = &self.cells[idx];
            for k in 0..12 {
                out[k] += w * (c[k] - IDENTITY[k]);
            }
        }
        out
    }
}

fn check_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::InvalidImage("color refinement expects 3-channel images".into()));
    }
    Ok(())
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

/// Result of a color grid fit.
#[derive(Debug, Clone)]
pub struct ColorFit {
    pub grid: ColorGrid,
    /// Set when there were too few fit pixels and the grid is identity.
    pub insufficient: bool,
}

const ACC: usize = 16 + 12 + 1;

/// Pseudo-sample weight pulling each cell toward the global fit. Local
/// cells fitted on a slightly misregistered proposal absorb structure as
/// color and extrapolate it into the hole, so deviations need strong support.
const CELL_PRIOR: f64 = 1024.0;

/// Fits a bilateral affine color grid mapping `src` to `tgt` on `fit`.
///
/// A global affine fit, pulled toward identity with strength `lambda`,
/// serves as the prior: every cell solves its own least squares over the
/// pixels weighted by their trilinear slicing weight, pulled toward the
/// global fit by `lambda` plus a fixed cell prior. A single Jacobi smoothing
/// pass then blends every populated cell with the mean of its populated
/// 6-neighbours. Cells without data take the global fit.
pub fn fit_color_grid(
    src: &Image,
    tgt: &Image,
    fit: &[bool],
    guidance: &Image,
    s: usize,
    d: usize,
    lambda: f64,
) -> Result<ColorFit> {
    check_rgb(src)?;
    check_rgb(tgt)?;
    check_same(src, tgt)?;
    check_same(src, guidance)?;
    if s < 2 || d < 2 {
        return Err(Error::InvalidParameter("grid dimensions must be at least 2".into()));
    }
    let (w, h) = src.dims();
    if fit.len() != w * h {
        return Err(Error::InvalidParameter("fit mask size does not match image".into()));
    }
    if fit.iter().filter(|&&f| f).count() < MIN_COLOR_FIT_PIXELS {
        return Ok(ColorFit {
            grid: ColorGrid::identity(s, d),
            insufficient: true,
        });
    }
    let n_cells = s * s * d;
    let partials: Vec<Vec<[f64; ACC]>> = (0..h)
        .collect::<Vec<_>>()
        .par_chunks(ROW_CHUNK)
        .map(|rows| {
            let mut acc = vec![[0.0f64; ACC]; n_cells];
            for &y in rows {
                for x in 0..w {
                    let i = y * w + x;
                    if !fit[i] {
                        continue;
                    }
                    let sp = src.pixel(x, y);
                    let tp = tgt.pixel(x, y);
                    let xv = [f64::from(sp[0]), f64::from(sp[1]), f64::from(sp[2]), 1.0];
                    let tv = [f64::from(tp[0]), f64::from(tp[1]), f64::from(tp[2])];
                    let (cx, cy) = lattice_xy(x, y, w, h, s);
                    let cz = f64::from(guidance.get(x, y, 0)) * (d - 1) as f64;
                    for (idx, wt) in trilinear(s, d, cx, cy, cz) {
                        if wt == 0.0 {
                            continue;
                        }
                        let a = &mut acc[idx];
                        for r in 0..4 {
                            for c in 0..4 {
                                a[r * 4 + c] += wt * xv[r] * xv[c];
                            }
                            for c in 0..3 {
                                a[16 + r * 3 + c] += wt * xv[r] * tv[c];
                            }
                        }
                        a[28] += wt;
                    }
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![[0.0f64; ACC]; n_cells];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            for k in 0..ACC {
                a[k] += p[k];
            }
        }
    }

    let identity = Matrix4x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
    let solve = |a: &[f64; ACC], ridge: f64, prior: &Matrix4x3<f64>| -> Option<Matrix4x3<f64>> {
        let ata = Matrix4::from_row_slice(&a[..16]) + Matrix4::identity() * ridge;
        let atb = Matrix4x3::from_row_slice(&a[16..28]) + prior * ridge;
        let sol = ata.cholesky()?.solve(&atb);
        sol.iter().all(|v| v.is_finite()).then_some(sol)
    };
    // sol is 4x3 with columns per output channel; a cell is its transpose.
    let to_cell = |sol: &Matrix4x3<f64>| {
        let mut cell = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                cell[r * 4 + c] = sol[(c, r)];
            }
        }
        cell
    };
    let mut total = [0.0f64; ACC];
    for a in &acc {
        for k in 0..ACC {
            total[k] += a[k];
        }
    }
    let global = solve(&total, lambda, &identity).unwrap_or(identity);
    let global_cell = to_cell(&global);
    let mut cells = vec![global_cell; n_cells];
    for (cell, a) in cells.iter_mut().zip(&acc) {
        if a[28] == 0.0 {
            continue;
        }
        if let Some(sol) = solve(a, lambda + CELL_PRIOR, &global) {
            *cell = to_cell(&sol);
        }
    }

    let populated: Vec<bool> = acc.iter().map(|a| a[28] >= 1.0).collect();
    let idx = |x: usize, y: usize, z: usize| (y * s + x) * d + z;
    let mut smoothed = cells.clone();
    for y in 0..s {
        for x in 0..s {
            for z in 0..d {
                let i = idx(x, y, z);
                if !populated[i] {
                    continue;
                }
                let mut nbrs = Vec::with_capacity(6);
                if x > 0 {
                    nbrs.push(idx(x - 1, y, z));
                }
                if x + 1 < s {
                    nbrs.push(idx(x + 1, y, z));
                }
                if y > 0 {
                    nbrs.push(idx(x, y - 1, z));
                }
                if y + 1 < s {
                    nbrs.push(idx(x, y + 1, z));
                }
                if z > 0 {
                    nbrs.push(idx(x, y, z - 1));
                }
                if z + 1 < d {
                    nbrs.push(idx(x, y, z + 1));
                }
                nbrs.retain(|&j| populated[j]);
                if nbrs.is_empty() {
                    continue;
                }
                for k in 0..12 {
                    let mean = nbrs.iter().map(|&j| cells[j][k]).sum::<f64>() / nbrs.len() as f64;
                    smoothed[i][k] = (1.0 - SMOOTH_WEIGHT) * cells[i][k] + SMOOTH_WEIGHT * mean;
                }
            }
        }
    }
    Ok(ColorFit {
        grid: ColorGrid { s, d, cells: smoothed },
        insufficient: false,
    })
}

/// Applies the grid per pixel, slicing at the pixel's position and guidance
/// value, and clamps to `[0, 1]`. An identity grid returns `src` unchanged.
pub fn apply_color_grid(grid: &ColorGrid, guidance: &Image, src: &Image) -> Result<Image> {
    check_rgb(src)?;
    check_same(src, guidance)?;
    if grid.is_identity() {
        return Ok(src.clone());
    }
    let (w, h) = src.dims();
    let (s, d) = (grid.s, grid.d);
    let mut data = vec![0.0f32; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let (cx, cy) = lattice_xy(x, y, w, h, s);
            let cz = f64::from(guidance.get(x, y, 0)) * (d - 1) as f64;
            let a = grid.slice(cx, cy, cz);
            let p = src.pixel(x, y);
            let v = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
            for c in 0..3 {
                let o = a[c * 4] * v[0] + a[c * 4 + 1] * v[1] + a[c * 4 + 2] * v[2] + a[c * 4 + 3];
                row[x * 3 + c] = (o as f32).clamp(0.0, 1.0);
            }
        }
    });
    Image::from_vec(w, h, 3, data)
}

/// `s x s` lattice of offsets in full-resolution pixels; node `(i, j)` sits
/// at `(i (W-1)/(s-1), j (H-1)/(s-1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub s: usize,
    pub width: usize,
    pub height: usize,
    /// Indexed `j * s + i`, each `[dx, dy]`.
    pub nodes: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zero(s: usize, width: usize, height: usize) -> Self {
        Self {
            s,
            width,
            height,
            nodes: vec![[0.0; 2]; s * s],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.nodes.iter().all(|n| n[0] == 0.0 && n[1] == 0.0)
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        self.nodes[j * self.s + i]
    }

    /// Bilinear interpolation at lattice coordinates.
    pub fn at_lattice(&self, u: f64, v: f64) -> [f64; 2] {
        let (i0, fu, j0, fv) = lattice_cell(self.s, u, v);
        let mut out = [0.0; 2];
        for (dj, wv) in [(0, 1.0 - fv), (1, fv)] {
            for (di, wu) in [(0, 1.0 - fu), (1, fu)] {
                let n = self.nodes[(j0 + dj) * self.s + i0 + di];
                out[0] += wu * wv * n[0];
                out[1] += wu * wv * n[1];
            }
        }
        out
    }

    /// Upsampled offset at full-resolution pixel `(x, y)`.
    pub fn at(&self, x: f64, y: f64) -> [f64; 2] {
        let u = if self.width > 1 { x / (self.width - 1) as f64 * (self.s - 1) as f64 } else { 0.0 };
        let v = if self.height > 1 { y / (self.height - 1) as f64 * (self.s - 1) as f64 } else { 0.0 };
        self.at_lattice(u, v)
    }

    pub fn max_abs(&self) -> f64 {
        self.nodes.iter().flat_map(|n| n.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `s x s x 2` nested arrays, rows first.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<[f64; 2]>> = (0..self.s)
            .map(|j| (0..self.s).map(|i| self.node(i, j)).collect())
            .collect();
        serde_json::to_value(rows).expect("plain arrays serialize")
    }
}

#[inline]
fn lattice_cell(s: usize, u: f64, v: f64) -> (usize, f64, usize, f64) {
    let u = u.clamp(0.0, (s - 1) as f64);
    let v = v.clamp(0.0, (s - 1) as f64);
    let i0 = (u.floor() as usize).min(s - 2);
    let j0 = (v.floor() as usize).min(s - 2);
    (i0, u - i0 as f64, j0, v - j0 as f64)
}

/// Backward warp `out(p) = src(p + A(p))` with normalized bilinear sampling
/// over valid pixels; the returned mask is the warped validity.
pub fn apply_flow(src: &Image, valid: Option<&ValidMask>, field: &FlowField) -> Result<(Image, ValidMask)> {
    let (w, h) = src.dims();
    if field.width != w || field.height != h {
        return Err(Error::DimensionMismatch {
            expected: (field.width, field.height),
            actual: (w, h),
        });
    }
    let ones;
    let valid = match valid {
        Some(v) => {
            if v.dims() != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected: (w, h),
                    actual: v.dims(),
                });
            }
            v
        }
        None => {
            ones = ValidMask::ones(w, h);
            &ones
        }
    };
    if field.is_zero() {
        return Ok((src.clone(), valid.clone()));
    }
    let ch = src.channels();
    let mut data = vec![0.0f32; w * h * ch];
    let mut vout = vec![0.0f32; w * h];
    data.par_chunks_mut(w * ch)
        .zip(vout.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, vrow))| {
            for x in 0..w {
                let a = field.at(x as f64, y as f64);
                let qx = x as f64 + a[0];
                let qy = y as f64 + a[1];
                if !qx.is_finite() || !qy.is_finite() {
                    continue;
                }
                let x0 = qx.floor();
                let y0 = qy.floor();
                let fx = qx - x0;
                let fy = qy - y0;
                let mut num = [0.0f64; 3];
                let mut den = 0.0f64;
                let mut cover = 0.0f64;
                for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let wt = wx * wy;
                        if wt == 0.0 {
                            continue;
                        }
                        let xx = x0 as i64 + dx;
                        let yy = y0 as i64 + dy;
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            continue;
                        }
                        let (xx, yy) = (xx as usize, yy as usize);
                        let vv = f64::from(valid.get(xx, yy));
                        cover += wt * vv;
                        if vv > 0.0 {
                            den += wt * vv;
                            for (c, n) in num.iter_mut().enumerate().take(ch) {
                                *n += wt * vv * f64::from(src.get(xx, yy, c));
                            }
                        }
                    }
                }
                if den > 0.0 {
                    for c in 0..ch {
                        row[x * ch + c] = ((num[c] / den) as f32).clamp(0.0, 1.0);
                    }
                }
                vrow[x] = (cover as f32).clamp(0.0, 1.0);
            }
        });
    Ok((Image::from_vec(w, h, ch, data)?, ValidMask::from_vec(w, h, vout)?))
}

/// Mean absolute per-channel difference over the active pixels of
/// `region`; zero for an empty region.
pub fn cst_residual(refined: &Image, target: &Image, region: &[bool]) -> Result<f64> {
    check_same(refined, target)?;
    if refined.channels() != target.channels() {
        return Err(Error::InvalidImage("channel counts differ".into()));
    }
    let ch = refined.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &on) in region.iter().enumerate() {
        if !on {
            continue;
        }
        for c in 0..ch {
            sum += f64::from((refined.data()[i * ch + c] - target.data()[i * ch + c]).abs());
        }
        n += ch;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// One pyramid level of the flow fit.
struct FlowLevel {
    w: usize,
    h: usize,
    ch: usize,
    src: Vec<f32>,
    tgt: Vec<f32>,
    mask: Vec<bool>,
    /// Full-resolution pixels per level pixel.
    scale: f64,
}

impl FlowLevel {
    /// 2x reduction; a pixel is in the mask only when all of its children are.
    fn half(&self) -> FlowLevel {
        let w = self.w.div_ceil(2);
        let h = self.h.div_ceil(2);
        let ch = self.ch;
        let mut src = vec![0.0f32; w * h * ch];
        let mut tgt = vec![0.0f32; w * h * ch];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut all = true;
                let mut n = 0.0f32;
                let o = (y * w + x) * ch;
                for yy in 2 * y..(2 * y + 2).min(self.h) {
                    for xx in 2 * x..(2 * x + 2).min(self.w) {
                        let i = yy * self.w + xx;
                        all &= self.mask[i];
                        n += 1.0;
                        for c in 0..ch {
                            src[o + c] += self.src[i * ch + c];
                            tgt[o + c] += self.tgt[i * ch + c];
                        }
                    }
                }
                for c in 0..ch {
                    src[o + c] /= n;
                    tgt[o + c] /= n;
                }
                mask[y * w + x] = all;
            }
        }
        FlowLevel {
            w,
            h,
            ch,
            src,
            tgt,
            mask,
            scale: self.scale * 2.0,
        }
    }

    /// Full-resolution coordinate of a level pixel center.
    #[inline]
    fn full_coord(&self, v: usize) -> f64 {
        v as f64 * self.scale + 0.5 * (self.scale - 1.0)
    }
}

/// Bilinear sample restricted to masked pixels: `None` when any tap with
/// nonzero weight is outside the image or the mask.
#[inline]
fn masked_sample(lv: &FlowLevel, qx: f64, qy: f64, val: &mut [f64; 3], gx: &mut [f64; 3], gy: &mut [f64; 3]) -> bool {
    if !qx.is_finite() || !qy.is_finite() {
        return false;
    }
    let x0f = qx.floor();
    let y0f = qy.floor();
    if x0f < 0.0 || y0f < 0.0 || x0f >= lv.w as f64 || y0f >= lv.h as f64 {
        return false;
    }
    let (x0, y0) = (x0f as usize, y0f as usize);
    let fx = qx - x0f;
    let fy = qy - y0f;
    let has_x1 = x0 + 1 < lv.w;
    let has_y1 = y0 + 1 < lv.h;
    if (fx > 0.0 && !has_x1) || (fy > 0.0 && !has_y1) {
        return false;
    }
    let at = |x: usize, y: usize| -> Option<usize> {
        let i = y * lv.w + x;
        lv.mask[i].then_some(i)
    };
    let Some(i00) = at(x0, y0) else {
        return false;
    };
    let i10 = if has_x1 { at(x0 + 1, y0) } else { None };
    let i01 = if has_y1 { at(x0, y0 + 1) } else { None };
    let i11 = if has_x1 && has_y1 { at(x0 + 1, y0 + 1) } else { None };
    if (fx > 0.0 && i10.is_none()) || (fy > 0.0 && i01.is_none()) || (fx > 0.0 && fy > 0.0 && i11.is_none()) {
        return false;
    }
    let ch = lv.ch;
    for c in 0..ch {
        let v = |i: Option<usize>| i.map(|i| f64::from(lv.src[i * ch + c]));
        let v00 = f64::from(lv.src[i00 * ch + c]);
        let v10 = v(i10);
        let v01 = v(i01);
        let v11 = v(i11);
        let top = v00 * (1.0 - fx) + v10.unwrap_or(v00) * fx;
        let bot = v01.unwrap_or(v00) * (1.0 - fx) + v11.unwrap_or(v01.unwrap_or(v00)) * fx;
        val[c] = top * (1.0 - fy) + bot * fy;
        gx[c] = match (v10, v01, v11) {
            (Some(a), Some(b), Some(d)) => (1.0 - fy) * (a - v00) + fy * (d - b),
            (Some(a), _, _) => a - v00,
            _ => 0.0,
        };
        gy[c] = match (v01, v10, v11) {
            (Some(b), Some(a), Some(d)) => (1.0 - fx) * (b - v00) + fx * (d - a),
            (Some(b), _, _) => b - v00,
            _ => 0.0,
        };
    }
    true
}

/// Objective trace of a coarse flow fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowFit {
    pub field: Option<FlowField>,
    /// Per pyramid level (coarsest first): objective at the start of the
    /// level followed by its value after every accepted step.
    pub history: Vec<Vec<f64>>,
}

struct Accum {
    hess: Vec<f64>,
    grad: Vec<f64>,
    objective: f64,
}

fn node_weights(lv: &FlowLevel, s: usize, full_w: usize, full_h: usize, x: usize, y: usize) -> [(usize, f64); 4] {
    let fx = lv.full_coord(x);
    let fy = lv.full_coord(y);
    let u = if full_w > 1 { fx / (full_w - 1) as f64 * (s - 1) as f64 } else { 0.0 };
    let v = if full_h > 1 { fy / (full_h - 1) as f64 * (s - 1) as f64 } else { 0.0 };
    let (i0, fu, j0, fv) = lattice_cell(s, u, v);
    [
        (j0 * s + i0, (1.0 - fu) * (1.0 - fv)),
        (j0 * s + i0 + 1, fu * (1.0 - fv)),
        ((j0 + 1) * s + i0, (1.0 - fu) * fv),
        ((j0 + 1) * s + i0 + 1, fu * fv),
    ]
}

/// Data term (and optionally its Gauss-Newton system) for parameters `a`.
fn evaluate(lv: &FlowLevel, s: usize, full: (usize, usize), a: &[f64], with_system: bool) -> Accum {
    let np = 2 * s * s;
    let rows: Vec<usize> = (0..lv.h).collect();
    let parts: Vec<Accum> = rows
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut acc = Accum {
                hess: if with_system { vec![0.0; np * np] } else { Vec::new() },
                grad: if with_system { vec![0.0; np] } else { Vec::new() },
                objective: 0.0,
            };
            let (mut val, mut gx, mut gy) = ([0.0; 3], [0.0; 3], [0.0; 3]);
            for &y in chunk {
                for x in 0..lv.w {
                    let i = y * lv.w + x;
                    if !lv.mask[i] {
                        continue;
                    }
                    let nw = node_weights(lv, s, full.0, full.1, x, y);
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for &(n, wt) in &nw {
                        dx += wt * a[2 * n];
                        dy += wt * a[2 * n + 1];
                    }
                    let qx = x as f64 + dx / lv.scale;
                    let qy = y as f64 + dy / lv.scale;
                    if !masked_sample(lv, qx, qy, &mut val, &mut gx, &mut gy) {
                        acc.objective += OUTSIDE_PENALTY * lv.ch as f64;
                        continue;
                    }
                    for c in 0..lv.ch {
                        let e = val[c] - f64::from(lv.tgt[i * lv.ch + c]);
                        let rho = (e * e + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
                        acc.objective += rho;
                        if !with_system {
                            continue;
                        }
                        let omega = 1.0 / rho;
                        let mut jac = [(0usize, 0.0f64); 8];
                        for (k, &(n, wt)) in nw.iter().enumerate() {
                            jac[2 * k] = (2 * n, gx[c] * wt / lv.scale);
                            jac[2 * k + 1] = (2 * n + 1, gy[c] * wt / lv.scale);
                        }
                        for &(p, jp) in &jac {
                            if jp == 0.0 {
                                continue;
                            }
                            acc.grad[p] += omega * jp * e;
                            for &(q, jq) in &jac {
                                acc.hess[p * np + q] += omega * jp * jq;
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = Accum {
        hess: if with_system { vec![0.0; np * np] } else { Vec::new() },
        grad: if with_system { vec![0.0; np] } else { Vec::new() },
        objective: 0.0,
    };
    for p in parts {
        total.objective += p.objective;
        if with_system {
            total.hess.iter_mut().zip(&p.hess).for_each(|(t, v)| *t += v);
            total.grad.iter_mut().zip(&p.grad).for_each(|(t, v)| *t += v);
        }
    }
    total
}

/// 4-neighbour lattice edges.
fn lattice_edges(s: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for j in 0..s {
        for i in 0..s {
            if i + 1 < s {
                e.push((j * s + i, j * s + i + 1));
            }
            if j + 1 < s {
                e.push((j * s + i, (j + 1) * s + i));
            }
        }
    }
    e
}

fn smoothness(edges: &[(usize, usize)], a: &[f64]) -> f64 {
    edges
        .iter()
        .map(|&(m, n)| {
            let dx = a[2 * m] - a[2 * n];
            let dy = a[2 * m + 1] - a[2 * n + 1];
            0.5 * (dx * dx + dy * dy)
        })
        .sum()
}

fn build_levels(src: &Image, tgt: &Image, fit: &[bool]) -> Vec<FlowLevel> {
    let (w, h) = src.dims();
    let mut level = FlowLevel {
        w,
        h,
        ch: src.channels(),
        src: src.data().to_vec(),
        tgt: tgt.data().to_vec(),
        mask: fit.to_vec(),
        scale: 1.0,
    };
    while level.w.max(level.h) > FLOW_MAX_SIDE {
        level = level.half();
    }
    let mut levels = vec![level];
    while levels.len() < FLOW_LEVELS {
        let last = levels.last().expect("nonempty");
        if last.w.min(last.h) < 16 {
            break;
        }
        let next = last.half();
        levels.push(next);
    }
    levels.reverse();
    levels
}

/// Fits an `s x s` offset lattice so that `src(p + A(p))` matches `tgt(p)`
/// on `fit`, minimizing a Charbonnier photometric loss coarse to fine.
///
/// Every level runs damped, iteratively reweighted Gauss-Newton with a
/// halving line search; a step is accepted only if it strictly lowers the
/// objective. A weak membrane term on the lattice keeps nodes without data
/// well defined. Offsets are clamped to `max_offset` full-resolution pixels.
pub fn fit_coarse_flow(src: &Image, tgt: &Image, fit: &[bool], s: usize, max_offset: f64) -> Result<FlowFit> {
    check_same(src, tgt)?;
    if src.channels() != tgt.channels() {
        return Err(Error::InvalidImage("channel counts differ".into()));
    }
    if s < 2 {
        return Err(Error::InvalidParameter("flow lattice must be at least 2x2".into()));
    }
    let (w, h) = src.dims();
    if fit.len() != w * h {
        return Err(Error::InvalidParameter("fit mask size does not match image".into()));
    }
    if fit.iter().filter(|&&f| f).count() < MIN_FLOW_FIT_PIXELS {
        return Ok(FlowFit {
            field: Some(FlowField::zero(s, w, h)),
            history: Vec::new(),
        });
    }
    let levels = build_levels(src, tgt, fit);
    let np = 2 * s * s;
    let edges = lattice_edges(s);
    let mut a = vec![0.0f64; np];
    let mut history = Vec::new();
    for lv in &levels {
        let mut trace = Vec::new();
        let mut eta: Option<f64> = None;
        let objective = |a: &[f64], eta: f64| evaluate(lv, s, (w, h), a, false).objective + eta * smoothness(&edges, a);
        let mut current = f64::NAN;
        for _ in 0..FLOW_MAX_ITERS {
            let sys = evaluate(lv, s, (w, h), &a, true);
            let eta_v = *eta.get_or_insert_with(|| {
                let diag: Vec<f64> = (0..np).map(|p| sys.hess[p * np + p]).filter(|&d| d > 0.0).collect();
                if diag.is_empty() {
                    1.0
                } else {
                    FLOW_SMOOTHNESS * diag.iter().sum::<f64>() / diag.len() as f64
                }
            });
            if trace.is_empty() {
                current = sys.objective + eta_v * smoothness(&edges, &a);
                trace.push(current);
            }
            let mut hm = DMatrix::from_row_slice(np, np, &sys.hess);
            let mut g = DVector::from_column_slice(&sys.grad);
            for p in 0..np {
                let d = hm[(p, p)];
                hm[(p, p)] = d + FLOW_DAMPING * d + 1e-9;
            }
            for &(m, n) in &edges {
                for c in 0..2 {
                    let (pm, pn) = (2 * m + c, 2 * n + c);
                    hm[(pm, pm)] += eta_v;
                    hm[(pn, pn)] += eta_v;
                    hm[(pm, pn)] -= eta_v;
                    hm[(pn, pm)] -= eta_v;
                    let diff = a[pm] - a[pn];
                    g[pm] += eta_v * diff;
                    g[pn] -= eta_v * diff;
                }
            }
            if g.amax() == 0.0 {
                break;
            }
            let step = match hm.clone().cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => match hm.lu().solve(&(-&g)) {
                    Some(x) => x,
                    None => break,
                },
            };
            if step.iter().any(|v| !v.is_finite()) {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..12 {
                let cand: Vec<f64> = a
                    .iter()
                    .zip(step.iter())
                    .map(|(ai, si)| (ai + alpha * si).clamp(-max_offset, max_offset))
                    .collect();
                let e = objective(&cand, eta_v);
                if e < current {
                    accepted = Some((cand, e));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, e)) = accepted else {
                break;
            };
            let moved = cand.iter().zip(&a).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            let gain = current - e;
            a = cand;
            current = e;
            trace.push(current);
            if moved < 1e-3 || gain < 1e-9 * current.abs().max(1e-12) {
                break;
            }
        }
        if trace.is_empty() {
            trace.push(objective(&a, eta.unwrap_or(0.0)));
        }
        history.push(trace);
    }
    let field = FlowField {
        s,
        width: w,
        height: h,
        nodes: (0..s * s).map(|n| [a[2 * n], a[2 * n + 1]]).collect(),
    };
    Ok(FlowFit {
        field: Some(field),
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CstParams {
    pub s: usize,
    pub d: usize,
    pub lambda: f64,
    pub max_offset: f64,
    pub mode: CstMode,
}

impl Default for CstParams {
    fn default() -> Self {
        Self {
            s: 8,
            d: 8,
            lambda: 1e-3,
            max_offset: 32.0,
            mode: CstMode::ColorThenSpatial,
        }
    }
}

/// Refined proposal with the fitted transforms.
#[derive(Debug, Clone)]
pub struct CstResult {
    pub refined: Image,
    pub valid: ValidMask,
    pub guidance: Image,
    pub grid: Option<ColorGrid>,
    pub field: Option<FlowField>,
    pub flow_history: Vec<Vec<f64>>,
    pub residual_before: f64,
    pub residual_after: f64,
    pub notes: Vec<String>,
}

/// Runs the configured color/spatial stages on one warped proposal.
///
/// Each stage is fitted on the known pixels still fully covered by the
/// current proposal. A stage that raises the mean absolute residual on the
/// original fit region is discarded.
pub fn refine_proposal(
    warped: &Image,
    valid: &ValidMask,
    target_masked: &Image,
    mask: &HoleMask,
    params: &CstParams,
) -> Result<CstResult> {
    check_rgb(warped)?;
    check_rgb(target_masked)?;
    check_same(warped, target_masked)?;
    mask.check_dims(warped.dims())?;
    let region = fit_region(mask, valid);
    let before = cst_residual(warped, target_masked, &region)?;
    let mut cur = warped.clone();
    let mut cur_valid = valid.clone();
    let mut cur_res = before;
    let mut grid = None;
    let mut field = None;
    let mut flow_history = Vec::new();
    let mut notes = Vec::new();
    let mut guidance = luminance_guidance(warped);

    #[derive(Clone, Copy)]
    enum Stage {
        Color,
        Spatial,
    }
    let stages: &[Stage] = match params.mode {
        CstMode::ColorThenSpatial => &[Stage::Color, Stage::Spatial],
        CstMode::SpatialThenColor => &[Stage::Spatial, Stage::Color],
        CstMode::ColorOnly => &[Stage::Color],
        CstMode::SpatialOnly => &[Stage::Spatial],
        CstMode::Off => &[],
    };
    for stage in stages {
        let fit = fit_region(mask, &cur_valid);
        match stage {
            Stage::Color => {
                let g = luminance_guidance(&cur);
                let cf = fit_color_grid(&cur, target_masked, &fit, &g, params.s, params.d, params.lambda)?;
                if cf.insufficient {
                    notes.push("too few pixels for color fit".into());
                }
                let out = apply_color_grid(&cf.grid, &g, &cur)?;
                let res = cst_residual(&out, target_masked, &region)?;
                if res <= cur_res {
                    cur = out;
                    cur_res = res;
                    guidance = g;
                    grid = Some(cf.grid);
                } else {
                    notes.push("color stage reverted".into());
                    grid = Some(ColorGrid::identity(params.s, params.d));
                }
            }
            Stage::Spatial => {
                let ff = fit_coarse_flow(&cur, target_masked, &fit, params.s, params.max_offset)?;
                let fl = ff.field.expect("fit always returns a field");
                let (out, v) = apply_flow(&cur, Some(&cur_valid), &fl)?;
                let res = cst_residual(&out, target_masked, &region)?;
                flow_history = ff.history;
                if res <= cur_res {
                    cur = out;
                    cur_valid = v;
                    cur_res = res;
                    field = Some(fl);
                } else {
                    notes.push("spatial stage reverted".into());
                    field = Some(FlowField::zero(params.s, warped.width(), warped.height()));
                }
            }
        }
    }
    // A color fit made before alignment regresses toward the mean wherever
    // the proposal is misregistered. Once a flow is accepted, refit the grid
    // on the aligned source and keep whichever result has the lower residual.
    if params.mode == CstMode::ColorThenSpatial {
        if let (Some(fl), Some(_)) = (field.as_ref().filter(|f| !f.is_zero()), grid.as_ref()) {
            let (aligned, v) = apply_flow(warped, Some(valid), fl)?;
            let fit = fit_region(mask, &v);
            let g = luminance_guidance(&aligned);
            let cf = fit_color_grid(&aligned, target_masked, &fit, &g, params.s, params.d, params.lambda)?;
            let out = apply_color_grid(&cf.grid, &g, &aligned)?;
            let res = cst_residual(&out, target_masked, &region)?;
            if res <= cur_res {
                cur = out;
                cur_valid = v;
                cur_res = res;
                guidance = g;
                grid = Some(cf.grid);
            }
        }
    }
    Ok(CstResult {
        refined: cur,
        valid: cur_valid,
        guidance,
        grid,
        field,
        flow_history,
        residual_before: before,
        residual_after: cur_res,
        notes,
    })
}

/// Debug dump of a grid: `s*s*d` records of 12 floats.
pub fn grid_json(grid: &ColorGrid) -> serde_json::Value {
    serde_json::json!({
        "s": grid.s,
        "d": grid.d,
        "cells": grid.cells.iter().map(|c| c.to_vec()).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Image::from_fn(w, h, 3, |_, _, _| rng.random::<f32>());
        noise.gaussian_blur(2.0).resize_bilinear(w, h)
    }

    fn contrast(img: &Image) -> Image {
        // Stretch blurred noise back to a useful range.
        let mean = img.data().iter().sum::<f32>() / img.data().len() as f32;
        let mut out = img.clone();
        out.data_mut().iter_mut().for_each(|v| *v = (0.5 + 4.0 * (*v - mean)).clamp(0.0, 1.0));
        out
    }

    #[test]
    fn guidance_values() {
        let white = Image::filled(2, 2, 3, 1.0);
        assert!(luminance_guidance(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let green = Image::from_fn(1, 1, 3, |_, _, c| if c == 1 { 1.0 } else { 0.0 });
        assert!((luminance_guidance(&green).get(0, 0, 0) - 0.587).abs() < 1e-6);
        let ramp = Image::from_fn(5, 1, 3, |x, _, _| x as f32 / 4.0);
        let g = luminance_guidance(&ramp);
        for x in 0..5 {
            assert!((g.get(x, 0, 0) - x as f32 / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_fit_reproduces_source() {
        let src = contrast(&texture(64, 48, 1));
        let fit = vec![true; 64 * 48];
        let g = luminance_guidance(&src);
        let cf = fit_color_grid(&src, &src, &fit, &g, 8, 8, 1e-3).unwrap();
        let out = apply_color_grid(&cf.grid, &g, &src).unwrap();
        let max = out.data().iter().zip(src.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max <= 2.0 / 255.0, "max abs {max}");
    }

    #[test]
    fn global_gain_is_recovered() {
        let src = contrast(&texture(64, 48, 2));
        let mut tgt = src.clone();
        tgt.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        let fit = vec![true; 64 * 48];
        let g = luminance_guidance(&src);
        let cf = fit_color_grid(&src, &tgt, &fit, &g, 8, 8, 1e-3).unwrap();
        let out = apply_color_grid(&cf.grid, &g, &src).unwrap();
        let mae = out.data().iter().zip(tgt.data()).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>()
            / out.data().len() as f64;
        assert!(mae <= 2.0 / 255.0, "mae {mae}");
    }

    #[test]
    fn empty_fit_gives_identity() {
        let src = texture(32, 32, 3);
        let g = luminance_guidance(&src);
        let cf = fit_color_grid(&src, &src, &vec![false; 32 * 32], &g, 8, 8, 1e-3).unwrap();
        assert!(cf.insufficient);
        assert!(cf.grid.is_identity());
        assert_eq!(apply_color_grid(&cf.grid, &g, &src).unwrap(), src);
    }

    #[test]
    fn constant_affine_grid() {
        let mut grid = ColorGrid::identity(4, 4);
        for c in grid.cells.iter_mut() {
            *c = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        }
        let src = texture(16, 16, 4);
        let out = apply_color_grid(&grid, &luminance_guidance(&src), &src).unwrap();
        for px in out.data().chunks(3) {
            assert!((px[0] - 1.0).abs() < 1e-6 && px[1].abs() < 1e-6 && px[2].abs() < 1e-6);
        }
    }

    #[test]
    fn guidance_interpolates_gain() {
        // Gain 2 on the z=0 plane, 0.5 on the z=1 plane (d = 2).
        let mut grid = ColorGrid::identity(2, 2);
        for y in 0..2 {
            for x in 0..2 {
                for (z, gain) in [(0, 2.0), (1, 0.5)] {
                    *grid.cell_mut(x, y, z) = [gain, 0.0, 0.0, 0.0, 0.0, gain, 0.0, 0.0, 0.0, 0.0, gain, 0.0];
                }
            }
        }
        let src = Image::filled(3, 3, 3, 0.25);
        for gval in [0.0f32, 0.25, 0.5, 1.0] {
            let g = Image::filled(3, 3, 1, gval);
            let out = apply_color_grid(&grid, &g, &src).unwrap();
            let gain = 2.0 * (1.0 - f64::from(gval)) + 0.5 * f64::from(gval);
            assert!((f64::from(out.get(1, 1, 0)) - 0.25 * gain).abs() < 1e-6);
        }
    }

    #[test]
    fn flow_zero_and_constant_cases() {
        let src = contrast(&texture(80, 64, 5));
        let fit = vec![true; 80 * 64];
        let ff = fit_coarse_flow(&src, &src, &fit, 8, 32.0).unwrap();
        assert!(ff.field.unwrap().max_abs() < 0.1);

        let flat = Image::filled(80, 64, 3, 0.4);
        let ff = fit_coarse_flow(&flat, &flat, &fit, 8, 32.0).unwrap();
        assert!(ff.field.unwrap().is_zero());
    }

    #[test]
    fn flow_recovers_shift() {
        let (w, h) = (160, 128);
        let big = contrast(&texture(w + 16, h, 6));
        let src = Image::from_fn(w, h, 3, |x, y, c| big.get(x, y, c));
        let tgt = Image::from_fn(w, h, 3, |x, y, c| big.get(x + 4, y, c));
        let fit = vec![true; w * h];
        let ff = fit_coarse_flow(&src, &tgt, &fit, 8, 32.0).unwrap();
        let field = ff.field.unwrap();
        for j in 1..7 {
            for i in 1..6 {
                let n = field.node(i, j);
                assert!((n[0] - 4.0).abs() < 0.25 && n[1].abs() < 0.25, "node ({i},{j}) = {n:?}");
            }
        }
        for level in &ff.history {
            assert!(level.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn upsampled_field_hits_nodes() {
        let mut f = FlowField::zero(8, 71, 36);
        for (k, n) in f.nodes.iter_mut().enumerate() {
            *n = [k as f64 * 0.1, -(k as f64) * 0.05];
        }
        for j in 0..8 {
            for i in 0..8 {
                let x = i as f64 * 10.0;
                let y = j as f64 * 5.0;
                assert_eq!(f.at(x, y), f.node(i, j));
            }
        }
    }

    #[test]
    fn apply_flow_cases() {
        let ramp = Image::from_fn(30, 10, 1, |x, _, _| x as f32 / 40.0);
        let zero = FlowField::zero(4, 30, 10);
        let (out, v) = apply_flow(&ramp, None, &zero).unwrap();
        assert_eq!(out, ramp);
        assert!(v.data().iter().all(|&x| x == 1.0));

        let mut shift = FlowField::zero(4, 30, 10);
        shift.nodes.iter_mut().for_each(|n| *n = [4.0, 0.0]);
        let (out, v) = apply_flow(&ramp, None, &shift).unwrap();
        for x in 0..26 {
            assert!((out.get(x, 3, 0) - (x + 4) as f32 / 40.0).abs() < 1e-6);
            assert_eq!(v.get(x, 3), 1.0);
        }

        let mut away = FlowField::zero(4, 30, 10);
        away.nodes.iter_mut().for_each(|n| *n = [100.0, 0.0]);
        let (out, v) = apply_flow(&ramp, None, &away).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Image::from_fn(9, 7, 3, |_, _, _| rng.random::<f32>());
        let b = Image::from_fn(9, 7, 3, |_, _, _| rng.random::<f32>());
        let region: Vec<bool> = (0..63).map(|i| i % 3 != 0).collect();
        assert_eq!(cst_residual(&a, &a, &region).unwrap(), 0.0);

        let mut off = a.clone();
        off.data_mut().iter_mut().for_each(|v| *v += 0.1);
        assert!((cst_residual(&off, &a, &region).unwrap() - 0.1).abs() < 1e-6);

        let mut sum = 0.0;
        let mut n = 0;
        for (i, &r) in region.iter().enumerate() {
            if r {
                for c in 0..3 {
                    sum += f64::from((a.data()[i * 3 + c] - b.data()[i * 3 + c]).abs());
                    n += 1;
                }
            }
        }
        assert!((cst_residual(&a, &b, &region).unwrap() - sum / n as f64).abs() < 1e-12);
        assert_eq!(cst_residual(&a, &b, &[false; 63]).unwrap(), 0.0);
    }
}
