//! Single-image hole filling and gradient-domain blending.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{HoleMask, Image};
use crate::solver::{Boundary, LaplaceSystem, SOLVE_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FillMethod {
    #[default]
    Patchmatch,
    Diffusion,
}

impl std::str::FromStr for FillMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patchmatch" => Ok(Self::Patchmatch),
            "diffusion" => Ok(Self::Diffusion),
            other => Err(Error::InvalidConfig(format!("unknown fill method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FillParams {
    pub patch_size: usize,
    /// `None` picks the depth from the hole size.
    pub pyramid_levels: Option<usize>,
    pub em_iters: usize,
    pub random_search_decay: f64,
    pub seed: u64,
}

impl Default for FillParams {
    fn default() -> Self {
        Self {
            patch_size: 7,
            pyramid_levels: None,
            em_iters: 6,
            random_search_decay: 0.5,
            seed: 0,
        }
    }
}

impl FillParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "patch size must be odd and at least 3, got {}",
                self.patch_size
            )));
        }
        if !(self.random_search_decay > 0.0 && self.random_search_decay < 1.0) {
            return Err(Error::InvalidParameter("random search decay must lie in (0, 1)".into()));
        }
        if self.em_iters == 0 {
            return Err(Error::InvalidParameter("at least one EM iteration is required".into()));
        }
        Ok(())
    }
}

fn check_inputs(img: &Image, mask: &HoleMask) -> Result<()> {
    mask.check_dims(img.dims())?;
    if mask.known_count() == 0 {
        return Err(Error::AllHole);
    }
    Ok(())
}

/// Solves the per-channel Laplace (or Poisson, with `guidance`) problem on
/// the hole with the known pixels as Dirichlet data.
fn solve_hole(
    img: &Image,
    mask: &HoleMask,
    guidance: Option<&dyn Fn(usize) -> Vec<f64>>,
    init: Option<&Image>,
) -> Result<Image> {
    check_inputs(img, mask)?;
    let (w, h) = img.dims();
    let ch = img.channels();
    let unknown: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    if !unknown.iter().any(|&u| u) {
        return Ok(img.clone());
    }
    let guides: Vec<Option<Vec<f64>>> = (0..ch).map(|c| guidance.map(|g| g(c))).collect();
    let channels: Vec<Vec<f64>> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let vals: Vec<f64> = (0..w * h).map(|i| f64::from(img.data()[i * ch + c])).collect();
            let sys = LaplaceSystem::new(w, h, &unknown, |q| Boundary::Fixed(vals[q]));
            let start: Option<Vec<f64>> =
                init.map(|im| (0..w * h).map(|i| f64::from(im.data()[i * ch + c])).collect());
            let sol = sys.solve(guides[c].as_deref(), start.as_deref(), SOLVE_TOL);
            let mut out = vals;
            for i in 0..w * h {
                if sol.solved[i] {
                    out[i] = sol.values[i];
                }
            }
            out
        })
        .collect();
    let mut out = img.clone();
    let data = out.data_mut();
    for i in 0..w * h {
        if unknown[i] {
            for c in 0..ch {
                data[i * ch + c] = channels[c][i] as f32;
            }
        }
    }
    Ok(out)
}

/// Harmonic fill: hole pixels solve the discrete Laplace equation with the
/// surrounding known pixels as boundary values. Image borders act as
/// reflecting (Neumann) boundaries.
pub fn diffusion_fill(masked: &Image, mask: &HoleMask) -> Result<Image> {
    solve_hole(masked, mask, None, None)
}

/// Gradient-domain paste of `source` into the hole of `target`: hole pixels
/// reproduce the discrete Laplacian of `source` while matching the target's
/// known pixels on the hole boundary.
pub fn poisson_blend(target: &Image, source: &Image, mask: &HoleMask) -> Result<Image> {
    check_inputs(target, mask)?;
    if source.dims() != target.dims() || source.channels() != target.channels() {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            actual: source.dims(),
        });
    }
    let (w, h) = target.dims();
    let guide = |c: usize| -> Vec<f64> {
        let s = |x: usize, y: usize| f64::from(source.get(x, y, c));
        let mut g = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                if !mask.is_hole(x, y) {
                    continue;
                }
                let v = s(x, y);
                let mut acc = 0.0;
                if x > 0 {
                    acc += v - s(x - 1, y);
                }
                if x + 1 < w {
                    acc += v - s(x + 1, y);
                }
                if y > 0 {
                    acc += v - s(x, y - 1);
                }
                if y + 1 < h {
                    acc += v - s(x, y + 1);
                }
                g[y * w + x] = acc;
            }
        }
        g
    };
    solve_hole(target, mask, Some(&guide), Some(source))
}

/// One level of the synthesis pyramid.
struct Level {
    w: usize,
    h: usize,
    ch: usize,
    img: Vec<f32>,
    hole: Vec<bool>,
}

impl Level {
    /// 2x reduction; a coarse pixel is a hole if any child is.
    fn half(&self) -> Level {
        let w = self.w.div_ceil(2);
        let h = self.h.div_ceil(2);
        let ch = self.ch;
        let mut img = vec![0.0f32; w * h * ch];
        let mut hole = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut n = 0.0f32;
                let mut any = false;
                let o = (y * w + x) * ch;
                for yy in 2 * y..(2 * y + 2).min(self.h) {
                    for xx in 2 * x..(2 * x + 2).min(self.w) {
                        let i = yy * self.w + xx;
                        any |= self.hole[i];
                        n += 1.0;
                        for c in 0..ch {
                            img[o + c] += self.img[i * ch + c];
                        }
                    }
                }
                for c in 0..ch {
                    img[o + c] /= n;
                }
                hole[y * w + x] = any;
            }
        }
        Level { w, h, ch, img, hole }
    }

    fn to_image(&self) -> Image {
        Image::from_vec(self.w, self.h, self.ch, self.img.clone()).expect("consistent level")
    }

    fn mask(&self) -> HoleMask {
        HoleMask::from_vec(self.w, self.h, self.hole.iter().map(|&b| u8::from(b)).collect()).expect("consistent level")
    }
}

struct Synth<'a> {
    lv: &'a Level,
    r: i64,
    valid_src: Vec<bool>,
    src_list: Vec<u32>,
}

impl Synth<'_> {
    #[inline]
    fn dist(&self, p: usize, q: usize, cutoff: f64) -> f64 {
        let lv = self.lv;
        let (w, h) = (lv.w as i64, lv.h as i64);
        let (px, py) = ((p % lv.w) as i64, (p / lv.w) as i64);
        let (qx, qy) = ((q % lv.w) as i64, (q / lv.w) as i64);
        let ch = lv.ch;
        let mut d = 0.0f64;
        for dy in -self.r..=self.r {
            let ty = py + dy;
            if ty < 0 || ty >= h {
                continue;
            }
            let sy = qy + dy;
            for dx in -self.r..=self.r {
                let tx = px + dx;
                if tx < 0 || tx >= w {
                    continue;
                }
                let ti = ((ty * w + tx) as usize) * ch;
                let si = ((sy * w + qx + dx) as usize) * ch;
                for c in 0..ch {
                    let e = f64::from(lv.img[ti + c] - lv.img[si + c]);
                    d += e * e;
                }
            }
            if d > cutoff {
                return d;
            }
        }
        d
    }
}

fn auto_levels(mask: &HoleMask, patch: usize) -> usize {
    let dist = crate::raster::euclidean_distance(mask.width(), mask.height(), |i| !mask.is_hole_idx(i));
    let depth = dist.iter().cloned().fold(0.0f32, f32::max) as f64;
    let radius = (patch / 2) as f64;
    let mut levels = 1;
    let mut side = mask.width().min(mask.height());
    let mut d = depth;
    while levels < 6 && d > radius && side / 2 >= 3 * patch {
        levels += 1;
        side /= 2;
        d /= 2.0;
    }
    levels
}

/// Coarse-to-fine exemplar synthesis (expectation-maximization over a
/// nearest-neighbour field found by randomized propagation and search).
///
/// The coarsest level starts from the harmonic fill. At every level each
/// patch overlapping the hole is matched to a fully known patch, and hole
/// pixels are re-estimated as a similarity-weighted vote of the matched
/// patches. Deterministic for a fixed seed; known pixels are returned
/// untouched.
pub fn patchmatch_fill(masked: &Image, mask: &HoleMask, params: &FillParams) -> Result<Image> {
    params.validate()?;
    check_inputs(masked, mask)?;
    if mask.hole_count() == 0 {
        return Ok(masked.clone());
    }
    let p = params.patch_size;
    if mask.known_count() < p * p {
        return Err(Error::EmptyRegion);
    }
    let n_levels = params.pyramid_levels.unwrap_or_else(|| auto_levels(mask, p)).max(1);
    let mut levels = vec![Level {
        w: masked.width(),
        h: masked.height(),
        ch: masked.channels(),
        img: masked.data().to_vec(),
        hole: mask.data().iter().map(|&v| v != 0).collect(),
    }];
    while levels.len() < n_levels {
        let next = levels.last().expect("nonempty").half();
        levels.push(next);
    }
    // Coarsest level: harmonic initialization. A level with no known pixels
    // cannot be initialized and is dropped.
    while levels.len() > 1 && levels.last().expect("nonempty").hole.iter().all(|&h| h) {
        levels.pop();
    }
    {
        let top = levels.last_mut().expect("nonempty");
        let init = diffusion_fill(&top.to_image(), &top.mask())?;
        top.img = init.into_data();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut prev_nnf: Option<(usize, usize, Vec<u32>)> = None;
    for li in (0..levels.len()).rev() {
        if li + 1 < levels.len() {
            // Upsample the coarser estimate into this level's hole.
            let (coarse, fine) = {
                let (a, b) = levels.split_at_mut(li + 1);
                (&b[0], &mut a[li])
            };
            let cimg = coarse.to_image().resize_bilinear(fine.w, fine.h);
            for i in 0..fine.w * fine.h {
                if fine.hole[i] {
                    for c in 0..fine.ch {
                        fine.img[i * fine.ch + c] = cimg.data()[i * fine.ch + c];
                    }
                }
            }
        }
        let lv = &mut levels[li];
        let nnf = synthesize_level(lv, params, &mut rng, prev_nnf.as_ref());
        prev_nnf = nnf.map(|n| (lv.w, lv.h, n));
    }
    let out = Image::from_vec(masked.width(), masked.height(), masked.channels(), levels.swap_remove(0).img)?;
    crate::raster::composite(masked, &out, mask)
}

fn synthesize_level(
    lv: &mut Level,
    params: &FillParams,
    rng: &mut ChaCha8Rng,
    prev: Option<&(usize, usize, Vec<u32>)>,
) -> Option<Vec<u32>> {
    let (w, h) = (lv.w, lv.h);
    let r = (params.patch_size / 2) as i64;
    if w as i64 <= 2 * r || h as i64 <= 2 * r {
        return None;
    }
    // Source centers: patch fully inside the image and fully known.
    let mut hole_rows = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = u32::from(lv.hole[y * w + x]);
            hole_rows[(y + 1) * (w + 1) + x + 1] =
                v + hole_rows[y * (w + 1) + x + 1] + hole_rows[(y + 1) * (w + 1) + x] - hole_rows[y * (w + 1) + x];
        }
    }
    let box_holes = |x0: i64, y0: i64, x1: i64, y1: i64| {
        let (x0, y0) = (x0.max(0) as usize, y0.max(0) as usize);
        let (x1, y1) = ((x1 + 1).min(w as i64) as usize, (y1 + 1).min(h as i64) as usize);
        hole_rows[y1 * (w + 1) + x1] + hole_rows[y0 * (w + 1) + x0]
            - hole_rows[y0 * (w + 1) + x1]
            - hole_rows[y1 * (w + 1) + x0]
    };
    let mut valid_src = vec![false; w * h];
    let mut src_list = Vec::new();
    let mut targets = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = (y as usize) * w + x as usize;
            let holes = box_holes(x - r, y - r, x + r, y + r);
            let inside = x >= r && y >= r && x + r < w as i64 && y + r < h as i64;
            if inside && holes == 0 {
                valid_src[i] = true;
                src_list.push(i as u32);
            }
            if holes > 0 {
                targets.push(i);
            }
        }
    }
    if src_list.is_empty() || targets.is_empty() {
        return None;
    }
    let mut synth = Synth {
        lv: &*lv,
        r,
        valid_src,
        src_list,
    };

    // Initial field: carried over from the coarser level when possible.
    let mut nnf = vec![u32::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for &t in &targets {
        let mut q = u32::MAX;
        if let Some((pw, ph, pn)) = prev {
            let (tx, ty) = (t % w, t / w);
            let (cx, cy) = ((tx / 2).min(pw - 1), (ty / 2).min(ph - 1));
            let pq = pn[cy * pw + cx];
            if pq != u32::MAX {
                let (qx, qy) = ((pq as usize % pw) * 2 + tx % 2, (pq as usize / pw) * 2 + ty % 2);
                if qx < w && qy < h && synth.valid_src[qy * w + qx] {
                    q = (qy * w + qx) as u32;
                }
            }
        }
        if q == u32::MAX {
            q = synth.src_list[rng.random_range(0..synth.src_list.len())];
        }
        nnf[t] = q;
    }

    let em_iters = params.em_iters;
    for _ in 0..em_iters {
        for &t in &targets {
            dist[t] = synth.dist(t, nnf[t] as usize, f64::INFINITY);
        }
        for sweep in 0..2 {
            let forward = sweep % 2 == 0;
            let order: Box<dyn Iterator<Item = &usize>> = if forward {
                Box::new(targets.iter())
            } else {
                Box::new(targets.iter().rev())
            };
            for &t in order {
                let (tx, ty) = ((t % w) as i64, (t / w) as i64);
                let step: i64 = if forward { -1 } else { 1 };
                for (nx, ny) in [(tx + step, ty), (tx, ty + step)] {
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = (ny as usize) * w + nx as usize;
                    let nq = nnf[n];
                    if nq == u32::MAX {
                        continue;
                    }
                    let qx = (nq as usize % w) as i64 + (tx - nx);
                    let qy = (nq as usize / w) as i64 + (ty - ny);
                    if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                        continue;
                    }
                    let q = (qy as usize) * w + qx as usize;
                    if !synth.valid_src[q] || q as u32 == nnf[t] {
                        continue;
                    }
                    let d = synth.dist(t, q, dist[t]);
                    if d < dist[t] {
                        dist[t] = d;
                        nnf[t] = q as u32;
                    }
                }
                let mut radius = w.max(h) as f64;
                while radius >= 1.0 {
                    let best = nnf[t] as usize;
                    let (bx, by) = ((best % w) as i64, (best / w) as i64);
                    let ri = radius as i64;
                    let qx = (bx + rng.random_range(-ri..=ri)).clamp(r, w as i64 - 1 - r);
                    let qy = (by + rng.random_range(-ri..=ri)).clamp(r, h as i64 - 1 - r);
                    let q = (qy as usize) * w + qx as usize;
                    if synth.valid_src[q] && q != best {
                        let d = synth.dist(t, q, dist[t]);
                        if d < dist[t] {
                            dist[t] = d;
                            nnf[t] = q as u32;
                        }
                    }
                    radius *= params.random_search_decay;
                }
            }
        }

        // Vote.
        let mut ds: Vec<f64> = targets.iter().map(|&t| dist[t]).collect();
        ds.sort_by(|a, b| a.total_cmp(b));
        let sigma2 = ds[(ds.len() * 3) / 4].max(1e-6);
        let ch = synth.lv.ch;
        let mut acc = vec![0.0f64; w * h * ch];
        let mut wsum = vec![0.0f64; w * h];
        for &t in &targets {
            let q = nnf[t] as usize;
            let wt = (-dist[t] / (2.0 * sigma2)).exp();
            let (tx, ty) = ((t % w) as i64, (t / w) as i64);
            let (qx, qy) = ((q % w) as i64, (q / w) as i64);
            for dy in -r..=r {
                let py = ty + dy;
                if py < 0 || py >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let px = tx + dx;
                    if px < 0 || px >= w as i64 {
                        continue;
                    }
                    let pi = (py as usize) * w + px as usize;
                    if !synth.lv.hole[pi] {
                        continue;
                    }
                    let si = ((qy + dy) as usize) * w + (qx + dx) as usize;
                    wsum[pi] += wt;
                    for c in 0..ch {
                        acc[pi * ch + c] += wt * f64::from(synth.lv.img[si * ch + c]);
                    }
                }
            }
        }
        let mut img = synth.lv.img.clone();
        for i in 0..w * h {
            if synth.lv.hole[i] && wsum[i] > 0.0 {
                for c in 0..ch {
                    img[i * ch + c] = (acc[i * ch + c] / wsum[i]) as f32;
                }
            }
        }
        let valid_src = std::mem::take(&mut synth.valid_src);
        let src_list = std::mem::take(&mut synth.src_list);
        lv.img = img;
        synth = Synth {
            lv: &*lv,
            r,
            valid_src,
            src_list,
        };
    }
    Some(nnf)
}

/// Fills with the requested method.
pub fn single_image_fill(masked: &Image, mask: &HoleMask, method: FillMethod, params: &FillParams) -> Result<Image> {
    match method {
        FillMethod::Diffusion => diffusion_fill(masked, mask),
        FillMethod::Patchmatch => patchmatch_fill(masked, mask, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::masked_target;

    #[test]
    fn diffusion_constant_and_ramp() {
        let img = Image::filled(20, 16, 3, 0.3);
        let mask = HoleMask::rect(20, 16, 5, 4, 14, 11);
        let out = diffusion_fill(&masked_target(&img, &mask).unwrap(), &mask).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let ramp = Image::from_fn(24, 20, 1, |x, y, _| 0.01 * x as f32 + 0.02 * y as f32 + 0.05);
        let out = diffusion_fill(&masked_target(&ramp, &mask_for(24, 20)).unwrap(), &mask_for(24, 20)).unwrap();
        let err = out.data().iter().zip(ramp.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    fn mask_for(w: usize, h: usize) -> HoleMask {
        HoleMask::rect(w, h, 6, 5, w - 6, h - 5)
    }

    #[test]
    fn diffusion_single_stencil() {
        let mut img = Image::new(3, 3, 1);
        img.set(1, 0, 0, 0.0);
        img.set(0, 1, 0, 0.0);
        img.set(2, 1, 0, 1.0);
        img.set(1, 2, 0, 1.0);
        let mut mask = HoleMask::empty(3, 3);
        mask.set(1, 1, true);
        let out = diffusion_fill(&img, &mask).unwrap();
        assert!((out.get(1, 1, 0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn all_hole_is_an_error() {
        let img = Image::new(4, 4, 1);
        assert!(matches!(diffusion_fill(&img, &HoleMask::full(4, 4)), Err(Error::AllHole)));
        assert!(matches!(
            poisson_blend(&img, &img, &HoleMask::full(4, 4)),
            Err(Error::AllHole)
        ));
    }

    fn checkerboard(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, y, _| if ((x / 8) + (y / 8)) % 2 == 0 { 0.9 } else { 0.1 })
    }

    fn psnr_region(a: &Image, b: &Image, mask: &HoleMask) -> f64 {
        let ch = a.channels();
        let mut se = 0.0;
        let mut n = 0;
        for i in 0..mask.data().len() {
            if mask.is_hole_idx(i) {
                for c in 0..ch {
                    let d = f64::from(a.data()[i * ch + c] - b.data()[i * ch + c]);
                    se += d * d;
                    n += 1;
                }
            }
        }
        if se == 0.0 {
            return f64::INFINITY;
        }
        10.0 * (n as f64 / se).log10()
    }

    #[test]
    fn patchmatch_periodic_texture() {
        let gt = checkerboard(96, 96);
        let mask = HoleMask::rect(96, 96, 37, 37, 53, 53);
        let out = patchmatch_fill(&masked_target(&gt, &mask).unwrap(), &mask, &FillParams::default()).unwrap();
        let psnr = psnr_region(&out, &gt, &mask);
        assert!(psnr >= 25.0, "psnr {psnr}");
    }

    #[test]
    fn patchmatch_constant_and_deterministic() {
        let img = Image::filled(40, 40, 3, 0.37);
        let mask = HoleMask::rect(40, 40, 12, 10, 30, 25);
        let masked = masked_target(&img, &mask).unwrap();
        let out = patchmatch_fill(&masked, &mask, &FillParams::default()).unwrap();
        assert_eq!(out, img);

        let tex = Image::from_fn(48, 40, 3, |x, y, c| ((x * 7 + y * 13 + c * 5) % 17) as f32 / 17.0);
        let m2 = HoleMask::rect(48, 40, 15, 12, 33, 28);
        let masked = masked_target(&tex, &m2).unwrap();
        let a = patchmatch_fill(&masked, &m2, &FillParams::default()).unwrap();
        let b = patchmatch_fill(&masked, &m2, &FillParams::default()).unwrap();
        assert_eq!(a, b);
        for i in 0..48 * 40 {
            if !m2.is_hole_idx(i) {
                assert_eq!(&a.data()[i * 3..i * 3 + 3], &tex.data()[i * 3..i * 3 + 3]);
            }
        }
    }

    #[test]
    fn patch_size_is_validated() {
        let img = Image::filled(20, 20, 3, 0.5);
        let mask = HoleMask::rect(20, 20, 5, 5, 10, 10);
        let params = FillParams {
            patch_size: 4,
            ..FillParams::default()
        };
        assert!(patchmatch_fill(&img, &mask, &params).is_err());
    }

    #[test]
    fn poisson_cases() {
        let tgt = Image::from_fn(16, 16, 3, |x, y, c| 0.2 + 0.03 * x as f32 + 0.01 * (y * c) as f32 % 0.3);
        let mask = HoleMask::rect(16, 16, 4, 4, 12, 11);
        let masked = masked_target(&tgt, &mask).unwrap();

        let same = poisson_blend(&masked, &tgt, &mask).unwrap();
        let err = same.data().iter().zip(tgt.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4);

        let mut shifted = tgt.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 0.2);
        let out = poisson_blend(&masked, &shifted, &mask).unwrap();
        let err = out.data().iter().zip(tgt.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4);

        let flat = Image::filled(16, 16, 3, 0.8);
        let a = poisson_blend(&masked, &flat, &mask).unwrap();
        let b = diffusion_fill(&masked, &mask).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5);
        for i in 0..256 {
            if !mask.is_hole_idx(i) {
                assert_eq!(&a.data()[i * 3..i * 3 + 3], &masked.data()[i * 3..i * 3 + 3]);
            }
        }
    }
}
