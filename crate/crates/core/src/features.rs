//! Scale-invariant keypoints and ratio-test matching.
//!
//! Detection follows the classical difference-of-Gaussians recipe: a
//! Gaussian scale space with a few scales per octave, 26-neighbour extrema
//! of the DoG stack, quadratic sub-pixel refinement, contrast and edge
//! rejection, dominant orientations from a 36-bin gradient histogram and a
//! 4x4x8 gradient-orientation descriptor.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{HoleMask, Image, Point};

pub const DESCRIPTOR_LEN: usize = 128;

const MIN_SIDE: usize = 16;
const IMG_BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_SIG_FACTOR: f64 = 1.5;
const ORI_RADIUS_FACTOR: f64 = 3.0 * ORI_SIG_FACTOR;
const ORI_PEAK_RATIO: f32 = 0.8;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE_FACTOR: f64 = 3.0;
const DESC_MAG_THRESHOLD: f32 = 0.2;
const INITIAL_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub sigma: f64,
    pub contrast_threshold: f64,
    pub edge_threshold: f64,
    pub max_keypoints: usize,
    /// Keypoints closer than this to the exclusion mask are dropped.
    pub exclusion_radius: f64,
    /// Additional exclusion proportional to the keypoint scale, so that the
    /// blur support of coarse detections never reaches into the hole.
    pub exclusion_scale_factor: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            octaves: 4,
            scales_per_octave: 3,
            sigma: 1.6,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
            max_keypoints: 4000,
            exclusion_radius: 8.0,
            exclusion_scale_factor: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Absolute blur scale in full-resolution pixels.
    pub scale: f64,
    /// Radians, image coordinates (y down).
    pub orientation: f64,
    pub response: f32,
    pub descriptor: Vec<f32>,
}

impl Keypoint {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Serialize)]
struct KeypointRecord {
    x: f64,
    y: f64,
    scale: f64,
    orientation: f64,
}

/// Debug dump: `[{x, y, scale, orientation}]`.
pub fn keypoints_json(kps: &[Keypoint]) -> serde_json::Value {
    let recs: Vec<KeypointRecord> = kps
        .iter()
        .map(|k| KeypointRecord {
            x: k.x,
            y: k.y,
            scale: k.scale,
            orientation: k.orientation,
        })
        .collect();
    serde_json::to_value(recs).expect("plain records serialize")
}

/// Single-channel float plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.v[y * self.w + x]
    }

    fn blur(&self, sigma: f64) -> Plane {
        let img = Image::from_vec(self.w, self.h, 1, self.v.clone()).expect("plane is consistent");
        Plane {
            w: self.w,
            h: self.h,
            v: img.gaussian_blur(sigma).into_data(),
        }
    }

    fn half(&self) -> Plane {
        let w = (self.w / 2).max(1);
        let h = (self.h / 2).max(1);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                v.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { w, h, v }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_scale_space(gray: &Image, p: &DetectorParams) -> Vec<Octave> {
    let s = p.scales_per_octave;
    let base = Plane {
        w: gray.width(),
        h: gray.height(),
        v: gray.data().to_vec(),
    }
    .blur((p.sigma * p.sigma - INITIAL_SIGMA * INITIAL_SIGMA).max(0.01).sqrt());

    let k = 2f64.powf(1.0 / s as f64);
    let increments: Vec<f64> = (1..s + 3)
        .map(|i| {
            let prev = p.sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    // Octaves whose smallest side would drop below the border margin are skipped.
    let min_side = gray.width().min(gray.height());
    let max_octaves = {
        let mut n = 0;
        let mut side = min_side;
        while n < p.octaves && side >= 2 * IMG_BORDER + 3 {
            n += 1;
            side /= 2;
        }
        n.max(1)
    };

    let mut octaves = Vec::with_capacity(max_octaves);
    let mut first = base;
    for o in 0..max_octaves {
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(first.clone());
        for inc in &increments {
            let next = gauss.last().expect("nonempty").blur(*inc);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|pair| Plane {
                w: pair[0].w,
                h: pair[0].h,
                v: pair[1].v.iter().zip(&pair[0].v).map(|(a, b)| a - b).collect(),
            })
            .collect();
        if o + 1 < max_octaves {
            first = gauss[s].half();
        }
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

/// Candidate refined in octave coordinates.
struct Extremum {
    octave: usize,
    layer: usize,
    x: usize,
    y: usize,
    sub: Vector3<f64>,
    response: f32,
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize) -> bool {
    let v = dog[layer].at(x, y);
    let w = dog[layer].w;
    let check = |f: &dyn Fn(f32) -> bool| {
        for l in layer - 1..=layer + 1 {
            let plane = &dog[l].v;
            for yy in y - 1..=y + 1 {
                let row = yy * w;
                for xx in x - 1..=x + 1 {
                    if l == layer && yy == y && xx == x {
                        continue;
                    }
                    if !f(plane[row + xx]) {
                        return false;
                    }
                }
            }
        }
        true
    };
    if v > 0.0 {
        check(&|n| v >= n)
    } else {
        check(&|n| v <= n)
    }
}

fn refine_extremum(
    dog: &[Plane],
    octave: usize,
    mut layer: usize,
    mut x: usize,
    mut y: usize,
    p: &DetectorParams,
) -> Option<Extremum> {
    let s = p.scales_per_octave;
    let (w, h) = (dog[0].w, dog[0].h);
    let mut sub = Vector3::zeros();
    let mut grad = Vector3::zeros();
    let mut converged = false;
    for _ in 0..MAX_INTERP_STEPS {
        let d = |l: usize, xx: usize, yy: usize| f64::from(dog[l].at(xx, yy));
        let v2 = 2.0 * d(layer, x, y);
        grad = Vector3::new(
            (d(layer, x + 1, y) - d(layer, x - 1, y)) * 0.5,
            (d(layer, x, y + 1) - d(layer, x, y - 1)) * 0.5,
            (d(layer + 1, x, y) - d(layer - 1, x, y)) * 0.5,
        );
        let dxx = d(layer, x + 1, y) + d(layer, x - 1, y) - v2;
        let dyy = d(layer, x, y + 1) + d(layer, x, y - 1) - v2;
        let dss = d(layer + 1, x, y) + d(layer - 1, x, y) - v2;
        let dxy = (d(layer, x + 1, y + 1) - d(layer, x - 1, y + 1) - d(layer, x + 1, y - 1)
            + d(layer, x - 1, y - 1))
            * 0.25;
        let dxs = (d(layer + 1, x + 1, y) - d(layer + 1, x - 1, y) - d(layer - 1, x + 1, y)
            + d(layer - 1, x - 1, y))
            * 0.25;
        let dys = (d(layer + 1, x, y + 1) - d(layer + 1, x, y - 1) - d(layer - 1, x, y + 1)
            + d(layer - 1, x, y - 1))
            * 0.25;
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        sub = -(hess.try_inverse()? * grad);
        if sub.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if sub.iter().any(|v| v.abs() > 1e6) {
            return None;
        }
        let nx = x as i64 + sub.x.round() as i64;
        let ny = y as i64 + sub.y.round() as i64;
        let nl = layer as i64 + sub.z.round() as i64;
        if nl < 1
            || nl > s as i64
            || nx < IMG_BORDER as i64
            || nx >= (w - IMG_BORDER) as i64
            || ny < IMG_BORDER as i64
            || ny >= (h - IMG_BORDER) as i64
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }
    let contrast = f64::from(dog[layer].at(x, y)) + 0.5 * grad.dot(&sub);
    if contrast.abs() * (s as f64) < p.contrast_threshold {
        return None;
    }
    let d = |xx: usize, yy: usize| f64::from(dog[layer].at(xx, yy));
    let v2 = 2.0 * d(x, y);
    let dxx = d(x + 1, y) + d(x - 1, y) - v2;
    let dyy = d(x, y + 1) + d(x, y - 1) - v2;
    let dxy = (d(x + 1, y + 1) - d(x - 1, y + 1) - d(x + 1, y - 1) + d(x - 1, y - 1)) * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_threshold;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    Some(Extremum {
        octave,
        layer,
        x,
        y,
        sub,
        response: contrast.abs() as f32,
    })
}

#[inline]
fn gradient(plane: &Plane, x: usize, y: usize) -> (f64, f64) {
    let dx = f64::from(plane.at(x + 1, y)) - f64::from(plane.at(x - 1, y));
    let dy = f64::from(plane.at(x, y + 1)) - f64::from(plane.at(x, y - 1));
    (dx, dy)
}

fn orientations(plane: &Plane, x: usize, y: usize, sigma_oct: f64) -> Vec<f64> {
    let radius = (ORI_RADIUS_FACTOR * sigma_oct).round() as i64;
    let wsig = ORI_SIG_FACTOR * sigma_oct;
    let denom = -1.0 / (2.0 * wsig * wsig);
    let mut hist = [0f64; ORI_BINS];
    for dy in -radius..=radius {
        let yy = y as i64 + dy;
        if yy <= 0 || yy >= plane.h as i64 - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = x as i64 + dx;
            if xx <= 0 || xx >= plane.w as i64 - 1 {
                continue;
            }
            let (gx, gy) = gradient(plane, xx as usize, yy as usize);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
            let bin = ((ang / (2.0 * PI)) * ORI_BINS as f64).round() as usize % ORI_BINS;
            hist[bin] += ((dx * dx + dy * dy) as f64 * denom).exp() * mag;
        }
    }
    let mut smooth = [0f64; ORI_BINS];
    for i in 0..ORI_BINS {
        let at = |o: i64| hist[(i as i64 + o).rem_euclid(ORI_BINS as i64) as usize];
        smooth[i] = (at(-2) + at(2)) * (1.0 / 16.0) + (at(-1) + at(1)) * (4.0 / 16.0) + at(0) * (6.0 / 16.0);
    }
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let threshold = max * f64::from(ORI_PEAK_RATIO);
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = smooth[(i + ORI_BINS - 1) % ORI_BINS];
        let r = smooth[(i + 1) % ORI_BINS];
        let c = smooth[i];
        if c > l && c > r && c >= threshold {
            let offset = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = (i as f64 + offset).rem_euclid(ORI_BINS as f64);
            out.push(bin / ORI_BINS as f64 * 2.0 * PI);
        }
    }
    out
}

fn descriptor(plane: &Plane, x: usize, y: usize, sigma_oct: f64, ori: f64) -> Option<Vec<f32>> {
    let d = DESC_WIDTH;
    let n = DESC_BINS;
    let hist_width = DESC_SCALE_FACTOR * sigma_oct;
    let radius = ((hist_width * std::f64::consts::SQRT_2 * (d as f64 + 1.0) * 0.5).round() as i64)
        .min(((plane.w * plane.w + plane.h * plane.h) as f64).sqrt() as i64);
    let (cos_t, sin_t) = (ori.cos() / hist_width, ori.sin() / hist_width);
    let exp_scale = -1.0 / (d as f64 * d as f64 * 0.5);
    let bins_per_rad = n as f64 / (2.0 * PI);
    let mut hist = vec![0f64; (d + 2) * (d + 2) * (n + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (d + 2) + c) * (n + 2) + o;

    for i in -radius..=radius {
        for j in -radius..=radius {
            // Rotate the sample offset into the keypoint frame.
            let c_rot = j as f64 * cos_t + i as f64 * sin_t;
            let r_rot = -(j as f64) * sin_t + i as f64 * cos_t;
            let rbin = r_rot + d as f64 / 2.0 - 0.5;
            let cbin = c_rot + d as f64 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f64 || cbin <= -1.0 || cbin >= d as f64 {
                continue;
            }
            let yy = y as i64 + i;
            let xx = x as i64 + j;
            if yy <= 0 || yy >= plane.h as i64 - 1 || xx <= 0 || xx >= plane.w as i64 - 1 {
                continue;
            }
            let (gx, gy) = gradient(plane, xx as usize, yy as usize);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let weight = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let obin = (gy.atan2(gx) - ori).rem_euclid(2.0 * PI) * bins_per_rad;
            let v = mag * weight;

            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0 = obin.floor();
            let (dr, dc, dob) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 + 1.0) as usize, (c0 + 1.0) as usize);
            let o0 = (o0 as usize) % n;
            for (ri, wr) in [(0, 1.0 - dr), (1, dr)] {
                for (ci, wc) in [(0, 1.0 - dc), (1, dc)] {
                    for (oi, wo) in [(0, 1.0 - dob), (1, dob)] {
                        hist[idx(r0 + ri, c0 + ci, (o0 + oi) % n)] += v * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut desc = Vec::with_capacity(DESCRIPTOR_LEN);
    for r in 0..d {
        for c in 0..d {
            for o in 0..n {
                desc.push(hist[idx(r + 1, c + 1, o)]);
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return None;
    }
    let clip = f64::from(DESC_MAG_THRESHOLD) * norm;
    desc.iter_mut().for_each(|v| *v = v.min(clip));
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return None;
    }
    Some(desc.into_iter().map(|v| (v / norm) as f32).collect())
}

/// Detects keypoints with the default parameters.
pub fn detect_keypoints(img: &Image, exclusion: Option<&HoleMask>) -> Result<Vec<Keypoint>> {
    detect_keypoints_with(img, exclusion, &DetectorParams::default())
}

pub fn detect_keypoints_with(
    img: &Image,
    exclusion: Option<&HoleMask>,
    params: &DetectorParams,
) -> Result<Vec<Keypoint>> {
    if img.width() < MIN_SIDE || img.height() < MIN_SIDE {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: MIN_SIDE,
        });
    }
    if let Some(m) = exclusion {
        m.check_dims(img.dims())?;
    }
    let gray = img.to_gray();
    let octaves = build_scale_space(&gray, params);
    let s = params.scales_per_octave;
    let pre_threshold = 0.5 * params.contrast_threshold / s as f64;

    let extrema: Vec<Extremum> = octaves
        .par_iter()
        .enumerate()
        .flat_map_iter(|(o, oct)| {
            let (w, h) = (oct.dog[0].w, oct.dog[0].h);
            let mut found = Vec::new();
            if w <= 2 * IMG_BORDER || h <= 2 * IMG_BORDER {
                return found.into_iter();
            }
            for layer in 1..=s {
                for y in IMG_BORDER..h - IMG_BORDER {
                    for x in IMG_BORDER..w - IMG_BORDER {
                        let v = oct.dog[layer].at(x, y);
                        if f64::from(v.abs()) <= pre_threshold || !is_extremum(&oct.dog, layer, x, y) {
                            continue;
                        }
                        if let Some(e) = refine_extremum(&oct.dog, o, layer, x, y, params) {
                            found.push(e);
                        }
                    }
                }
            }
            found.into_iter()
        })
        .collect();

    let dist = exclusion.map(|m| m.distance_to_hole());
    let (w, h) = img.dims();
    let mut kps: Vec<Keypoint> = extrema
        .par_iter()
        .flat_map_iter(|e| {
            let scale_factor = 2f64.powi(e.octave as i32);
            let sigma_oct = params.sigma * 2f64.powf((e.layer as f64 + e.sub.z) / s as f64);
            let fx = (e.x as f64 + e.sub.x) * scale_factor;
            let fy = (e.y as f64 + e.sub.y) * scale_factor;
            let scale = sigma_oct * scale_factor;
            let mut out = Vec::new();
            if fx < 0.0 || fy < 0.0 || fx > (w - 1) as f64 || fy > (h - 1) as f64 {
                return out.into_iter();
            }
            if let Some(dist) = &dist {
                let px = (fx.round() as usize).min(w - 1);
                let py = (fy.round() as usize).min(h - 1);
                let reach = params.exclusion_radius.max(params.exclusion_scale_factor * scale);
                if f64::from(dist[py * w + px]) <= reach {
                    return out.into_iter();
                }
            }
            let plane = &octaves[e.octave].gauss[e.layer];
            for ori in orientations(plane, e.x, e.y, sigma_oct) {
                if let Some(desc) = descriptor(plane, e.x, e.y, sigma_oct, ori) {
                    out.push(Keypoint {
                        x: fx,
                        y: fy,
                        scale,
                        orientation: ori,
                        response: e.response,
                        descriptor: desc,
                    });
                }
            }
            out.into_iter()
        })
        .collect();

    kps.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap_or(Ordering::Equal)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.scale.total_cmp(&b.scale))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    kps.truncate(params.max_keypoints);
    Ok(kps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub target: usize,
    pub source: usize,
    pub distance: f32,
}

/// Correspondences between the masked target (`a`) and the source (`b`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub points_t: Vec<Point>,
    pub points_s: Vec<Point>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(p_t, p_s)` tuples in match order.
    pub fn point_pairs(&self) -> Vec<(Point, Point)> {
        self.points_t.iter().copied().zip(self.points_s.iter().copied()).collect()
    }

    pub fn from_points(points_t: Vec<Point>, points_s: Vec<Point>) -> Self {
        assert_eq!(points_t.len(), points_s.len());
        let pairs = (0..points_t.len())
            .map(|i| Match {
                target: i,
                source: i,
                distance: 0.0,
            })
            .collect();
        Self {
            pairs,
            points_t,
            points_s,
        }
    }

    pub fn subset(&self, keep: &[bool]) -> MatchSet {
        let mut out = MatchSet::default();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.pairs.push(self.pairs[i]);
                out.points_t.push(self.points_t[i]);
                out.points_s.push(self.points_s[i]);
            }
        }
        out
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For every query, the nearest and second-nearest reference (index,
/// squared distance). Ties resolve to the lower index.
fn two_nearest(queries: &[Keypoint], refs: &[Keypoint]) -> Vec<(usize, f32, f32)> {
    queries
        .par_iter()
        .map(|q| {
            let mut best = (usize::MAX, f32::INFINITY);
            let mut second = f32::INFINITY;
            for (j, r) in refs.iter().enumerate() {
                let d = sq_dist(&q.descriptor, &r.descriptor);
                if d < best.1 {
                    second = best.1;
                    best = (j, d);
                } else if d < second {
                    second = d;
                }
            }
            (best.0, best.1, second)
        })
        .collect()
}

/// Nearest-neighbour matching with Lowe's ratio test and a mutual check.
///
/// A pair `(i, j)` is kept when `j` is the nearest neighbour of `a[i]`, `i`
/// is the nearest neighbour of `b[j]`, and the ratio `d1 / d2 < ratio` holds
/// in both directions, which makes the result symmetric under swapping the
/// inputs. Lists with fewer than two keypoints produce no matches.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    if a.len() < 2 || b.len() < 2 {
        return Ok(MatchSet::default());
    }
    let r2 = (ratio * ratio) as f32;
    let ab = two_nearest(a, b);
    let ba = two_nearest(b, a);
    let passes = |d1: f32, d2: f32| d1 < r2 * d2;
    let mut out = MatchSet::default();
    for (i, &(j, d1, d2)) in ab.iter().enumerate() {
        if j == usize::MAX || !passes(d1, d2) {
            continue;
        }
        let (back, e1, e2) = ba[j];
        if back != i || !passes(e1, e2) {
            continue;
        }
        out.pairs.push(Match {
            target: i,
            source: j,
            distance: d1.sqrt(),
        });
        out.points_t.push(a[i].point());
        out.points_s.push(b[j].point());
    }
    Ok(out)
}
