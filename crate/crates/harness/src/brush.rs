//! Free-form brush-stroke holes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refill_core::raster::HoleMask;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrushParams {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub min_thickness: f64,
    pub max_thickness: f64,
    /// Longest polyline segment as a fraction of the shorter image side.
    pub max_step_fraction: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub max_attempts: usize,
}

impl Default for BrushParams {
    fn default() -> Self {
        Self {
            min_strokes: 1,
            max_strokes: 4,
            min_vertices: 4,
            max_vertices: 12,
            min_thickness: 12.0,
            max_thickness: 48.0,
            max_step_fraction: 0.15,
            min_fraction: 0.05,
            max_fraction: 0.40,
            max_attempts: 10,
        }
    }
}

impl BrushParams {
    fn validate(&self) -> Result<()> {
        let ok = self.min_strokes <= self.max_strokes
            && self.min_vertices >= 2
            && self.min_vertices <= self.max_vertices
            && self.min_thickness > 0.0
            && self.min_thickness <= self.max_thickness
            && self.max_step_fraction > 0.0
            && self.min_fraction <= self.max_fraction
            && self.max_fraction < 1.0
            && self.max_attempts >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("inconsistent brush parameters {self:?}")))
        }
    }
}

fn stamp_capsule(mask: &mut HoleMask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (w, h) = mask.dims();
    let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + radius).ceil() as usize).min(w - 1);
    let y1 = ((a.1.max(b.1) + radius).ceil() as usize).min(h - 1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (qx, qy) = (px - t * dx, py - t * dy);
            if qx * qx + qy * qy <= radius * radius {
                mask.set(x, y, true);
            }
        }
    }
}

fn draw(dims: (usize, usize), p: &BrushParams, rng: &mut ChaCha8Rng) -> HoleMask {
    let (w, h) = dims;
    let mut mask = HoleMask::empty(w, h);
    let max_step = (p.max_step_fraction * w.min(h) as f64).max(2.0);
    let strokes = rng.random_range(p.min_strokes..=p.max_strokes);
    for _ in 0..strokes {
        let vertices = rng.random_range(p.min_vertices..=p.max_vertices);
        let radius = rng.random_range(p.min_thickness..=p.max_thickness) / 2.0;
        let mut pt = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 1..vertices {
            angle += rng.random_range(-1.2..1.2);
            let step = rng.random_range(max_step / 3.0..=max_step);
            let next = (
                (pt.0 + step * angle.cos()).clamp(0.0, (w - 1) as f64),
                (pt.1 + step * angle.sin()).clamp(0.0, (h - 1) as f64),
            );
            stamp_capsule(&mut mask, pt, next, radius);
            pt = next;
        }
    }
    mask
}

/// Union of random thick polylines. Draws are repeated until the hole
/// fraction lies in `[min_fraction, max_fraction]`; deterministic per seed.
pub fn brush_hole(dims: (usize, usize), params: &BrushParams, seed: u64) -> Result<HoleMask> {
    params.validate()?;
    let (w, h) = dims;
    if w == 0 || h == 0 {
        return Err(Error::InvalidParameter("mask dimensions must be positive".into()));
    }
    if params.max_strokes == 0 {
        return Ok(HoleMask::empty(w, h));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fraction = 0.0;
    for _ in 0..params.max_attempts {
        let mask = draw(dims, params, &mut rng);
        fraction = mask.hole_fraction();
        if (params.min_fraction..=params.max_fraction).contains(&fraction) {
            return Ok(mask);
        }
    }
    Err(Error::HoleGeneration {
        attempts: params.max_attempts,
        fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strokes_is_empty() {
        let p = BrushParams {
            min_strokes: 0,
            max_strokes: 0,
            ..BrushParams::default()
        };
        assert_eq!(brush_hole((64, 48), &p, 1).unwrap().hole_count(), 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let p = BrushParams::default();
        assert_eq!(brush_hole((256, 256), &p, 9).unwrap(), brush_hole((256, 256), &p, 9).unwrap());
        assert_ne!(brush_hole((256, 256), &p, 9).unwrap(), brush_hole((256, 256), &p, 10).unwrap());
    }

    #[test]
    fn impossible_bounds_fail() {
        let p = BrushParams {
            min_fraction: 0.95,
            max_fraction: 0.99,
            ..BrushParams::default()
        };
        assert!(matches!(brush_hole((256, 256), &p, 0), Err(Error::HoleGeneration { .. })));
    }

    #[test]
    fn capsule_covers_segment() {
        let mut m = HoleMask::empty(20, 10);
        stamp_capsule(&mut m, (3.0, 5.0), (16.0, 5.0), 1.0);
        for x in 2..=17 {
            assert!(m.is_hole(x, 5));
        }
        assert!(!m.is_hole(10, 7));
        assert!(!m.is_hole(0, 5));
    }
}
