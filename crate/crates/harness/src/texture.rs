//! Procedural color textures defined over the continuous plane, so that any
//! warp of a scene can be rendered exactly instead of resampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refill_core::raster::Image;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Signed distance, negative inside.
    fn distance(&self, u: f64, v: f64) -> f64 {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => {
                let dx = (x0 - u).max(u - x1);
                let dy = (y0 - v).max(v - y1);
                if dx > 0.0 || dy > 0.0 {
                    dx.max(0.0).hypot(dy.max(0.0))
                } else {
                    dx.max(dy)
                }
            }
            Shape::Disk { cx, cy, r } => (u - cx).hypot(v - cy) - r,
        }
    }
}

/// Multi-octave value noise overlaid with anti-aliased rectangles and disks.
#[derive(Debug, Clone)]
pub struct Texture {
    seed: u64,
    octaves: Vec<(f64, f64)>,
    shapes: Vec<(Shape, [f64; 3])>,
}

fn hash(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    /// Texture whose shapes populate `[0, w] x [0, h]` plus a margin.
    pub fn new(seed: u64, w: f64, h: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let octaves = vec![(48.0, 0.35), (16.0, 0.25), (6.0, 0.12)];
        let margin = 24.0;
        let area = (w + 2.0 * margin) * (h + 2.0 * margin);
        let n = (area / 500.0).ceil() as usize;
        let shapes = (0..n)
            .map(|_| {
                let cx = rng.random_range(-margin..w + margin);
                let cy = rng.random_range(-margin..h + margin);
                let size = rng.random_range(3.0..14.0);
                let shape = if rng.random_bool(0.6) {
                    let aspect = rng.random_range(0.4..2.5);
                    Shape::Rect {
                        x0: cx - size,
                        y0: cy - size * aspect,
                        x1: cx + size,
                        y1: cy + size * aspect,
                    }
                } else {
                    Shape::Disk { cx, cy, r: size }
                };
                let color = [
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                ];
                (shape, color)
            })
            .collect();
        Self { seed, octaves, shapes }
    }

    fn noise(&self, u: f64, v: f64, cell: f64, octave: u64, c: u64) -> f64 {
        let (gu, gv) = (u / cell, v / cell);
        let (iu, iv) = (gu.floor(), gv.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fu, fv) = (smooth(gu - iu), smooth(gv - iv));
        let (iu, iv) = (iu as i64, iv as i64);
        let key = octave * 4 + c;
        let n00 = hash(self.seed, iu, iv, key);
        let n10 = hash(self.seed, iu + 1, iv, key);
        let n01 = hash(self.seed, iu, iv + 1, key);
        let n11 = hash(self.seed, iu + 1, iv + 1, key);
        let top = n00 + (n10 - n00) * fu;
        let bottom = n01 + (n11 - n01) * fu;
        top + (bottom - top) * fv
    }

    pub fn eval(&self, u: f64, v: f64) -> [f32; 3] {
        let mut px = [0.0f64; 3];
        for (c, p) in px.iter_mut().enumerate() {
            *p = 0.5;
            for (o, &(cell, amp)) in self.octaves.iter().enumerate() {
                *p += amp * (self.noise(u, v, cell, o as u64, c as u64) - 0.5) * 2.0;
            }
        }
        for (shape, color) in &self.shapes {
            let cover = (0.5 - shape.distance(u, v)).clamp(0.0, 1.0);
            if cover > 0.0 {
                for c in 0..3 {
                    px[c] += cover * (color[c] - px[c]);
                }
            }
        }
        px.map(|p| p.clamp(0.0, 1.0) as f32)
    }

    /// Samples the texture at the pixel centers of a `w x h` raster.
    pub fn render(&self, w: usize, h: usize) -> Image {
        self.render_mapped(w, h, |x, y| (x, y))
    }

    /// Renders `texture(map(x, y))` for every pixel center.
    pub fn render_mapped(&self, w: usize, h: usize, map: impl Fn(f64, f64) -> (f64, f64) + Sync) -> Image {
        let mut img = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = map(x as f64, y as f64);
                img.pixel_mut(x, y).copy_from_slice(&self.eval(u, v));
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = Texture::new(3, 64.0, 48.0).render(64, 48);
        let b = Texture::new(3, 64.0, 48.0).render(64, 48);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, Texture::new(4, 64.0, 48.0).render(64, 48));
    }

    #[test]
    fn has_contrast() {
        let img = Texture::new(1, 96.0, 96.0).render(96, 96);
        let g = img.to_gray();
        let mean = g.data().iter().map(|&v| v as f64).sum::<f64>() / g.data().len() as f64;
        let var = g.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / g.data().len() as f64;
        assert!(var.sqrt() > 0.08);
    }
}
