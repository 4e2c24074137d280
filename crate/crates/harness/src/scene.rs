//! Two-plane parallax scene: a textured background and a textured
//! foreground rectangle that move by different translations between the
//! target and the source view, with a hole straddling the foreground edge.

use refill_core::homography::Homography;
use refill_core::raster::{HoleMask, Image};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::texture::Texture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoPlaneParams {
    pub width: usize,
    pub height: usize,
    /// Foreground rectangle in target coordinates, half-open.
    pub foreground: [usize; 4],
    /// Displacement from target to source position of each plane.
    pub background_shift: (f64, f64),
    pub foreground_shift: (f64, f64),
    /// Hole rectangle in target coordinates, half-open.
    pub hole: [usize; 4],
    pub seed: u64,
}

impl Default for TwoPlaneParams {
    fn default() -> Self {
        Self {
            width: 240,
            height: 180,
            foreground: [40, 40, 150, 150],
            background_shift: (-3.0, 0.0),
            foreground_shift: (-16.0, -2.0),
            hole: [118, 70, 182, 118],
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoPlaneScene {
    pub target: Image,
    pub source: Image,
    pub mask: HoleMask,
    pub gt: Image,
    /// Source-to-target mapping of each plane.
    pub h_background: Homography,
    pub h_foreground: Homography,
}

fn inside(r: [usize; 4], x: f64, y: f64) -> bool {
    x >= r[0] as f64 && x < r[2] as f64 && y >= r[1] as f64 && y < r[3] as f64
}

pub fn two_plane_scene(p: &TwoPlaneParams) -> Result<TwoPlaneScene> {
    let (w, h) = (p.width, p.height);
    let valid_rect = |r: [usize; 4]| r[0] < r[2] && r[1] < r[3] && r[2] <= w && r[3] <= h;
    if w < 32 || h < 32 || !valid_rect(p.foreground) || !valid_rect(p.hole) {
        return Err(Error::InvalidParameter(format!("inconsistent two-plane scene {p:?}")));
    }
    let background = Texture::new(p.seed, w as f64, h as f64);
    let foreground = Texture::new(p.seed.wrapping_add(1000), w as f64, h as f64);
    let render = |bs: (f64, f64), fs: (f64, f64)| {
        let mut img = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let px = if inside(p.foreground, xf - fs.0, yf - fs.1) {
                    foreground.eval(xf - fs.0, yf - fs.1)
                } else {
                    background.eval(xf - bs.0, yf - bs.1)
                };
                img.pixel_mut(x, y).copy_from_slice(&px);
            }
        }
        img
    };
    let gt = render((0.0, 0.0), (0.0, 0.0));
    let source = render(p.background_shift, p.foreground_shift);
    let mask = HoleMask::rect(w, h, p.hole[0], p.hole[1], p.hole[2], p.hole[3]);
    let (bs, fs) = (p.background_shift, p.foreground_shift);
    Ok(TwoPlaneScene {
        target: gt.clone(),
        source,
        mask,
        gt,
        h_background: Homography::translation(-bs.0, -bs.1),
        h_foreground: Homography::translation(-fs.0, -fs.1),
    })
}
