//! Synthetic misaligned source images: a random four-corner homography
//! and/or a per-channel affine color change applied to a ground truth.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refill_core::homography::{fit_dlt, Homography};
use refill_core::raster::{Image, Point};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four perturbation regimes: color (C) and spatial (S) on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "CS")]
    ColorSpatial,
    #[serde(rename = "CSbar")]
    ColorOnly,
    #[serde(rename = "CbarS")]
    SpatialOnly,
    #[serde(rename = "CbarSbar")]
    Neither,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::ColorSpatial, Regime::ColorOnly, Regime::SpatialOnly, Regime::Neither];

    pub fn from_flags(color: bool, spatial: bool) -> Self {
        match (color, spatial) {
            (true, true) => Regime::ColorSpatial,
            (true, false) => Regime::ColorOnly,
            (false, true) => Regime::SpatialOnly,
            (false, false) => Regime::Neither,
        }
    }

    pub fn color(self) -> bool {
        matches!(self, Regime::ColorSpatial | Regime::ColorOnly)
    }

    pub fn spatial(self) -> bool {
        matches!(self, Regime::ColorSpatial | Regime::SpatialOnly)
    }

    /// Uniform draw over the four regimes.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::ALL[rng.random_range(0..4)]
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::ColorSpatial => "CS",
            Regime::ColorOnly => "CSbar",
            Regime::SpatialOnly => "CbarS",
            Regime::Neither => "CbarSbar",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" => Ok(Regime::ColorSpatial),
            "csbar" | "c" => Ok(Regime::ColorOnly),
            "cbars" | "s" => Ok(Regime::SpatialOnly),
            "cbarsbar" | "none" => Ok(Regime::Neither),
            _ => Err(Error::InvalidParameter(format!(
                "unknown regime {s:?} (expected CS, CSbar, CbarS or CbarSbar)"
            ))),
        }
    }
}

/// Perturbation settings for one synthetic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRegime {
    pub color_perturb: bool,
    pub spatial_perturb: bool,
    /// Bound on each corner's displacement along each axis.
    pub max_corner_px: f64,
    pub gain_range: (f64, f64),
    pub offset_range: (f64, f64),
    /// Amplitude of a smooth non-projective displacement added in spatial
    /// regimes; zero keeps the warp a pure homography.
    pub local_warp_px: f64,
    pub seed: u64,
}

impl Default for SynthRegime {
    fn default() -> Self {
        Self {
            color_perturb: true,
            spatial_perturb: true,
            max_corner_px: 12.0,
            gain_range: (0.8, 1.2),
            offset_range: (-0.08, 0.08),
            local_warp_px: 0.0,
            seed: 0,
        }
    }
}

impl SynthRegime {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            color_perturb: regime.color(),
            spatial_perturb: regime.spatial(),
            seed,
            ..Self::default()
        }
    }

    pub fn regime(&self) -> Regime {
        Regime::from_flags(self.color_perturb, self.spatial_perturb)
    }
}

/// Smooth displacement `d(p)` with one sinusoidal period across the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalWarp {
    pub amplitude: f64,
    pub phases: [f64; 4],
    pub period: (f64, f64),
}

impl LocalWarp {
    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        let (u, v) = (tau * x / self.period.0, tau * y / self.period.1);
        let p = self.phases;
        (
            self.amplitude * (u + p[0]).sin() * (v + p[1]).cos(),
            self.amplitude * (u + p[2]).cos() * (v + p[3]).sin(),
        )
    }
}

/// Exact parameters used to build a source image.
///
/// `source(p) = clamp(gain * gt(H(p + d(p))) + offset)` per channel, where
/// `H` maps source pixel coordinates to ground-truth coordinates and `d` is
/// the optional local warp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub regime: Regime,
    pub homography: Homography,
    pub corner_offsets: [[f64; 2]; 4],
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub local_warp: Option<LocalWarp>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Builds `(target, source, truth)` from a ground-truth image. The target
/// is the ground truth itself.
pub fn synth_pair(gt: &Image, regime: &SynthRegime) -> Result<(Image, Image, SynthTruth)> {
    let gt = gt.to_rgb();
    let (w, h) = gt.dims();
    let m = regime.max_corner_px.max(0.0);
    if regime.spatial_perturb && ((w as f64) < 4.0 * m + 16.0 || (h as f64) < 4.0 * m + 16.0) {
        return Err(Error::InvalidParameter(format!(
            "{w}x{h} is too small for a {m} px corner displacement"
        )));
    }
    if regime.gain_range.0 <= 0.0 || regime.gain_range.1 < regime.gain_range.0 {
        return Err(Error::InvalidParameter("gain range must be positive and ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(regime.seed);

    let corners = [
        Point::new(0.0, 0.0),
        Point::new((w - 1) as f64, 0.0),
        Point::new((w - 1) as f64, (h - 1) as f64),
        Point::new(0.0, (h - 1) as f64),
    ];
    let mut corner_offsets = [[0.0; 2]; 4];
    let mut local_warp = None;
    let homography = if regime.spatial_perturb && m > 0.0 {
        for off in corner_offsets.iter_mut() {
            *off = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
        }
        let pairs: Vec<(Point, Point)> = corners
            .iter()
            .zip(&corner_offsets)
            .map(|(c, o)| (Point::new(c.x + o[0], c.y + o[1]), *c))
            .collect();
        fit_dlt(&pairs)?
    } else {
        Homography::identity()
    };
    if regime.spatial_perturb && regime.local_warp_px > 0.0 {
        let tau = std::f64::consts::TAU;
        local_warp = Some(LocalWarp {
            amplitude: regime.local_warp_px,
            phases: [
                rng.random_range(0.0..tau),
                rng.random_range(0.0..tau),
                rng.random_range(0.0..tau),
                rng.random_range(0.0..tau),
            ],
            period: (w as f64, h as f64),
        });
    }
    let (mut gain, mut offset) = ([1.0; 3], [0.0; 3]);
    if regime.color_perturb {
        for c in 0..3 {
            gain[c] = uniform(&mut rng, regime.gain_range);
            offset[c] = uniform(&mut rng, regime.offset_range);
        }
    }

    let source = if !regime.spatial_perturb && !regime.color_perturb {
        gt.clone()
    } else {
        let mut src = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let (mut px, mut py) = (x as f64, y as f64);
                if let Some(lw) = &local_warp {
                    let (dx, dy) = lw.displacement(px, py);
                    px += dx;
                    py += dy;
                }
                let q = homography.apply(Point::new(px, py)).unwrap_or(Point::new(px, py));
                for c in 0..3 {
                    let v = if regime.spatial_perturb {
                        gt.sample_clamped(q.x, q.y, c) as f64
                    } else {
                        gt.get(x, y, c) as f64
                    };
                    src.set(x, y, c, (gain[c] * v + offset[c]).clamp(0.0, 1.0) as f32);
                }
            }
        }
        src
    };
    let truth = SynthTruth {
        regime: regime.regime(),
        homography,
        corner_offsets,
        gain,
        offset,
        local_warp,
    };
    Ok((gt, source, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::Texture;

    fn gt() -> Image {
        Texture::new(5, 96.0, 80.0).render(96, 80)
    }

    #[test]
    fn neither_regime_copies_target() {
        let g = gt();
        let (t, s, truth) = synth_pair(&g, &SynthRegime::new(Regime::Neither, 1)).unwrap();
        assert_eq!(t, g);
        assert_eq!(s, g);
        assert_eq!(truth.homography, Homography::identity());
    }

    #[test]
    fn zero_displacement_records_identity() {
        let regime = SynthRegime {
            max_corner_px: 0.0,
            ..SynthRegime::new(Regime::SpatialOnly, 2)
        };
        let (_, s, truth) = synth_pair(&gt(), &regime).unwrap();
        assert_eq!(truth.homography, Homography::identity());
        assert_eq!(s, gt());
    }

    #[test]
    fn fixed_color_transform_is_exact() {
        let g = gt();
        let regime = SynthRegime {
            gain_range: (0.8, 0.8),
            offset_range: (0.05, 0.05),
            ..SynthRegime::new(Regime::ColorOnly, 3)
        };
        let (_, s, truth) = synth_pair(&g, &regime).unwrap();
        assert_eq!(truth.gain, [0.8; 3]);
        assert_eq!(truth.offset, [0.05; 3]);
        for (a, b) in g.data().iter().zip(s.data()) {
            let expect = (0.8 * *a as f64 + 0.05).clamp(0.0, 1.0) as f32;
            assert_eq!(*b, expect);
        }
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
            assert_eq!(Regime::from_flags(r.color(), r.spatial()), r);
        }
        assert!("XY".parse::<Regime>().is_err());
    }

    #[test]
    fn too_small_for_displacement() {
        let tiny = Image::filled(30, 30, 3, 0.5);
        assert!(synth_pair(&tiny, &SynthRegime::new(Regime::SpatialOnly, 0)).is_err());
    }
}
