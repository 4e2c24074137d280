//! Planar homographies: normalized DLT fitting and RANSAC.
//!
//! Every homography here maps **source** pixel coordinates to **target**
//! pixel coordinates: `p_t ~ H p_s`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Point;

const MIN_ABS_DET: f64 = 1e-12;

/// 3x3 projective transform, scaled so `H[2][2] = 1` when that entry is
/// nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    /// Wraps a matrix after normalizing it; fails when it is singular or
    /// non-finite.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoHomography("non-finite matrix".into()));
        }
        let mut m = m;
        let s = m[(2, 2)];
        if s.abs() > f64::EPSILON {
            m /= s;
        } else {
            let n = m.norm();
            if n == 0.0 {
                return Err(Error::NoHomography("zero matrix".into()));
            }
            m /= n;
        }
        if m.determinant().abs() <= MIN_ABS_DET {
            return Err(Error::NoHomography("singular matrix".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&rows.concat()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("homography invariant: invertible");
        Self::from_matrix(inv).expect("inverse of an invertible homography")
    }

    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.0 * other.0)
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.0;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(Point::new(
            (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
            (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
        ))
    }

    /// Unit-Frobenius representative with a positive bottom-right entry
    /// (or first nonzero entry), for comparing homographies.
    pub fn normalized_frobenius(&self) -> Matrix3<f64> {
        let mut m = self.0 / self.0.norm();
        let pivot = if m[(2, 2)].abs() > 1e-12 {
            m[(2, 2)]
        } else {
            *m.iter().find(|v| v.abs() > 1e-12).unwrap_or(&1.0)
        };
        if pivot < 0.0 {
            m = -m;
        }
        m
    }

    /// Symmetric transfer error of one correspondence: the larger of the
    /// forward (`H p_s` vs `p_t`) and backward (`H^-1 p_t` vs `p_s`) distances.
    pub fn symmetric_error(&self, inverse: &Homography, pt: Point, ps: Point) -> f64 {
        let fwd = self.apply(ps).map_or(f64::INFINITY, |q| q.distance(pt));
        let bwd = inverse.apply(pt).map_or(f64::INFINITY, |q| q.distance(ps));
        fwd.max(bwd)
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Hartley normalization: centroid to the origin, RMS distance `sqrt(2)`.
fn normalizing_transform(points: &[Point]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let ms = points
        .iter()
        .map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2))
        .sum::<f64>()
        / n;
    if ms <= 1e-24 {
        return None;
    }
    let s = (2.0 / ms).sqrt();
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    Point::new(v.x / v.z, v.y / v.z)
}

/// Normalized direct linear transform over `n >= 4` correspondences
/// `(p_t, p_s)`.
pub fn fit_dlt(pairs: &[(Point, Point)]) -> Result<Homography> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::NoHomography(format!("need 4 correspondences, got {n}")));
    }
    let targets: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let sources: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let tt = normalizing_transform(&targets)
        .ok_or_else(|| Error::NoHomography("coincident target points".into()))?;
    let ts = normalizing_transform(&sources)
        .ok_or_else(|| Error::NoHomography("coincident source points".into()))?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pt, ps)) in pairs.iter().enumerate() {
        let s = transform(&ts, *ps);
        let t = transform(&tt, *pt);
        let (x, y, u, v) = (s.x, s.y, t.x, t.y);
        let r0 = 2 * i;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NoHomography("svd did not converge".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tt_inv = tt
        .try_inverse()
        .ok_or_else(|| Error::NoHomography("normalization not invertible".into()))?;
    Homography::from_matrix(tt_inv * hn * ts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 2000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacFit {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = a.distance(b).max(a.distance(c)).max(b.distance(c)).max(1e-12);
    area.abs() <= 1e-6 * scale * scale
}

fn degenerate_sample(pts: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| collinear(pts[t[0]], pts[t[1]], pts[t[2]]))
}

fn score(h: &Homography, pairs: &[(Point, Point)], threshold: f64) -> (Vec<bool>, usize, f64) {
    let inv = h.inverse();
    let mut flags = Vec::with_capacity(pairs.len());
    let mut count = 0;
    let mut cost = 0.0;
    for &(pt, ps) in pairs {
        let e = h.symmetric_error(&inv, pt, ps);
        let inlier = e < threshold;
        if inlier {
            count += 1;
            cost += e;
        }
        flags.push(inlier);
    }
    (flags, count, cost)
}

/// Robust homography from `(p_t, p_s)` pairs.
///
/// Minimal 4-point samples whose points contain a collinear triple (in either
/// image) are redrawn. The best hypothesis is refit on all of its inliers with
/// the normalized DLT, repeating while the inlier set grows. The iteration
/// budget shrinks adaptively to reach `confidence`.
pub fn ransac_homography(pairs: &[(Point, Point)], params: &RansacParams) -> Result<RansacFit> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::NoHomography(format!("need 4 correspondences, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<bool>, usize, f64)> = None;
    let mut budget = params.max_iters.max(1);
    let mut iter = 0;
    let mut degenerate_draws = 0usize;
    while iter < budget {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let t = [pairs[idx.index(0)].0, pairs[idx.index(1)].0, pairs[idx.index(2)].0, pairs[idx.index(3)].0];
        let s = [pairs[idx.index(0)].1, pairs[idx.index(1)].1, pairs[idx.index(2)].1, pairs[idx.index(3)].1];
        if degenerate_sample(&t) || degenerate_sample(&s) {
            degenerate_draws += 1;
            continue;
        }
        let sample_pairs: Vec<(Point, Point)> = (0..4).map(|k| (t[k], s[k])).collect();
        let Ok(h) = fit_dlt(&sample_pairs) else {
            continue;
        };
        let (flags, count, cost) = score(&h, pairs, params.threshold_px);
        let better = match &best {
            None => count > 0,
            Some((_, _, bc, bcost)) => count > *bc || (count == *bc && cost < *bcost),
        };
        if better {
            best = Some((h, flags, count, cost));
            let w = count as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            if denom < 0.0 {
                let needed = ((1.0 - params.confidence).ln() / denom).ceil();
                if needed.is_finite() && needed >= 0.0 {
                    budget = budget.min((needed as usize).max(iter));
                }
            } else {
                budget = iter;
            }
        }
    }
    let Some((mut h, mut flags, mut count, _)) = best else {
        let reason = if degenerate_draws == iter {
            "all sampled configurations were collinear"
        } else {
            "no hypothesis produced inliers"
        };
        return Err(Error::NoHomography(reason.into()));
    };

    for _ in 0..5 {
        let inlier_pairs: Vec<(Point, Point)> = pairs
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f)
            .map(|(p, _)| *p)
            .collect();
        if inlier_pairs.len() < 4 {
            break;
        }
        let Ok(refit) = fit_dlt(&inlier_pairs) else {
            break;
        };
        let (rflags, rcount, _) = score(&refit, pairs, params.threshold_px);
        if rcount < count {
            break;
        }
        let grew = rcount > count;
        h = refit;
        flags = rflags;
        count = rcount;
        if !grew {
            break;
        }
    }
    Ok(RansacFit {
        homography: h,
        inliers: flags,
        iterations: iter,
    })
}
