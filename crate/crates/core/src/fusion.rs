//! Per-proposal confidence and the softmax fusion of proposals with the
//! single-image fill.
//!
//! A proposal's trustworthiness inside the hole is estimated from how well
//! it agrees with the target on a band of known pixels around the hole. The
//! band residual is propagated into the hole by harmonic extension and
//! turned into a confidence `c = valid * exp(-e / sigma)`. Confidences of
//! all enabled proposals and a constant fallback score compete in a
//! per-pixel softmax, giving weights that sum to one.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fill::{patchmatch_fill, FillParams};
use crate::raster::{composite, masked_target, HoleMask, Image, ValidMask};
use crate::solver::{Boundary, LaplaceSystem, SOLVE_TOL};

/// Residual of a proposal against the target on the known band around the
/// hole.
#[derive(Debug, Clone, PartialEq)]
pub struct BandResidual {
    pub width: usize,
    pub height: usize,
    /// Mean-channel absolute difference; `NaN` outside the band.
    pub values: Vec<f64>,
    pub band: Vec<bool>,
}

impl BandResidual {
    pub fn is_empty(&self) -> bool {
        !self.band.iter().any(|&b| b)
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Known pixels with valid coverage ≥ 0.5 within `band_px` of the hole.
pub fn band_region(mask: &HoleMask, valid: &ValidMask, band_px: f64) -> Vec<bool> {
    let dist = mask.distance_to_hole();
    (0..dist.len())
        .map(|i| !mask.is_hole_idx(i) && valid.data()[i] >= 0.5 && f64::from(dist[i]) <= band_px)
        .collect()
}

pub fn boundary_residual(
    refined: &Image,
    masked: &Image,
    mask: &HoleMask,
    valid: &ValidMask,
    band_px: f64,
) -> Result<BandResidual> {
    same_dims(masked.dims(), refined.dims())?;
    same_dims(masked.dims(), valid.dims())?;
    mask.check_dims(masked.dims())?;
    if refined.channels() != masked.channels() {
        return Err(Error::InvalidImage("channel counts differ".into()));
    }
    let (w, h) = masked.dims();
    let ch = masked.channels();
    let band = band_region(mask, valid, band_px);
    let values = (0..w * h)
        .map(|i| {
            if !band[i] {
                return f64::NAN;
            }
            let s: f64 = (0..ch)
                .map(|c| f64::from((refined.data()[i * ch + c] - masked.data()[i * ch + c]).abs()))
                .sum();
            s / ch as f64
        })
        .collect();
    Ok(BandResidual {
        width: w,
        height: h,
        values,
        band,
    })
}

/// Extends band values into the hole by solving Laplace's equation.
///
/// Every known pixel touching the hole carries the mean of the band values
/// within `band_px` of it as Dirichlet data; ring pixels with no band value
/// nearby are reflecting. Hole components that see no data get `+inf`.
/// Band pixels keep their own values, everything else is `NaN`.
pub fn harmonic_extend(band: &BandResidual, mask: &HoleMask, band_px: f64) -> Result<Vec<f64>> {
    mask.check_dims((band.width, band.height))?;
    let (w, h) = (band.width, band.height);
    let mut out = band.values.clone();
    let unknown: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    if band.is_empty() {
        for (i, &u) in unknown.iter().enumerate() {
            if u {
                out[i] = f64::INFINITY;
            }
        }
        return Ok(out);
    }
    let r = band_px.max(0.0).floor() as i64;
    let r2 = band_px * band_px;
    let ring_value = |q: usize| -> Boundary {
        let (qx, qy) = ((q % w) as i64, (q / w) as i64);
        let mut sum = 0.0;
        let mut n = 0usize;
        for dy in -r..=r {
            let y = qy + dy;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for dx in -r..=r {
                let x = qx + dx;
                if x < 0 || x >= w as i64 || ((dx * dx + dy * dy) as f64) > r2 {
                    continue;
                }
                let i = (y as usize) * w + x as usize;
                if band.band[i] {
                    sum += band.values[i];
                    n += 1;
                }
            }
        }
        if n == 0 {
            Boundary::Free
        } else {
            Boundary::Fixed(sum / n as f64)
        }
    };
    let sys = LaplaceSystem::new(w, h, &unknown, ring_value);
    let sol = sys.solve(None, None, SOLVE_TOL);
    for (i, &u) in unknown.iter().enumerate() {
        if u {
            out[i] = if sol.solved[i] { sol.values[i].max(0.0) } else { f64::INFINITY };
        }
    }
    Ok(out)
}

/// `valid * exp(-e / sigma)`; undefined or infinite residuals and pixels
/// with valid coverage below one half map to zero.
pub fn confidence_map(e: &[f64], valid: &ValidMask, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    if e.len() != valid.data().len() {
        return Err(Error::InvalidParameter("residual and valid mask sizes differ".into()));
    }
    let data = e
        .iter()
        .zip(valid.data())
        .map(|(&ei, &v)| {
            if !ei.is_finite() || v < 0.5 {
                0.0
            } else {
                (f64::from(v) * (-ei / sigma).exp()) as f32
            }
        })
        .collect();
    Image::from_vec(valid.width(), valid.height(), 1, data)
}

fn check_merge_inputs(images: &[&Image], mask: &HoleMask) -> Result<()> {
    let first = images[0];
    mask.check_dims(first.dims())?;
    for img in &images[1..] {
        same_dims(first.dims(), img.dims())?;
        if img.channels() != first.channels() {
            return Err(Error::InvalidImage("channel counts differ".into()));
        }
    }
    Ok(())
}

/// Blends one refined proposal with the fill by its confidence and returns
/// the merged image together with its composite preview.
pub fn spf_merge(
    refined: &Image,
    fill: &Image,
    confidence: &Image,
    mask: &HoleMask,
    masked: &Image,
) -> Result<(Image, Image)> {
    check_merge_inputs(&[refined, fill, masked], mask)?;
    same_dims(refined.dims(), confidence.dims())?;
    let ch = refined.channels();
    let mut out = fill.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(ch).enumerate() {
        let c = f64::from(confidence.data()[i]);
        if c == 0.0 {
            continue;
        }
        for (k, v) in px.iter_mut().enumerate() {
            let r = f64::from(refined.data()[i * ch + k]);
            *v = if c == 1.0 { r as f32 } else { (c * r + (1.0 - c) * f64::from(*v)) as f32 };
        }
    }
    let preview = composite(masked, &out, mask)?;
    Ok((out, preview))
}

/// Per-pixel fusion weights in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub width: usize,
    pub height: usize,
    pub proposals: Vec<Vec<f64>>,
    pub fallback: Vec<f64>,
}

impl FusionWeights {
    pub fn proposal_image(&self, k: usize) -> Image {
        to_gray_image(self.width, self.height, &self.proposals[k])
    }

    pub fn fallback_image(&self) -> Image {
        to_gray_image(self.width, self.height, &self.fallback)
    }

    /// Largest deviation of the per-pixel weight sum from one.
    pub fn partition_error(&self) -> f64 {
        (0..self.fallback.len())
            .map(|i| {
                let s: f64 = self.fallback[i] + self.proposals.iter().map(|p| p[i]).sum::<f64>();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn to_gray_image(w: usize, h: usize, v: &[f64]) -> Image {
    Image::from_vec(w, h, 1, v.iter().map(|&x| x as f32).collect()).expect("sized from weights")
}

/// Softmax over enabled proposals with positive confidence and a fallback
/// score `gamma`, all divided by `tau`. Disabled or zero-confidence
/// proposals receive exactly zero weight; when every proposal is excluded
/// the fallback weight is exactly one.
pub fn mpf_weights(confidences: &[&Image], toggles: &[bool], tau: f64, gamma: f64) -> Result<FusionWeights> {
    if confidences.is_empty() {
        return Err(Error::InvalidParameter("at least one proposal is required".into()));
    }
    if !(tau > 0.0) || !(gamma > 0.0) {
        return Err(Error::InvalidParameter("tau and gamma must be positive".into()));
    }
    if toggles.len() != confidences.len() {
        return Err(Error::InvalidParameter(format!(
            "{} toggles for {} proposals",
            toggles.len(),
            confidences.len()
        )));
    }
    let (w, h) = confidences[0].dims();
    for c in confidences {
        same_dims((w, h), c.dims())?;
    }
    let n = w * h;
    let k = confidences.len();
    let mut proposals = vec![vec![0.0f64; n]; k];
    let mut fallback = vec![0.0f64; n];
    let mut scores = vec![0.0f64; k];
    for i in 0..n {
        let fb = gamma / tau;
        let mut m = fb;
        for j in 0..k {
            let c = f64::from(confidences[j].data()[i]);
            scores[j] = if toggles[j] && c > 0.0 { c / tau } else { f64::NEG_INFINITY };
            m = m.max(scores[j]);
        }
        let mut total = (fb - m).exp();
        for s in &mut scores {
            if s.is_finite() {
                *s = (*s - m).exp();
                total += *s;
            }
        }
        let fb_w = (fb - m).exp() / total;
        if scores.iter().all(|s| !s.is_finite()) {
            fallback[i] = 1.0;
            continue;
        }
        fallback[i] = fb_w;
        for j in 0..k {
            if scores[j].is_finite() {
                proposals[j][i] = scores[j] / total;
            }
        }
    }
    Ok(FusionWeights {
        width: w,
        height: h,
        proposals,
        fallback,
    })
}

/// `I_m = c_g * I_g + sum_i c_i * I_i` and its composite with the masked
/// target. Proposals with zero weight at a pixel are skipped, so a disabled
/// proposal has no influence at all on the output.
pub fn mpf_merge(
    weights: &FusionWeights,
    refined: &[&Image],
    fill: &Image,
    masked: &Image,
    mask: &HoleMask,
) -> Result<(Image, Image)> {
    if refined.len() != weights.proposals.len() {
        return Err(Error::InvalidParameter("one refined image per weight map is required".into()));
    }
    let mut all = vec![fill, masked];
    all.extend_from_slice(refined);
    check_merge_inputs(&all, mask)?;
    same_dims(fill.dims(), (weights.width, weights.height))?;
    let ch = fill.channels();
    let mut merged = fill.clone();
    for (i, px) in merged.data_mut().chunks_exact_mut(ch).enumerate() {
        let cg = weights.fallback[i];
        if cg == 1.0 {
            continue;
        }
        for (c, v) in px.iter_mut().enumerate() {
            let mut acc = if cg == 0.0 { 0.0 } else { cg * f64::from(fill.data()[i * ch + c]) };
            for (j, img) in refined.iter().enumerate() {
                let wj = weights.proposals[j][i];
                if wj != 0.0 {
                    acc += wj * f64::from(img.data()[i * ch + c]);
                }
            }
            *v = acc as f32;
        }
    }
    let out = composite(masked, &merged, mask)?;
    Ok((merged, out))
}

/// Re-fills the part of the hole where the fallback weight exceeds
/// `threshold`, using the rest of the composite as known context.
pub fn posthoc_refill(
    composite_img: &Image,
    fallback: &Image,
    mask: &HoleMask,
    threshold: f64,
    params: &FillParams,
) -> Result<Image> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter("threshold must lie in (0, 1)".into()));
    }
    mask.check_dims(composite_img.dims())?;
    same_dims(composite_img.dims(), fallback.dims())?;
    let (w, h) = mask.dims();
    let sub = HoleMask::from_fn(w, h, |x, y| mask.is_hole(x, y) && f64::from(fallback.get(x, y, 0)) > threshold);
    if sub.hole_count() == 0 {
        return Ok(composite_img.clone());
    }
    let context = masked_target(composite_img, &sub)?;
    patchmatch_fill(&context, &sub, params)
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightSummary {
    pub index: usize,
    /// Mean weight over hole pixels.
    pub mean_weight: f64,
    /// Fraction of hole pixels where this proposal has the largest weight.
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightsReport {
    pub proposals: Vec<WeightSummary>,
    pub fallback_mean_weight: f64,
    pub fallback_coverage: f64,
}

/// Mean weight and winning share per proposal over the hole.
pub fn weights_summary(weights: &FusionWeights, indices: &[usize], mask: &HoleMask) -> WeightsReport {
    let hole: Vec<usize> = (0..weights.fallback.len()).filter(|&i| mask.is_hole_idx(i)).collect();
    let n = hole.len().max(1) as f64;
    let k = weights.proposals.len();
    let mut wins = vec![0usize; k + 1];
    for &i in &hole {
        let mut best = (weights.fallback[i], k);
        for j in 0..k {
            if weights.proposals[j][i] > best.0 {
                best = (weights.proposals[j][i], j);
            }
        }
        wins[best.1] += 1;
    }
    let mean = |v: &[f64]| hole.iter().map(|&i| v[i]).sum::<f64>() / n;
    WeightsReport {
        proposals: (0..k)
            .map(|j| WeightSummary {
                index: indices.get(j).copied().unwrap_or(j + 1),
                mean_weight: mean(&weights.proposals[j]),
                coverage: wins[j] as f64 / n,
            })
            .collect(),
        fallback_mean_weight: mean(&weights.fallback),
        fallback_coverage: wins[k] as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, v: f32) -> Image {
        Image::filled(w, h, 1, v)
    }

    #[test]
    fn residual_on_band() {
        let tgt = Image::from_fn(24, 24, 3, |x, y, c| ((x + y + c) % 5) as f32 / 5.0);
        let mask = HoleMask::rect(24, 24, 8, 8, 16, 16);
        let masked = masked_target(&tgt, &mask).unwrap();
        let valid = ValidMask::ones(24, 24);
        let r = boundary_residual(&tgt, &masked, &mask, &valid, 8.0).unwrap();
        assert!(!r.is_empty());
        for i in 0..576 {
            if r.band[i] {
                assert_eq!(r.values[i], 0.0);
            }
        }
        let mut off = tgt.clone();
        off.data_mut().iter_mut().for_each(|v| *v += 0.2);
        let r = boundary_residual(&off, &masked, &mask, &valid, 8.0).unwrap();
        for i in 0..576 {
            if r.band[i] {
                assert!((r.values[i] - 0.2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_empty_band() {
        let tgt = Image::filled(10, 10, 3, 0.5);
        let mask = HoleMask::rect(10, 10, 0, 0, 10, 5);
        let valid = ValidMask::from_vec(10, 10, (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect()).unwrap();
        let r = boundary_residual(&tgt, &tgt, &mask, &valid, 8.0).unwrap();
        assert!(r.is_empty());
        let e = harmonic_extend(&r, &mask, 8.0).unwrap();
        assert!((0..50).all(|i| e[i] == f64::INFINITY));
    }

    #[test]
    fn harmonic_constant_and_split() {
        let mask = HoleMask::rect(32, 32, 8, 8, 24, 24);
        let valid = ValidMask::ones(32, 32);
        let band = band_region(&mask, &valid, 8.0);
        let constant = BandResidual {
            width: 32,
            height: 32,
            values: band.iter().map(|&b| if b { 0.3 } else { f64::NAN }).collect(),
            band: band.clone(),
        };
        let e = harmonic_extend(&constant, &mask, 8.0).unwrap();
        for i in 0..1024 {
            if mask.is_hole_idx(i) {
                assert!((e[i] - 0.3).abs() < 1e-7);
            }
        }

        let split = BandResidual {
            width: 32,
            height: 32,
            values: (0..1024)
                .map(|i| if !band[i] { f64::NAN } else if i % 32 < 16 { 0.0 } else { 1.0 })
                .collect(),
            band,
        };
        let e = harmonic_extend(&split, &mask, 8.0).unwrap();
        // Midline between columns 15 and 16.
        for y in 10..22 {
            let mid = 0.5 * (e[y * 32 + 15] + e[y * 32 + 16]);
            assert!((mid - 0.5).abs() < 1e-6, "row {y}: {mid}");
        }
    }

    #[test]
    fn confidence_values() {
        let valid = ValidMask::from_vec(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
        let c = confidence_map(&[0.0, 0.05, 0.0], &valid, 0.05).unwrap();
        assert_eq!(c.get(0, 0, 0), 1.0);
        assert!((c.get(1, 0, 0) - (-1.0f32).exp()).abs() < 1e-6);
        assert_eq!(c.get(2, 0, 0), 0.0);
        let c = confidence_map(&[f64::INFINITY, f64::NAN, 0.0], &ValidMask::ones(3, 1), 0.05).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn spf_merge_cases() {
        let mask = HoleMask::full(2, 2);
        let mut mask = mask;
        mask.set(0, 0, false);
        let refined = Image::filled(2, 2, 3, 0.2);
        let fill = Image::filled(2, 2, 3, 0.6);
        let masked = Image::filled(2, 2, 3, 0.9);
        let (m, _) = spf_merge(&refined, &fill, &gray(2, 2, 1.0), &mask, &masked).unwrap();
        assert_eq!(m, refined);
        let (m, _) = spf_merge(&refined, &fill, &gray(2, 2, 0.0), &mask, &masked).unwrap();
        assert_eq!(m, fill);
        let (m, p) = spf_merge(&refined, &fill, &gray(2, 2, 0.5), &mask, &masked).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert_eq!(p.pixel(0, 0), &[0.9, 0.9, 0.9]);
    }

    #[test]
    fn weights_symmetric_and_toggled() {
        let gamma = 0.5 * (-1.0f64).exp();
        let c = gray(4, 4, gamma as f32);
        let wts = mpf_weights(&[&c], &[true], 0.1, gamma).unwrap();
        assert!(wts.proposals[0].iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(wts.fallback.iter().all(|&v| (v - 0.5).abs() < 1e-6));

        let a = gray(4, 4, 0.9);
        let b = gray(4, 4, 0.6);
        let wts = mpf_weights(&[&a, &b], &[false, true], 0.1, gamma).unwrap();
        assert!(wts.proposals[0].iter().all(|&v| v == 0.0));
        assert!(wts.partition_error() <= 1e-12);

        let wts = mpf_weights(&[&a, &b], &[false, false], 0.1, gamma).unwrap();
        assert!(wts.fallback.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn small_tau_picks_argmax() {
        let a = Image::from_fn(5, 5, 1, |x, y, _| ((x * 3 + y * 7) % 11) as f32 / 11.0);
        let b = Image::from_fn(5, 5, 1, |x, y, _| ((x * 5 + y * 2 + 4) % 11) as f32 / 11.0);
        let gamma = 0.5 * (-1.0f64).exp();
        let wts = mpf_weights(&[&a, &b], &[true, true], 1e-4, gamma).unwrap();
        for i in 0..25 {
            let sa = if a.data()[i] > 0.0 { f64::from(a.data()[i]) } else { f64::NEG_INFINITY };
            let sb = if b.data()[i] > 0.0 { f64::from(b.data()[i]) } else { f64::NEG_INFINITY };
            let cands = [sa, sb, gamma];
            let best = (0..3).max_by(|&x, &y| cands[x].total_cmp(&cands[y])).unwrap();
            let got = [wts.proposals[0][i], wts.proposals[1][i], wts.fallback[i]];
            if cands.iter().filter(|&&v| v == cands[best]).count() == 1 {
                assert!((got[best] - 1.0).abs() < 1e-9, "pixel {i}: {got:?}");
            }
        }
    }

    #[test]
    fn merge_cases() {
        let mask = HoleMask::rect(6, 6, 1, 1, 5, 5);
        let tgt = Image::from_fn(6, 6, 3, |x, y, c| ((x + 2 * y + c) % 7) as f32 / 7.0);
        let masked = masked_target(&tgt, &mask).unwrap();
        let fill = Image::filled(6, 6, 3, 0.25);
        let p1 = Image::filled(6, 6, 3, 0.75);
        let all_fallback = FusionWeights {
            width: 6,
            height: 6,
            proposals: vec![vec![0.0; 36]],
            fallback: vec![1.0; 36],
        };
        let (_, out) = mpf_merge(&all_fallback, &[&p1], &fill, &masked, &mask).unwrap();
        assert_eq!(out, composite(&masked, &fill, &mask).unwrap());

        let all_p1 = FusionWeights {
            width: 6,
            height: 6,
            proposals: vec![vec![1.0; 36]],
            fallback: vec![0.0; 36],
        };
        let (_, out) = mpf_merge(&all_p1, &[&p1], &fill, &masked, &mask).unwrap();
        assert_eq!(out, composite(&masked, &p1, &mask).unwrap());
    }

    #[test]
    fn posthoc_cases() {
        let tgt = Image::from_fn(40, 40, 3, |x, y, c| ((x / 4 + y / 4 + c) % 3) as f32 / 3.0);
        let mask = HoleMask::rect(40, 40, 12, 12, 28, 28);
        let comp = tgt.clone();
        let none = gray(40, 40, 0.0);
        assert_eq!(posthoc_refill(&comp, &none, &mask, 0.5, &FillParams::default()).unwrap(), comp);

        let half = Image::from_fn(40, 40, 1, |x, _, _| if x < 20 { 0.9 } else { 0.1 });
        let out = posthoc_refill(&comp, &half, &mask, 0.5, &FillParams::default()).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                if !(mask.is_hole(x, y) && x < 20) {
                    assert_eq!(out.pixel(x, y), comp.pixel(x, y));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_partition_and_monotone(
            c1 in prop::collection::vec(0.0f32..1.0, 16),
            c2 in prop::collection::vec(0.0f32..1.0, 16),
            t1 in any::<bool>(),
            bump in 0.0f32..0.5,
            tau in 0.02f64..1.0,
        ) {
            let a = Image::from_vec(4, 4, 1, c1.clone()).unwrap();
            let b = Image::from_vec(4, 4, 1, c2).unwrap();
            let gamma = 0.5 * (-1.0f64).exp();
            let w = mpf_weights(&[&a, &b], &[t1, true], tau, gamma).unwrap();
            prop_assert!(w.partition_error() <= 1e-6);
            prop_assert!(w.proposals.iter().flatten().chain(&w.fallback).all(|&v| v >= 0.0));
            let a2 = Image::from_vec(4, 4, 1, c1.iter().map(|v| (v + bump).min(1.0)).collect()).unwrap();
            let w2 = mpf_weights(&[&a2, &b], &[t1, true], tau, gamma).unwrap();
            for i in 0..16 {
                prop_assert!(w2.proposals[0][i] >= w.proposals[0][i] - 1e-12);
            }
        }

        #[test]
        fn merge_is_convex(vals in prop::collection::vec(0.0f32..1.0, 3), c in prop::collection::vec(0.0f32..1.0, 9)) {
            let mask = HoleMask::full(3, 3);
            let mut mask = mask;
            mask.set(0, 0, false);
            let p1 = Image::filled(3, 3, 1, vals[0]);
            let p2 = Image::filled(3, 3, 1, vals[1]);
            let fill = Image::filled(3, 3, 1, vals[2]);
            let masked = Image::new(3, 3, 1);
            let ca = Image::from_vec(3, 3, 1, c.clone()).unwrap();
            let cb = Image::from_vec(3, 3, 1, c.iter().rev().cloned().collect()).unwrap();
            let w = mpf_weights(&[&ca, &cb], &[true, true], 0.1, 0.2).unwrap();
            let (m, _) = mpf_merge(&w, &[&p1, &p2], &fill, &masked, &mask).unwrap();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(m.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
    }
}
