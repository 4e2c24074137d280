//! PSNR and SSIM with a peak value of 1.0.

use refill_core::raster::{HoleMask, Image};

use crate::error::{Error, Result};

/// Reported value for identical inputs, whose PSNR is infinite.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels of the pixels in `region` (every
/// pixel when `None`). Identical inputs give `+inf`.
pub fn psnr(a: &Image, b: &Image, region: Option<&HoleMask>) -> Result<f64> {
    check_pair(a, b)?;
    if let Some(m) = region {
        if m.dims() != a.dims() {
            return Err(Error::DimensionMismatch(a.dims(), m.dims()));
        }
    }
    let ch = a.channels();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..a.width() * a.height() {
        if region.is_some_and(|m| !m.is_hole_idx(i)) {
            continue;
        }
        for c in 0..ch {
            let d = a.data()[i * ch + c] as f64 - b.data()[i * ch + c] as f64;
            sum += d * d;
        }
        n += ch;
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR clipped to [`PSNR_CAP`] for tables and reports.
pub fn psnr_reported(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

fn luminance(img: &Image) -> Vec<f64> {
    let ch = img.channels();
    img.data()
        .chunks_exact(ch)
        .map(|p| {
            if ch >= 3 {
                0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
            } else {
                p[0] as f64
            }
        })
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(w - 10) x (h - 10)`.
fn filter_valid(v: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|j| k[j] * v[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) of the luminance.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let ya = luminance(a);
    let yb = luminance(b);
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&ya, w, h, &k);
    let mu_b = filter_valid(&yb, w, h, &k);
    let aa = filter_valid(&prod(&ya, &ya), w, h, &k);
    let bb = filter_valid(&prod(&yb, &yb), w, h, &k);
    let ab = filter_valid(&prod(&ya, &yb), w, h, &k);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = Image::filled(8, 8, 3, 0.3);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        assert_eq!(psnr_reported(f64::INFINITY), PSNR_CAP);
        let b = Image::filled(8, 8, 3, 0.3 + 16.0 / 255.0);
        let v = psnr(&a, &b, None).unwrap();
        assert!((v - 20.0 * (255.0f64 / 16.0).log10()).abs() < 0.01);
        assert!((v - 24.048).abs() < 0.01);
        assert!(matches!(psnr(&a, &b, Some(&HoleMask::empty(8, 8))), Err(Error::EmptyRegion)));
    }

    #[test]
    fn psnr_region_only_counts_holes() {
        let a = Image::filled(4, 4, 1, 0.0);
        let b = Image::from_fn(4, 4, 1, |x, _, _| if x < 2 { 0.5 } else { 0.0 });
        let right = HoleMask::rect(4, 4, 2, 0, 4, 4);
        assert_eq!(psnr(&a, &b, Some(&right)).unwrap(), f64::INFINITY);
        let left = HoleMask::rect(4, 4, 0, 0, 2, 4);
        assert!((psnr(&a, &b, Some(&left)).unwrap() - 10.0 * 4.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let img = Image::from_fn(20, 16, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::filled(16, 16, 1, 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image::filled(10, 16, 1, 0.4), &Image::filled(10, 16, 1, 0.4)).is_err());
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let a = Image::from_fn(24, 24, 1, |x, y, _| ((x / 2 + y / 2) % 2) as f32);
        let b = Image::from_fn(24, 24, 1, |x, y, _| 1.0 - a.get(x, y, 0));
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Brute-force per-window evaluation as an independent oracle.
        let a = Image::from_fn(14, 13, 1, |x, y, _| ((x * x + 3 * y) % 9) as f32 / 8.0);
        let b = Image::from_fn(14, 13, 1, |x, y, _| ((x + y * y) % 7) as f32 / 6.0);
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let gs: f64 = g.iter().sum();
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..3 {
            for ox in 0..4 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = g[i] * g[j] / (gs * gs);
                        let va = a.get(ox + i, oy + j, 0) as f64;
                        let vb = b.get(ox + i, oy + j, 0) as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += (2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2)
                    / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / count as f64).abs() < 1e-10);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = Image::from_fn(16, 16, 3, |x, y, c| ((x + 2 * y + c) % 5) as f32 / 4.0);
        let b = Image::from_fn(16, 16, 3, |x, y, c| ((3 * x + y + c) % 7) as f32 / 6.0);
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}
