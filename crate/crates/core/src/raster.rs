//! Raster containers shared by every stage: float images, the binary hole
//! mask and the fractional validity mask produced by warping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D point in pixel coordinates. Pixel centers sit on integers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Self) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Row-major, channel-interleaved float image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// All-zero image.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite sample at index {bad}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Clamp every sample into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rec. 601 luminance; single-channel images are returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Expands a gray image to three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Bilinear sample where samples outside the raster contribute zero.
    ///
    /// Writes the weighted sum into `out` and returns the total weight of the
    /// in-bounds taps, which is 1 for samples fully inside.
    pub fn sample_zero(&self, x: f64, y: f64, out: &mut [f32]) -> f32 {
        out.iter_mut().for_each(|v| *v = 0.0);
        if !x.is_finite() || !y.is_finite() {
            return 0.0;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut total = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let yy = y0 + dy;
            if yy < 0 || yy >= self.height as i64 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let xx = x0 + dx;
                if xx < 0 || xx >= self.width as i64 {
                    continue;
                }
                let w = wx * wy;
                total += w;
                let p = self.pixel(xx as usize, yy as usize);
                for (o, &v) in out.iter_mut().zip(p) {
                    *o += w * v;
                }
            }
        }
        total
    }

    /// Bilinear sample of one channel with clamp-to-edge addressing.
    pub fn sample_clamped(&self, x: f64, y: f64, c: usize) -> f32 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = if x.is_finite() { x.clamp(0.0, xm) } else { 0.0 };
        let y = if y.is_finite() { y.clamp(0.0, ym) } else { 0.0 };
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Separable Gaussian blur with clamp-to-edge borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let (w, h, ch) = (self.width as i64, self.height as i64, self.channels);
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let xx = (x + k as i64 - r).clamp(0, w - 1);
                        acc += kv * self.data[((y * w + xx) as usize) * ch + c];
                    }
                    tmp[((y * w + x) as usize) * ch + c] = acc;
                }
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let yy = (y + k as i64 - r).clamp(0, h - 1);
                        acc += kv * tmp[((yy * w + x) as usize) * ch + c];
                    }
                    out[((y * w + x) as usize) * ch + c] = acc;
                }
            }
        }
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: out,
        }
    }

    /// 2x box downsample (odd trailing rows/columns are averaged with what
    /// exists).
    pub fn downsample2(&self) -> Image {
        let w = self.width.div_ceil(2).max(1);
        let h = self.height.div_ceil(2).max(1);
        let ch = self.channels;
        let mut out = Image::new(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for yy in 2 * y..(2 * y + 2).min(self.height) {
                        for xx in 2 * x..(2 * x + 2).min(self.width) {
                            acc += self.get(xx, yy, c);
                            n += 1.0;
                        }
                    }
                    out.set(x, y, c, acc / n);
                }
            }
        }
        out
    }

    /// Bilinear resize with clamp-to-edge addressing.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::new(width, height, self.channels);
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    out.set(x, y, c, self.sample_clamped(fx, fy, c));
                }
            }
        }
        out
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Binary hole indicator; 1 marks pixels to be replaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoleMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl HoleMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    /// Any nonzero byte becomes a hole.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "mask expects {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    /// Axis-aligned rectangular hole `[x0, x1) x [y0, y1)`.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_hole(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn is_hole_idx(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, hole: bool) {
        self.data[y * self.width + x] = u8::from(hole);
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn known_count(&self) -> usize {
        self.data.len() - self.hole_count()
    }

    pub fn hole_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.hole_count() as f64 / self.data.len() as f64
    }

    pub fn is_all_known(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: self.dims(),
            });
        }
        Ok(())
    }

    /// Euclidean distance from every pixel to the nearest hole pixel (0 on
    /// the hole, `f32::INFINITY` when there is no hole at all).
    pub fn distance_to_hole(&self) -> Vec<f32> {
        euclidean_distance(self.width, self.height, |i| self.data[i] != 0)
    }

    /// Disk dilation of the hole by `radius` pixels.
    pub fn dilate(&self, radius: f64) -> HoleMask {
        let dist = self.distance_to_hole();
        HoleMask {
            width: self.width,
            height: self.height,
            data: dist.iter().map(|&d| u8::from(f64::from(d) <= radius)).collect(),
        }
    }

    /// Pixels in `self` but not in `other`.
    pub fn minus(&self, other: &HoleMask) -> HoleMask {
        HoleMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| u8::from(a != 0 && b == 0))
                .collect(),
        }
    }
}

/// Exact Euclidean distance transform (Felzenszwalb & Huttenlocher) to the
/// set of pixels where `is_site` holds.
pub(crate) fn euclidean_distance(
    width: usize,
    height: usize,
    is_site: impl Fn(usize) -> bool,
) -> Vec<f32> {
    const BIG: f64 = 1e20;
    let mut grid: Vec<f64> = (0..width * height)
        .map(|i| if is_site(i) { 0.0 } else { BIG })
        .collect();
    let mut f = vec![0.0; width.max(height)];
    let mut d = vec![0.0; width.max(height)];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height]);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut d[..width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid.into_iter()
        .map(|v| if v >= BIG * 0.5 { f32::INFINITY } else { v.sqrt() as f32 })
        .collect()
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Fractional coverage of the target plane by a warped source.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ValidMask {
    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "valid mask expects {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Thresholded view at 0.5.
    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] >= 0.5
    }

    /// Coverage is complete (up to rounding in the bilinear weights).
    #[inline]
    pub fn is_full_idx(&self, i: usize) -> bool {
        self.data[i] >= 1.0 - 1e-4
    }

    pub fn as_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }

    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

/// Known-pixel mask used to fit refinement stages: outside the hole and
/// fully covered by the warped source.
pub fn fit_region(mask: &HoleMask, valid: &ValidMask) -> Vec<bool> {
    (0..mask.data.len())
        .map(|i| !mask.is_hole_idx(i) && valid.is_full_idx(i))
        .collect()
}

/// `(1 - M) * I_t`: the target with its hole zeroed.
pub fn masked_target(target: &Image, mask: &HoleMask) -> Result<Image> {
    mask.check_dims(target.dims())?;
    let ch = target.channels;
    let mut out = target.clone();
    for (i, px) in out.data.chunks_exact_mut(ch).enumerate() {
        if mask.is_hole_idx(i) {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// `I_t^M + M * fill`, copying known pixels bit-exactly.
pub fn composite(masked: &Image, fill: &Image, mask: &HoleMask) -> Result<Image> {
    mask.check_dims(masked.dims())?;
    if fill.dims() != masked.dims() || fill.channels != masked.channels {
        return Err(Error::DimensionMismatch {
            expected: masked.dims(),
            actual: fill.dims(),
        });
    }
    let ch = masked.channels;
    let mut out = masked.clone();
    for (i, px) in out.data.chunks_exact_mut(ch).enumerate() {
        if mask.is_hole_idx(i) {
            px.copy_from_slice(&fill.data[i * ch..(i + 1) * ch]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_target_identity_and_annihilation() {
        let img = Image::from_fn(5, 4, 3, |x, y, c| (x + 2 * y + c) as f32 / 20.0);
        let none = HoleMask::empty(5, 4);
        assert_eq!(masked_target(&img, &none).unwrap(), img);
        let all = HoleMask::full(5, 4);
        let out = masked_target(&img, &all).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_target_left_half() {
        let img = Image::filled(4, 4, 3, 0.5);
        let mask = HoleMask::from_fn(4, 4, |x, _| x < 2);
        let out = masked_target(&img, &mask).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if x < 2 { 0.0 } else { 0.5 };
                assert!(out.pixel(x, y).iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn masked_target_rejects_mismatch() {
        let img = Image::new(4, 4, 3);
        let mask = HoleMask::empty(5, 4);
        assert!(matches!(masked_target(&img, &mask), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mask = HoleMask::from_fn(23, 17, |x, y| (x == 4 && y == 3) || (x > 15 && y > 11) || (x == 9 && y == 14));
        let dist = mask.distance_to_hole();
        for y in 0..17 {
            for x in 0..23 {
                let mut best = f64::INFINITY;
                for yy in 0..17 {
                    for xx in 0..23 {
                        if mask.is_hole(xx, yy) {
                            let d = ((x as f64 - xx as f64).powi(2) + (y as f64 - yy as f64).powi(2)).sqrt();
                            best = best.min(d);
                        }
                    }
                }
                assert!((f64::from(dist[y * 23 + x]) - best).abs() < 1e-4, "({x},{y})");
            }
        }
    }

    #[test]
    fn distance_without_hole_is_infinite() {
        let mask = HoleMask::empty(6, 6);
        assert!(mask.distance_to_hole().iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn sample_zero_weights() {
        let img = Image::filled(4, 4, 1, 1.0);
        let mut out = [0.0];
        assert_eq!(img.sample_zero(1.0, 2.0, &mut out), 1.0);
        assert_eq!(out[0], 1.0);
        let w = img.sample_zero(-0.5, 1.0, &mut out);
        assert!((w - 0.5).abs() < 1e-6);
        assert_eq!(img.sample_zero(-1.0, 1.0, &mut out), 0.0);
        assert_eq!(img.sample_zero(3.0, 3.0, &mut out), 1.0);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Image::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Image::from_vec(2, 1, 1, vec![0.0]).is_err());
    }
}
