//! PNG and JSON input/output.
//!
//! Images are 8-bit PNGs mapped to `[0, 1]` floats without any gamma
//! decoding. Masks are single-channel PNGs where a value of 128 or more marks
//! a hole pixel.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::Result;
use crate::raster::{HoleMask, Image};

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_dynamic(img: DynamicImage) -> Image {
    let has_color = img.color().has_color();
    if has_color {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 3, data).expect("decoded buffer has consistent size")
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let data = gray.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 1, data).expect("decoded buffer has consistent size")
    }
}

/// Loads an image, promoting gray inputs to three channels when `rgb` is set.
pub fn load_image(path: impl AsRef<Path>, rgb: bool) -> Result<Image> {
    let img = from_dynamic(image::open(path)?);
    Ok(if rgb { img.to_rgb() } else { img })
}

pub fn decode_image(bytes: &[u8], rgb: bool) -> Result<Image> {
    let img = from_dynamic(image::load_from_memory(bytes)?);
    Ok(if rgb { img.to_rgb() } else { img })
}

fn to_dynamic(img: &Image) -> DynamicImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let raw: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    if img.channels() == 3 {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer sized from image"))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer sized from image"))
    }
}

/// Encodes as 8-bit PNG, clamping samples into `[0, 1]`.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_dynamic(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

/// Any channel layout is reduced to luminance before thresholding at 128.
pub fn decode_mask(bytes: &[u8]) -> Result<HoleMask> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    HoleMask::from_vec(w as usize, h as usize, data)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<HoleMask> {
    decode_mask(&std::fs::read(path)?)
}

/// Holes are written as 255, known pixels as 0.
pub fn encode_mask(mask: &HoleMask) -> Result<Vec<u8>> {
    let raw = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let gray = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer sized from mask");
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(gray).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_mask(mask: &HoleMask, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

/// Raw little-endian `f32` dump with a 12-byte `(width, height, channels)`
/// header. Used to persist intermediates at full precision.
pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.data().len() * 4);
    for v in [img.width() as u32, img.height() as u32, img.channels() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    use crate::error::Error;
    if bytes.len() < 12 {
        return Err(Error::InvalidImage("raw buffer shorter than header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    let body = &bytes[12..];
    if body.len() != w * h * c * 4 {
        return Err(Error::InvalidImage("raw buffer length does not match header".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::from_vec(w, h, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = Image::from_fn(7, 5, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f32 / 255.0);
        let back = decode_image(&encode_png(&img).unwrap(), true).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mask_threshold_and_round_trip() {
        let gray = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(gray).write_to(&mut buf, ImageFormat::Png).unwrap();
        let mask = decode_mask(buf.get_ref()).unwrap();
        assert_eq!(mask.data(), &[0, 0, 1, 1]);
        let again = decode_mask(&encode_mask(&mask).unwrap()).unwrap();
        assert_eq!(again, mask);
    }

    #[test]
    fn raw_round_trip() {
        let img = Image::from_fn(3, 2, 1, |x, y, _| x as f32 * 0.1 + y as f32 * 0.01);
        assert_eq!(decode_raw(&encode_raw(&img)).unwrap(), img);
        assert!(decode_raw(&[0u8; 5]).is_err());
    }
}
