use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::occupancy::DepthImage;
use crate::raster::RasterImage;

/// Reads any PNG as RGB in `[0, 1]`. Alpha is composited over `background`.
pub fn read_png_rgb(path: &Path, background: [f64; 3]) -> Result<RasterImage> {
    let img = image::open(path)?.into_rgba32f();
    let (w, h) = img.dimensions();
    let mut values = Vec::with_capacity(w as usize * h as usize * 3);
    for px in img.pixels() {
        let a = px[3] as f64;
        for c in 0..3 {
            values.push(px[c] as f64 * a + background[c] * (1.0 - a));
        }
    }
    RasterImage::from_clamped(w as usize, h as usize, 3, values)
}

/// Reads a PNG as a single gray channel, ignoring alpha.
pub fn read_png_gray(path: &Path) -> Result<RasterImage> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let values = img.pixels().map(|p| p[0] as f64 / 65535.0).collect();
    RasterImage::new(w as usize, h as usize, 1, values)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit gray or RGB PNG, clamping values to `[0, 1]`.
pub fn write_png(image: &RasterImage, path: &Path) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let bytes: Vec<u8> = image.values().iter().map(|&v| to_u8(v)).collect();
    let dynamic = match image.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized buffer")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized buffer")),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    dynamic.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// 16-bit depth code: misses are 0, `[near, far]` maps linearly to `[1, 65535]`.
pub fn encode_depth(depth: f64, near: f64, far: f64) -> u16 {
    if !depth.is_finite() {
        return 0;
    }
    let t = if far > near { ((depth - near) / (far - near)).clamp(0.0, 1.0) } else { 0.0 };
    (1.0 + t * 65534.0).round() as u16
}

pub fn write_depth_png(depth: &DepthImage, path: &Path) -> Result<()> {
    let codes: Vec<u16> = depth
        .depth
        .iter()
        .map(|&d| encode_depth(d, depth.near, depth.far))
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, codes).expect("sized buffer");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
