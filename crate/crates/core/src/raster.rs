//! Host-side image buffers and the small resampling helpers shared by the
//! dataset, the embedders and the harness.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// H x W x 3 image with values in [0, 1].
pub type Image = Array3<f32>;
/// H x W coverage mask with values in [0, 1].
pub type Mask = Array2<f32>;

/// Background colour of every ground-truth render and of the volume renderer.
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

pub fn check_square(image: &Image) -> Result<usize> {
    let (h, w, c) = image.dim();
    if h != w || c != 3 {
        return Err(Error::Shape(format!(
            "expected a square RGB image, got {h}x{w}x{c}"
        )));
    }
    Ok(h)
}

/// Box-filter downsampling by an integer factor.
pub fn downsample_image(image: &Image, factor: usize) -> Result<Image> {
    let (h, w, c) = image.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Image::zeros((oh, ow, c));
    for ((y, x, ch), v) in image.indexed_iter() {
        out[(y / factor, x / factor, ch)] += v * norm;
    }
    Ok(out)
}

pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    let img = mask
        .clone()
        .into_shape((mask.nrows(), mask.ncols(), 1))
        .expect("contiguous mask");
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} mask not divisible by factor {factor}"
        )));
    }
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Mask::zeros((h / factor, w / factor));
    for ((y, x, _), v) in img.indexed_iter() {
        out[(y / factor, x / factor)] += v * norm;
    }
    Ok(out)
}

/// Resizes to `size` x `size`: box filter when the size divides evenly,
/// bilinear (pixel-centre aligned) otherwise.
pub fn resize_square(image: &Image, size: usize) -> Result<Image> {
    let res = check_square(image)?;
    if res == size {
        return Ok(image.clone());
    }
    if res % size == 0 {
        return downsample_image(image, res / size);
    }
    let scale = res as f64 / size as f64;
    let mut out = Image::zeros((size, size, 3));
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (res - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(res - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (res - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(res - 1);
            let fx = (sx - x0 as f64) as f32;
            for c in 0..3 {
                let top = image[(y0, x0, c)] * (1.0 - fx) + image[(y0, x1, c)] * fx;
                let bot = image[(y1, x0, c)] * (1.0 - fx) + image[(y1, x1, c)] * fx;
                out[(y, x, c)] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize(image: &Image) -> Image {
    image.mapv(|v| to_u8(v) as f32 / 255.0)
}

pub fn quantize_mask(mask: &Mask) -> Mask {
    mask.mapv(|v| to_u8(v) as f32 / 255.0)
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf: Vec<u8> = image.iter().map(|&v| to_u8(v)).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Image::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Mask::from_shape_vec((h as usize, w as usize), data).expect("luma buffer"))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_png(&bytes)
}

/// Tiles equally sized images into one row.
pub fn hstack(images: &[Image]) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    let (h, w, c) = first.dim();
    let mut out = Image::zeros((h, w * images.len(), c));
    for (k, img) in images.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(Error::Shape("images in a row must share a shape".into()));
        }
        out.slice_mut(ndarray::s![.., k * w..(k + 1) * w, ..]).assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_preserves_constant() {
        let img = Image::from_elem((8, 8, 3), 0.25);
        let out = downsample_image(&img, 2).unwrap();
        assert_eq!(out.dim(), (4, 4, 3));
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_shape_fn((5, 5, 3), |(y, x, c)| ((y * 5 + x) * 3 + c) as f32 / 80.0);
        let q = quantize(&img);
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), q);
    }

    #[test]
    fn resize_bilinear_constant() {
        let img = Image::from_elem((12, 12, 3), 0.7);
        let out = resize_square(&img, 16).unwrap();
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}
