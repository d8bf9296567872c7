//! PNG reading and writing for images, masks and grayscale maps.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::{Error, LabelGrid, Result, RgbImage};

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Quantizes to 8 bits per channel; values are clamped to `[0, 1]` first.
pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Data(format!("expected 3 channels, got {c}")));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (image[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<LabelGrid> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Data(format!(
                "{}: mask must be 8-bit single channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(gray_to_array(&gray))
}

pub fn write_mask(path: &Path, mask: &LabelGrid) -> Result<()> {
    write_gray(path, mask)
}

pub fn write_gray(path: &Path, grid: &Array2<u8>) -> Result<()> {
    let (h, w) = grid.dim();
    let buf: GrayImage =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([grid[[y as usize, x as usize]]]));
    buf.save(path)?;
    Ok(())
}

fn gray_to_array(gray: &GrayImage) -> Array2<u8> {
    let (w, h) = gray.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| gray.get_pixel(x as u32, y as u32)[0])
}
