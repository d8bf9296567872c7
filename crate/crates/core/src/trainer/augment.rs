//! Geometric augmentation applied identically to an image and its mask:
//! horizontal flip, random rescale, padding and random crop.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use crate::model::layers::interp_matrix;
use crate::protocol::IGNORE;
use crate::{LabelGrid, RgbImage};

pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    /// Top-left corner of the crop in the rescaled, padded frame.
    pub crop_origin: (usize, usize),
}

fn scaled_len(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Draws flip, scale and a crop position for an `(h, w)` input.
pub fn sample_params(rng: &mut impl Rng, size: (usize, usize), crop: usize) -> AugmentParams {
    let flip = rng.random_bool(0.5);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let (h, w) = (scaled_len(size.0, scale).max(crop), scaled_len(size.1, scale).max(crop));
    let crop_origin = (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop));
    AugmentParams {
        flip,
        scale,
        crop_origin,
    }
}

pub fn hflip_image(image: &RgbImage) -> RgbImage {
    image.slice(s![.., ..;-1, ..]).to_owned()
}

pub fn hflip_mask(mask: &LabelGrid) -> LabelGrid {
    mask.slice(s![.., ..;-1]).to_owned()
}

/// Bilinear resize of every channel.
pub fn resize_image(image: &RgbImage, out: (usize, usize)) -> RgbImage {
    let (h, w, c) = image.dim();
    if (h, w) == out {
        return image.clone();
    }
    let ry = interp_matrix::<f32>(h, out.0);
    let rx = interp_matrix::<f32>(w, out.1);
    let mut res = Array3::zeros((out.0, out.1, c));
    for k in 0..c {
        let plane = ry.dot(&image.index_axis(Axis(2), k)).dot(&rx.t());
        res.index_axis_mut(Axis(2), k).assign(&plane);
    }
    res
}

/// Nearest-neighbour resize; never invents label values.
pub fn resize_mask(mask: &LabelGrid, out: (usize, usize)) -> LabelGrid {
    let (h, w) = mask.dim();
    let src = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Array2::from_shape_fn(out, |(y, x)| mask[[src(y, h, out.0), src(x, w, out.1)]])
}

pub fn apply(image: &RgbImage, mask: &LabelGrid, params: &AugmentParams, crop: usize) -> (RgbImage, LabelGrid) {
    let (h, w, _) = image.dim();
    let (mut img, mut msk) = if params.flip {
        (hflip_image(image), hflip_mask(mask))
    } else {
        (image.clone(), mask.clone())
    };
    let out = (scaled_len(h, params.scale), scaled_len(w, params.scale));
    img = resize_image(&img, out);
    msk = resize_mask(&msk, out);

    let (ph, pw) = (out.0.max(crop), out.1.max(crop));
    if (ph, pw) != out {
        let mut padded = Array3::zeros((ph, pw, 3));
        padded.slice_mut(s![..out.0, ..out.1, ..]).assign(&img);
        let mut padded_mask = Array2::from_elem((ph, pw), IGNORE);
        padded_mask.slice_mut(s![..out.0, ..out.1]).assign(&msk);
        img = padded;
        msk = padded_mask;
    }
    let (y0, x0) = (params.crop_origin.0.min(ph - crop), params.crop_origin.1.min(pw - crop));
    (
        img.slice(s![y0..y0 + crop, x0..x0 + crop, ..]).to_owned(),
        msk.slice(s![y0..y0 + crop, x0..x0 + crop]).to_owned(),
    )
}

pub fn augment(image: &RgbImage, mask: &LabelGrid, crop: usize, rng: &mut impl Rng) -> (RgbImage, LabelGrid) {
    let (h, w, _) = image.dim();
    let params = sample_params(rng, (h, w), crop);
    apply(image, mask, &params, crop)
}
