//! Synthetic segmentation corpus: colored shapes on a textured background.
//!
//! Each class has a fixed hue and shape family. Image `i` always contains
//! class `i % n_classes + 1`, painted last so it stays visible, plus up to two
//! random extra objects.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_class_names, SampleRecord, BACKGROUND};
use crate::{io, Error, LabelGrid, Result, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_images: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ToySpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 254 {
            return Err(Error::Data(format!("toy data needs 2..=254 classes, got {}", self.n_classes)));
        }
        if self.image_size < 8 {
            return Err(Error::Data(format!("image size {} is too small", self.image_size)));
        }
        Ok(())
    }
}

pub fn toy_class_names(n_classes: usize) -> Vec<String> {
    (1..=n_classes).map(|c| format!("toy{c:02}")).collect()
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

fn class_color(class: u8, n_classes: usize) -> [f32; 3] {
    let hue = (class as f32 - 1.0) / n_classes as f32;
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn shape_of(class: u8) -> Shape {
    match (class - 1) % 3 {
        0 => Shape::Rect,
        1 => Shape::Ellipse,
        _ => Shape::Triangle,
    }
}

fn covers(shape: Shape, cx: f32, cy: f32, rx: f32, ry: f32, x: f32, y: f32) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    match shape {
        Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        // Apex up, base at dy = 1.
        Shape::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
    }
}

/// Renders sample `index` of the corpus described by `spec`.
pub fn render_toy_sample(spec: &ToySpec, index: usize) -> Result<(RgbImage, LabelGrid)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.image_size;
    let sf = s as f32;

    let base: [f32; 3] = {
        let v = rng.random_range(0.25..0.55);
        std::array::from_fn(|_| v + rng.random_range(-0.06..0.06))
    };
    let (fx, fy, phase) = (
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
        rng.random_range(0.0..std::f32::consts::TAU),
    );
    let mut image = Array3::<f32>::zeros((s, s, 3));
    for y in 0..s {
        for x in 0..s {
            let stripe = 0.06 * ((x as f32 * fx + y as f32 * fy + phase).sin());
            for c in 0..3 {
                image[[y, x, c]] = base[c] + stripe + rng.random_range(-0.05..0.05);
            }
        }
    }
    let mut mask = Array2::<u8>::from_elem((s, s), BACKGROUND);

    let primary = (index % spec.n_classes + 1) as u8;
    let n_extra = rng.random_range(0..=2usize);
    let mut objects: Vec<u8> = (0..n_extra)
        .map(|_| rng.random_range(1..=spec.n_classes) as u8)
        .collect();
    objects.push(primary);

    for class in objects {
        let rx = rng.random_range(0.15..0.32) * sf;
        let ry = rng.random_range(0.15..0.32) * sf;
        let cx = rng.random_range(0.2..0.8) * sf;
        let cy = rng.random_range(0.2..0.8) * sf;
        let color = class_color(class, spec.n_classes);
        let shape = shape_of(class);
        for y in 0..s {
            for x in 0..s {
                if covers(shape, cx, cy, rx, ry, x as f32 + 0.5, y as f32 + 0.5) {
                    mask[[y, x]] = class;
                    for c in 0..3 {
                        image[[y, x, c]] = color[c] + rng.random_range(-0.04..0.04);
                    }
                }
            }
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((image, mask))
}

/// All samples of a toy corpus, in memory.
pub fn toy_samples(spec: &ToySpec) -> Result<Vec<(RgbImage, LabelGrid)>> {
    (0..spec.n_images).map(|i| render_toy_sample(spec, i)).collect()
}

/// Writes `images/*.png`, `masks/*.png` and `classes.json` under `dir`.
pub fn generate_toy_dataset(dir: &Path, spec: &ToySpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    write_class_names(dir, &toy_class_names(spec.n_classes))?;
    let mut records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let (image, mask) = render_toy_sample(spec, i)?;
        let id = format!("{i:05}");
        let image_ref = images.join(format!("{id}.png"));
        let mask_ref = masks.join(format!("{id}.png"));
        io::write_rgb(&image_ref, &image)?;
        io::write_mask(&mask_ref, &mask)?;
        records.push(SampleRecord::from_mask(id, image_ref, mask_ref, &mask));
    }
    Ok(records)
}
