//! Patch-similarity profiles across steps and feature-map exports.
//!
//! The teacher axis compares a step's last-layer patches with the previous
//! step's model on the same image (high positive similarity means little
//! drift). The depth axis compares last-layer patches with first-layer
//! patches of the same model (low negative similarity means diverse tokens).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{s_negative, s_positive};
use crate::model::Model;
use crate::{io, Error, Result, RgbImage};

pub const DEFAULT_SAMPLE_SIZE: usize = 50;
pub const PROFILE_CSV: &str = "similarity.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub step: usize,
    pub s_pos_teacher: f64,
    pub s_neg_teacher: f64,
    pub s_pos_depth: f64,
    pub s_neg_depth: f64,
    pub n_images: usize,
}

impl ProfileRow {
    fn values(&self) -> [f64; 4] {
        [self.s_pos_teacher, self.s_neg_teacher, self.s_pos_depth, self.s_neg_depth]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub per_step: Vec<ProfileRow>,
}

pub const SERIES: [&str; 4] = ["s_pos_teacher", "s_neg_teacher", "s_pos_depth", "s_neg_depth"];

/// Sorted indices of a seeded sample of `k` out of `n` (all of them when `k >= n`).
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// `models[t]` is the model after step `t`. Rows cover steps `1..`; images
/// are used as given (no augmentation) and sub-sampled to `sample_size`.
pub fn similarity_profile(
    models: &[Model<f32>],
    images: &[RgbImage],
    sample_size: usize,
    seed: u64,
) -> Result<SimilarityProfile> {
    if models.len() < 2 {
        return Err(Error::Usage("a similarity profile needs at least two steps".into()));
    }
    if images.is_empty() || sample_size == 0 {
        return Err(Error::Usage("a similarity profile needs at least one image".into()));
    }
    let picked = sample_indices(images.len(), sample_size, seed);
    let models: Vec<Model<f64>> = models.iter().map(Model::cast).collect();
    let mut per_step = Vec::with_capacity(models.len() - 1);
    for t in 1..models.len() {
        let per_image: Vec<Result<[f64; 4]>> = picked
            .par_iter()
            .map(|&i| {
                let img = images[i].view();
                let student = models[t].encode(&img)?;
                let teacher = models[t - 1].encode(&img)?;
                let (last, first, old) = (student.last().view(), student.first().view(), teacher.last().view());
                Ok([
                    s_positive(&last, &old)?,
                    s_negative(&last, &old)?,
                    s_positive(&last, &first)?,
                    s_negative(&last, &first)?,
                ])
            })
            .collect();
        let mut sums = [0.0; 4];
        for r in per_image {
            for (s, v) in sums.iter_mut().zip(r?) {
                *s += v;
            }
        }
        let n = picked.len() as f64;
        let m = sums.map(|s| (s / n).clamp(0.0, 1.0));
        per_step.push(ProfileRow {
            step: t,
            s_pos_teacher: m[0],
            s_neg_teacher: m[1],
            s_pos_depth: m[2],
            s_neg_depth: m[3],
            n_images: picked.len(),
        });
    }
    Ok(SimilarityProfile { per_step })
}

pub fn profile_csv(profile: &SimilarityProfile) -> Result<String> {
    let mut out = String::from("step,s_pos_teacher,s_neg_teacher,s_pos_depth,s_neg_depth,n_images\n");
    for r in &profile.per_step {
        if r.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Metric(format!("similarity outside [0, 1] at step {}: {r:?}", r.step)));
        }
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.step, r.s_pos_teacher, r.s_neg_teacher, r.s_pos_depth, r.s_neg_depth, r.n_images
        )
        .unwrap();
    }
    Ok(out)
}

/// Writes `similarity.csv` and one SVG line plot per statistic. Plot
/// failures are logged and skipped; the returned list holds what was written.
pub fn emit_plots(profile: &SimilarityProfile, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if profile.per_step.is_empty() {
        return Err(Error::Usage("cannot plot an empty similarity profile".into()));
    }
    let csv = profile_csv(profile)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(PROFILE_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let mut written = vec![csv_path];
    for (k, name) in SERIES.iter().enumerate() {
        let path = out_dir.join(format!("{name}.svg"));
        let points: Vec<(f64, f64)> = profile.per_step.iter().map(|r| (r.step as f64, r.values()[k])).collect();
        match plot_series(&path, name, &points) {
            Ok(()) => written.push(path),
            Err(e) => log::warn!("skipping plot {}: {e}", path.display()),
        }
    }
    Ok(written)
}

fn plot_series(path: &Path, name: &str, points: &[(f64, f64)]) -> std::result::Result<(), Box<dyn std::error::Error>> {
    use plotters::prelude::*;

    let x0 = points.first().map_or(0.0, |p| p.0) - 0.5;
    let x1 = points.last().map_or(1.0, |p| p.0) + 0.5;
    let root = SVGBackend::new(path, (480, 320)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(name, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(44)
        .build_cartesian_2d(x0..x1, 0.0..1.0)?;
    chart.configure_mesh().x_desc("step").y_desc("similarity").draw()?;
    chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE))?;
    chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))?;
    root.present()?;
    Ok(())
}

/// Channel mean of layer `layer` (1-based) on the patch grid, min-max
/// scaled to `0..=255`. A constant map comes out mid-gray.
pub fn feature_map(model: &Model<f32>, image: &RgbImage, layer: usize) -> Result<Array2<u8>> {
    let n_layers = model.config().n_layers;
    if layer == 0 || layer > n_layers {
        return Err(Error::Usage(format!("layer {layer} outside 1..={n_layers}")));
    }
    let states = model.encode(&image.view())?;
    let (gh, gw) = states.grid;
    let mean = states.layer(layer).expect("checked range").mean_axis(Axis(1)).expect("non-empty");
    Ok(normalize_map(&mean.into_shape_with_order((gh, gw)).expect("patch grid")))
}

pub fn normalize_map(map: &Array2<f32>) -> Array2<u8> {
    let lo = map.fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = map.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    if !(hi > lo) {
        return Array2::from_elem(map.dim(), 128);
    }
    map.mapv(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn feature_map_name(step: usize, layer: usize) -> String {
    format!("featmap_step{step}_layer{layer}.png")
}

/// Writes `featmap_step{step}_layer{layer}.png` into `out_dir`.
pub fn export_feature_maps(
    model: &Model<f32>,
    image: &RgbImage,
    layer: usize,
    step: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    let map = feature_map(model, image, layer)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(feature_map_name(step, layer));
    io::write_gray(&path, &map)?;
    Ok(path)
}
