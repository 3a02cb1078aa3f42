//! Per-class cost heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{prepare, RsktModel};
use crate::sample::ImageSample;
use crate::tensor::Tensor;
use crate::vocab::ClassVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Clip,
    Dino,
    Fused,
    Aggregated,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Clip, Stage::Dino, Stage::Fused, Stage::Aggregated];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Clip => "clip",
            Stage::Dino => "dino",
            Stage::Fused => "fused",
            Stage::Aggregated => "aggregated",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected clip, dino, fused or aggregated)")))
    }
}

/// Min-max scaling to `0..=255`; a zero-range plane maps to mid-gray.
pub fn normalize_plane(plane: &[f64]) -> Vec<u8> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![128; plane.len()];
    }
    plane
        .iter()
        .map(|v| ((v - lo) / range * 255.0).round() as u8)
        .collect()
}

/// File-system friendly form of a class name.
pub fn file_stem(class: &str) -> String {
    class
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// One grayscale image per class plane of `maps` (`[N, h, w]`), each cell
/// enlarged to `scale x scale` pixels.
pub fn write_planes(maps: &Tensor, names: &[String], stage: Stage, scale: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut written = Vec::with_capacity(n);
    for (c, name) in names.iter().enumerate().take(n) {
        let plane = &maps.data()[c * h * w..(c + 1) * h * w];
        let gray = normalize_plane(plane);
        let (oh, ow) = (h * scale, w * scale);
        let img = image::GrayImage::from_fn(ow as u32, oh as u32, |x, y| {
            image::Luma([gray[(y as usize / scale) * w + x as usize / scale]])
        });
        let path = dir.join(format!("{}_{}.png", file_stem(name), stage.name()));
        img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}

/// Runs `model` up to `stage` and writes the heatmaps.
pub fn viz_cost(model: &RsktModel, sample: &ImageSample, vocab: &ClassVocabulary, stage: Stage, dir: &Path) -> Result<Vec<PathBuf>> {
    let sample = prepare(sample);
    let maps = model.stage_maps(&sample, vocab)?;
    let t = match stage {
        Stage::Clip => &maps.clip,
        Stage::Dino => &maps.dino,
        Stage::Fused => &maps.fused,
        Stage::Aggregated => &maps.aggregated,
    };
    write_planes(t, vocab.names(), stage, model.model.patch_size, dir)
}
