//! Images, label masks and PNG ingestion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_IGNORE: i64 = 255;

/// Integer class-index mask, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<i64>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<i64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} given {} values",
                values.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> i64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        LabelMap {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> i64 {
        self.values[y * self.width + x]
    }

    /// Checks every value is a class in `[0, classes)` or `ignore`.
    pub fn validate(&self, classes: usize, ignore: i64) -> Result<()> {
        for (i, &v) in self.values.iter().enumerate() {
            if v != ignore && (v < 0 || v as usize >= classes) {
                return Err(Error::LabelOutOfRange {
                    row: i / self.width,
                    col: i % self.width,
                    value: v,
                    classes,
                });
            }
        }
        Ok(())
    }

    /// Per-pixel targets with ignored pixels as `None`.
    pub fn targets(&self, classes: usize, ignore: i64) -> Result<Vec<Option<usize>>> {
        self.validate(classes, ignore)?;
        Ok(self
            .values
            .iter()
            .map(|&v| (v != ignore).then_some(v as usize))
            .collect())
    }

    pub fn rot90(&self, k: i64) -> LabelMap {
        let t = Tensor::new(
            vec![self.height, self.width],
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("label shape")
        .rot90(k);
        LabelMap {
            height: t.shape()[0],
            width: t.shape()[1],
            values: t.data().iter().map(|&v| v as i64).collect(),
        }
    }

    fn crop(&self, y0: usize, x0: usize, size: usize) -> LabelMap {
        LabelMap::from_fn(size, size, |y, x| self.at(y0 + y, x0 + x))
    }
}

/// An RGB image in `[0, 1]` (`H x W x 3`) with an optional mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Tensor,
    pub label: Option<LabelMap>,
    pub ignore_value: i64,
}

impl ImageSample {
    pub fn new(image: Tensor, label: Option<LabelMap>) -> Result<Self> {
        if image.rank() != 3 || image.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "image must be H x W x 3, got {:?}",
                image.shape()
            )));
        }
        if let Some(l) = &label {
            if l.height() != image.shape()[0] || l.width() != image.shape()[1] {
                return Err(Error::Shape(format!(
                    "label {}x{} does not match image {:?}",
                    l.height(),
                    l.width(),
                    image.shape()
                )));
            }
        }
        Ok(ImageSample {
            image,
            label,
            ignore_value: DEFAULT_IGNORE,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn is_square(&self) -> bool {
        self.height() == self.width()
    }

    pub fn rot90(&self, k: i64) -> ImageSample {
        ImageSample {
            image: self.image.rot90(k),
            label: self.label.as_ref().map(|l| l.rot90(k)),
            ignore_value: self.ignore_value,
        }
    }

    /// Largest centered square crop; identity for square images.
    pub fn center_square(&self) -> ImageSample {
        if self.is_square() {
            return self.clone();
        }
        let size = self.height().min(self.width());
        let y0 = (self.height() - size) / 2;
        let x0 = (self.width() - size) / 2;
        let image = Tensor::from_fn(&[size, size, 3], |i| {
            self.image.at(&[y0 + i[0], x0 + i[1], i[2]])
        });
        ImageSample {
            image,
            label: self.label.as_ref().map(|l| l.crop(y0, x0, size)),
            ignore_value: self.ignore_value,
        }
    }

    /// Loads an RGB image and, optionally, a single-channel 8-bit label PNG.
    pub fn load(image_path: &Path, label_path: Option<&Path>, ignore_value: i64) -> Result<Self> {
        let img = image::open(image_path)
            .map_err(|source| Error::Image {
                path: image_path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let image = Tensor::new(vec![h, w, 3], raw.iter().map(|&b| b as f64 / 255.0).collect())?;
        let label = match label_path {
            None => None,
            Some(p) => {
                let l = image::open(p)
                    .map_err(|source| Error::Image {
                        path: p.to_path_buf(),
                        source,
                    })?
                    .to_luma8();
                Some(LabelMap::new(
                    l.height() as usize,
                    l.width() as usize,
                    l.into_raw().into_iter().map(i64::from).collect(),
                )?)
            }
        };
        let mut s = ImageSample::new(image, label)?;
        s.ignore_value = ignore_value;
        Ok(s)
    }

    /// Writes the image (and label, if any) as PNGs.
    pub fn save(&self, image_path: &Path, label_path: Option<&Path>) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let bytes: Vec<u8> = self
            .image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(w, h, bytes).expect("rgb buffer size");
        img.save(image_path).map_err(|source| Error::Image {
            path: image_path.to_path_buf(),
            source,
        })?;
        if let (Some(p), Some(l)) = (label_path, &self.label) {
            let bytes = l.values.iter().map(|&v| v.clamp(0, 255) as u8).collect();
            let img = image::GrayImage::from_raw(w, h, bytes).expect("label buffer size");
            img.save(p).map_err(|source| Error::Image {
                path: p.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }
}
