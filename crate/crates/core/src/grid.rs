//! Pixel grids: binary masks and continuous label images, plus their PNG
//! encodings.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major boolean image; `true` is road.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels ≥ 128 are road.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray(), path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_gray(&load_gray(path)?))
    }
}

/// Continuous label in [0, 1] with a coverage mask. Values outside the
/// coverage are unspecified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub coverage: Vec<bool>,
}

impl LabelImage {
    /// All-zero image with no coverage.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            coverage: vec![false; width * height],
        }
    }

    /// Fully covered image with the given values.
    pub fn full(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
            coverage: vec![true; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::full(width, height, vec![value; width * height])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Covered value at (x, y).
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.coverage[i].then(|| self.values[i])
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    /// Values quantized to 0..=255; uncovered pixels are written as 0.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = self.index(x as usize, y as usize);
            let v = if self.coverage[i] { self.values[i] } else { 0.0 };
            Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn coverage_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.coverage.clone(),
        }
    }

    /// Write `<stem>.png` (label) and `<stem>_coverage.png`.
    pub fn save_png(&self, dir: &Path, stem: &str) -> Result<()> {
        save_gray(&self.to_gray(), &dir.join(format!("{stem}.png")))?;
        self.coverage_mask()
            .save_png(&dir.join(format!("{stem}_coverage.png")))
    }

    /// Read back what [`LabelImage::save_png`] wrote, at 8-bit resolution.
    pub fn load_png(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.png"));
        let gray = load_gray(&path)?;
        let coverage = Mask::load_png(&dir.join(format!("{stem}_coverage.png")))?;
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        if coverage.dims() != (w, h) {
            return Err(Error::format(
                &path,
                format!("label is {w}x{h}, coverage is {}x{}", coverage.width, coverage.height),
            ));
        }
        Ok(Self {
            width: w,
            height: h,
            values: gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            coverage: coverage.data,
        })
    }
}

pub(crate) fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    crate::ingest::write_atomic(path, |tmp| {
        img.save_with_format(tmp, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    })
}

pub(crate) fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_quantizes_and_masks() {
        let mut img = LabelImage::empty(3, 1);
        img.values = vec![1.0, 0.5, 0.9];
        img.coverage = vec![true, true, false];
        let g = img.to_gray();
        assert_eq!(g.as_raw(), &vec![255, 128, 0]);
        assert_eq!(img.coverage_mask().data, vec![true, true, false]);
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = LabelImage::empty(2, 2);
        img.values = vec![0.0, 1.0, 0.2, 0.7];
        img.coverage = vec![true, true, true, false];
        img.save_png(dir.path(), "x").unwrap();
        let back = LabelImage::load_png(dir.path(), "x").unwrap();
        assert_eq!(back.coverage, img.coverage);
        for i in 0..3 {
            assert!((back.values[i] - img.values[i]).abs() <= 0.5 / 255.0);
        }
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::new(4, 3);
        m.set(1, 2, true);
        m.set(3, 0, true);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }
}
