//! Combining camera and lidar labels into a final mask.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::CrfParams;
use crate::crf::DenseCrf;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{LabelImage, Mask};

/// Which inputs contributed to a fused pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Both,
    CameraOnly,
    LidarOnly,
    Neither,
}

#[derive(Clone, Debug)]
pub struct FusedLabel {
    pub image: LabelImage,
    pub provenance: Vec<Provenance>,
}

impl FusedLabel {
    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }
}

/// Mean of the two labels where both are covered, otherwise whichever one is.
pub fn fuse(camera: &LabelImage, lidar: &LabelImage) -> Result<FusedLabel> {
    if camera.dims() != lidar.dims() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", camera.width, camera.height),
            found: format!("{}x{}", lidar.width, lidar.height),
        });
    }
    let (w, h) = camera.dims();
    let mut image = LabelImage::empty(w, h);
    let mut provenance = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let (c, l) = (camera.coverage[i], lidar.coverage[i]);
        let (v, p) = match (c, l) {
            (true, true) => ((camera.values[i] + lidar.values[i]) / 2.0, Provenance::Both),
            (true, false) => (camera.values[i], Provenance::CameraOnly),
            (false, true) => (lidar.values[i], Provenance::LidarOnly),
            (false, false) => (0.0, Provenance::Neither),
        };
        image.values[i] = v;
        image.coverage[i] = c || l;
        provenance.push(p);
    }
    Ok(FusedLabel { image, provenance })
}

/// Covered pixels with value at or above `threshold`.
pub fn binarize(label: &LabelImage, threshold: f64) -> Mask {
    Mask {
        width: label.width,
        height: label.height,
        data: label
            .values
            .iter()
            .zip(&label.coverage)
            .map(|(v, c)| *c && *v >= threshold)
            .collect(),
    }
}

/// Dense CRF refinement. Uncovered pixels enter with probability 0.
pub fn crf_refine(label: &LabelImage, image: &RgbImage, params: &CrfParams, exec: Execution) -> Result<Mask> {
    let mut prob = label.clone();
    for (v, c) in prob.values.iter_mut().zip(&mut prob.coverage) {
        if !*c {
            *v = 0.0;
            *c = true;
        }
    }
    Ok(DenseCrf::new(params.clone()).with_execution(exec).run(&prob, image)?.mask)
}
