//! Camera labels from patch feature similarity to a trajectory prototype.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchFeatureMap;
use crate::grid::{LabelImage, Mask};

/// Patches whose share of trajectory pixels exceeds `fraction`.
/// Pixels outside the cropped patch grid are ignored.
pub fn trajectory_patches(mask: &Mask, rows: usize, cols: usize, patch_size: usize, fraction: f64) -> Vec<bool> {
    let area = (patch_size * patch_size) as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut n = 0usize;
            for y in pr * patch_size..(pr + 1) * patch_size {
                for x in pc * patch_size..(pc + 1) * patch_size {
                    n += mask.get(x, y) as usize;
                }
            }
            out.push(n as f64 > fraction * area);
        }
    }
    out
}

/// Mean feature of the selected patches, or `None` below `min_patches`.
pub fn compute_prototype(map: &PatchFeatureMap, selected: &[bool], min_patches: usize) -> Option<Vec<f64>> {
    let n = selected.iter().filter(|&&s| s).count();
    if n < min_patches.max(1) {
        return None;
    }
    let mut proto = vec![0.0; map.dim];
    for (i, _) in selected.iter().enumerate().filter(|(_, s)| **s) {
        for (acc, v) in proto.iter_mut().zip(map.feature(i)) {
            *acc += *v as f64;
        }
    }
    proto.iter_mut().for_each(|v| *v /= n as f64);
    Some(proto)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    /// Built from this frame's trajectory patches.
    Current { patches: usize },
    /// Carried from the last frame that had enough trajectory patches.
    Carried { patches: usize },
}

/// Carries the prototype across frames processed in order.
#[derive(Clone, Debug, Default)]
pub struct PrototypeTracker {
    pub min_patches: usize,
    last: Option<Vec<f64>>,
}

impl PrototypeTracker {
    pub fn new(min_patches: usize) -> Self {
        Self {
            min_patches,
            last: None,
        }
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.last.as_deref()
    }

    pub fn resolve(&mut self, map: &PatchFeatureMap, selected: &[bool]) -> Result<(Vec<f64>, PrototypeSource)> {
        let patches = selected.iter().filter(|&&s| s).count();
        self.accept(compute_prototype(map, selected, self.min_patches), patches)
    }

    /// Take this frame's prototype if it has one, otherwise fall back to the
    /// carried one.
    pub fn accept(&mut self, candidate: Option<Vec<f64>>, patches: usize) -> Result<(Vec<f64>, PrototypeSource)> {
        if let Some(p) = candidate {
            self.last = Some(p.clone());
            return Ok((p, PrototypeSource::Current { patches }));
        }
        match &self.last {
            Some(p) => Ok((p.clone(), PrototypeSource::Carried { patches })),
            None => Err(Error::NoPrototype { min: self.min_patches }),
        }
    }
}

/// Cosine similarity of every patch to the prototype. Zero-norm patches get 0.
pub fn similarity_map(map: &PatchFeatureMap, prototype: &[f64]) -> Result<Vec<f64>> {
    if prototype.len() != map.dim {
        return Err(Error::DimensionMismatch {
            expected: format!("{}", map.dim),
            found: format!("{}", prototype.len()),
        });
    }
    let pn = prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pn == 0.0 {
        return Err(Error::ZeroNormPrototype);
    }
    Ok((0..map.patch_count())
        .map(|i| {
            let f = map.feature(i);
            let (dot, nn) = f.iter().zip(prototype).fold((0.0, 0.0), |(d, n), (a, b)| {
                let a = *a as f64;
                (d + a * b, n + a * a)
            });
            if nn == 0.0 { 0.0 } else { dot / (nn.sqrt() * pn) }
        })
        .collect())
}

/// Normalize similarities by their maximum, clamp to [0, 1], and map through
/// `exp(-(1 - C)²/σ²)`.
pub fn similarity_labels(sim: &[f64], sigma_c: f64) -> Result<Vec<f64>> {
    let max = sim.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::NonPositiveSimilarity(max));
    }
    Ok(sim
        .iter()
        .map(|s| {
            let c = (s / max).clamp(0.0, 1.0);
            (-(1.0 - c).powi(2) / (sigma_c * sigma_c)).exp()
        })
        .collect())
}

/// Bilinear upsampling of a patch grid to full resolution. Patch `j` is
/// centered at pixel `j·ps + (ps - 1)/2`; pixels beyond the outer centers take
/// the edge values. Every pixel is covered.
pub fn upsample(values: &[f64], rows: usize, cols: usize, patch_size: usize, width: usize, height: usize) -> LabelImage {
    if rows == 0 || cols == 0 {
        return LabelImage::empty(width, height);
    }
    let ps = patch_size as f64;
    let axis = |p: usize, n: usize| {
        let t = ((p as f64 - (ps - 1.0) / 2.0) / ps).clamp(0.0, (n - 1) as f64);
        let i0 = t.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, t - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, cols)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (r0, r1, fy) = axis(y, rows);
        for &(c0, c1, fx) in &xs {
            let top = values[r0 * cols + c0] * (1.0 - fx) + values[r0 * cols + c1] * fx;
            let bot = values[r1 * cols + c0] * (1.0 - fx) + values[r1 * cols + c1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    LabelImage::full(width, height, out)
}

/// Camera label for one frame.
#[derive(Clone, Debug)]
pub struct CameraLabel {
    pub patch_labels: Vec<f64>,
    pub image: LabelImage,
    pub source: PrototypeSource,
}

pub fn camera_label(
    map: &PatchFeatureMap,
    trajectory: &Mask,
    tracker: &mut PrototypeTracker,
    membership_fraction: f64,
    sigma_c: f64,
) -> Result<CameraLabel> {
    let (w, h) = trajectory.dims();
    let selected = trajectory_patches(trajectory, map.rows, map.cols, map.patch_size, membership_fraction);
    let (proto, source) = tracker.resolve(map, &selected)?;
    let sim = similarity_map(map, &proto)?;
    let patch_labels = similarity_labels(&sim, sigma_c)?;
    let image = upsample(&patch_labels, map.rows, map.cols, map.patch_size, w, h);
    Ok(CameraLabel {
        patch_labels,
        image,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(features: &[&[f32]], rows: usize, cols: usize) -> PatchFeatureMap {
        let dim = features[0].len();
        let mut m = PatchFeatureMap::zeros(rows, cols, dim, 2);
        for (i, f) in features.iter().enumerate() {
            m.feature_mut(i).copy_from_slice(f);
        }
        m
    }

    #[test]
    fn membership_needs_majority() {
        let mut mask = Mask::new(4, 2);
        // patch 0 gets 3 of 4 pixels, patch 1 exactly half
        mask.set(0, 0, true);
        mask.set(1, 0, true);
        mask.set(0, 1, true);
        mask.set(2, 0, true);
        mask.set(3, 0, true);
        assert_eq!(trajectory_patches(&mask, 1, 2, 2, 0.5), vec![true, false]);
    }

    #[test]
    fn prototype_and_similarity_examples() {
        let m = map_from(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]], 2, 2);
        assert!(compute_prototype(&m, &[true, false, false, false], 2).is_none());
        let p = compute_prototype(&m, &[true, true, false, false], 2).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let s = similarity_map(&m, &p).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - r).abs() < 1e-12 && (s[1] - r).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
        assert_eq!(s[3], 0.0);
        assert!(matches!(similarity_map(&m, &[0.0, 0.0]), Err(Error::ZeroNormPrototype)));
    }

    #[test]
    fn label_examples() {
        let l = similarity_labels(&[0.8, 0.4, -0.2], 0.6).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-12);
        assert!((l[1] - (-0.25f64 / 0.36).exp()).abs() < 1e-12);
        assert!((l[2] - (-1.0f64 / 0.36).exp()).abs() < 1e-12);
        assert!(similarity_labels(&[0.0, -0.1], 0.6).is_err());
    }

    #[test]
    fn tracker_carries_last_good_prototype() {
        let mut t = PrototypeTracker::new(2);
        let m = map_from(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], 1, 3);
        assert!(matches!(t.resolve(&m, &[true, false, false]), Err(Error::NoPrototype { min: 2 })));
        let (p, src) = t.resolve(&m, &[true, true, false]).unwrap();
        assert_eq!(src, PrototypeSource::Current { patches: 2 });
        let (q, src) = t.resolve(&m, &[false, false, true]).unwrap();
        assert_eq!(src, PrototypeSource::Carried { patches: 1 });
        assert_eq!(p, q);
    }

    #[test]
    fn upsample_hits_patch_centers_and_clamps() {
        // ps = 3: centers at pixels 1 and 4
        let img = upsample(&[0.0, 1.0], 1, 2, 3, 7, 3);
        assert_eq!(img.covered_count(), 21);
        assert_eq!(img.get(1, 1), Some(0.0));
        assert_eq!(img.get(4, 1), Some(1.0));
        assert_eq!(img.get(0, 0), Some(0.0));
        assert_eq!(img.get(6, 2), Some(1.0));
        assert!((img.get(2, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
