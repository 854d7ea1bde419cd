//! Pipeline configuration. Every parameter is addressable by a dotted key,
//! e.g. `crf.iterations` or `sigma_h`, through [`SequenceConfig::set`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub sample_spacing_m: f64,
    pub sync_tolerance_s: f64,
    /// Travel distance of future poses attached to each frame.
    pub future_travel_m: f64,
    pub excluded_frames: Vec<String>,
    pub sigma_c: f64,
    pub sigma_h: f64,
    pub sigma_g: f64,
    pub fov_deg: f64,
    pub trajectory: TrajectoryConfig,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    pub crf: CrfParams,
    /// Threshold used for CRF-free masks.
    pub binarize_threshold: f64,
    pub execution: Execution,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            sample_spacing_m: 10.0,
            sync_tolerance_s: 0.05,
            future_travel_m: 60.0,
            excluded_frames: Vec::new(),
            sigma_c: 0.6,
            sigma_h: 0.1,
            sigma_g: 0.02,
            fov_deg: 90.0,
            trajectory: TrajectoryConfig::default(),
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
            crf: CrfParams::default(),
            binarize_threshold: 0.5,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Full 3D Euclidean distance.
    Euclidean,
    /// Distance in the horizontal (xy) plane.
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub max_pose_distance_m: f64,
    pub min_center_spacing_m: f64,
    pub max_center_elevation_m: f64,
    pub max_wheel_distance_m: f64,
    pub occlusion_du_px: f64,
    /// Occluders must be at least this much closer to the camera than the
    /// wheel point.
    pub occlusion_min_gap_m: f64,
    pub pose_distance: DistanceMode,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            max_pose_distance_m: 1.0,
            min_center_spacing_m: 1.0,
            max_center_elevation_m: 1.0,
            max_wheel_distance_m: 2.0,
            occlusion_du_px: 10.0,
            occlusion_min_gap_m: 0.5,
            pose_distance: DistanceMode::Euclidean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub radial_rejection_m: f64,
    pub radial_distance: DistanceMode,
    /// Drop points lacking either cue instead of falling back to the other.
    pub strict_cues: bool,
    /// Use `Δz > ε` instead of `Δz ≥ ε` when thresholding gradients.
    pub strict_gradient_threshold: bool,
    pub max_triangle_edge_px: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            radial_rejection_m: 5.0,
            radial_distance: DistanceMode::Horizontal,
            strict_cues: false,
            strict_gradient_threshold: false,
            max_triangle_edge_px: 200.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Precomputed PFMAP1 files next to the images.
    File,
    /// Built-in color statistics extractor.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub patch_size: usize,
    /// A patch belongs to the trajectory when strictly more than this
    /// fraction of its pixels are trajectory pixels.
    pub membership_fraction: f64,
    pub min_prototype_patches: usize,
    pub features: FeatureSource,
    /// Expected feature dimension; checked against file headers when set.
    pub feature_dim: Option<usize>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            membership_fraction: 0.5,
            min_prototype_patches: 200,
            features: FeatureSource::File,
            feature_dim: None,
        }
    }
}

/// Dense CRF settings. Kernels are Gaussians in pixel position (spatial) and
/// position + RGB (bilateral), with Potts compatibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub iterations: usize,
    pub spatial_sigma: f64,
    pub spatial_weight: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_rgb: f64,
    pub bilateral_weight: f64,
    pub unary_clip: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            spatial_sigma: 3.0,
            spatial_weight: 3.0,
            bilateral_sigma_xy: 60.0,
            bilateral_sigma_rgb: 10.0,
            bilateral_weight: 5.0,
            unary_clip: 0.05,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.spatial_sigma,
            self.bilateral_sigma_xy,
            self.bilateral_sigma_rgb,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("crf sigmas must be positive".into()));
        }
        if self.spatial_weight < 0.0 || self.bilateral_weight < 0.0 {
            return Err(Error::Config("crf weights must be non-negative".into()));
        }
        if !(self.unary_clip > 0.0 && self.unary_clip < 0.5) {
            return Err(Error::Config("crf.unary_clip must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_spacing_m > 0.0) {
            return Err(Error::Config("sample_spacing_m must be positive".into()));
        }
        if !(self.sync_tolerance_s >= 0.0) {
            return Err(Error::Config("sync_tolerance_s must be non-negative".into()));
        }
        if [self.sigma_c, self.sigma_h, self.sigma_g]
            .iter()
            .any(|s| !(*s > 0.0))
        {
            return Err(Error::Config("sigma_c, sigma_h and sigma_g must be positive".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::Config("fov_deg must lie in (0, 360]".into()));
        }
        if self.camera.patch_size == 0 {
            return Err(Error::Config("camera.patch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.camera.membership_fraction) {
            return Err(Error::Config(
                "camera.membership_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0, 1)".into()));
        }
        self.crf.validate()
    }

    /// Parse YAML (or JSON). A run manifest is accepted too: its `config`
    /// entry is used.
    pub fn from_str(text: &str) -> Result<Self> {
        let value: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("frames").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: SequenceConfig = if value.is_null() {
            SequenceConfig::default()
        } else {
            serde_yaml::from_value(value).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Override one parameter by dotted key. The value is parsed as YAML, so
    /// `5`, `0.1`, `true`, `[a, b]` and bare strings all work.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root =
            serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: serde_json::Value = serde_yaml::from_str(value)
            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        }
        *slot = parsed;
        let next: SequenceConfig = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_parameters() {
        let c = SequenceConfig::default();
        assert_eq!((c.sigma_c, c.sigma_h, c.sigma_g), (0.6, 0.1, 0.02));
        assert_eq!(c.fov_deg, 90.0);
        assert_eq!(c.camera.min_prototype_patches, 200);
        assert_eq!(c.crf.iterations, 5);
        c.validate().unwrap();
    }

    #[test]
    fn dotted_overrides() {
        let mut c = SequenceConfig::default();
        c.apply_overrides(&["crf.iterations=10", "sigma_h = 0.2", "lidar.radial_distance=euclidean"])
            .unwrap();
        assert_eq!(c.crf.iterations, 10);
        assert_eq!(c.sigma_h, 0.2);
        assert_eq!(c.lidar.radial_distance, DistanceMode::Euclidean);
        c.set("excluded_frames", "[f001, f002]").unwrap();
        assert_eq!(c.excluded_frames, vec!["f001", "f002"]);

        assert!(c.set("crf.nope", "1").is_err());
        assert!(c.set("sigma_h", "-1").is_err());
        assert!(c.apply_overrides(&["sigma_h"]).is_err());
        // failed overrides leave the config untouched
        assert_eq!(c.sigma_h, 0.2);
    }

    #[test]
    fn yaml_round_trip_and_partial_files() {
        let c = SequenceConfig::default();
        assert_eq!(SequenceConfig::from_str(&c.to_yaml()).unwrap(), c);
        let partial = SequenceConfig::from_str("sigma_g: 0.05\ncrf:\n  iterations: 2\n").unwrap();
        assert_eq!(partial.sigma_g, 0.05);
        assert_eq!(partial.crf.iterations, 2);
        assert_eq!(partial.crf.spatial_sigma, 3.0);
        assert!(SequenceConfig::from_str("bogus: 1").is_err());
        assert_eq!(SequenceConfig::from_str("").unwrap(), c);
    }

    #[test]
    fn hash_tracks_content() {
        let a = SequenceConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.sigma_c = 0.7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
