//! Frame processing and ablation runs over a sequence.
//!
//! Work happens in three passes. Trajectory fitting, lidar labels and
//! per-frame prototype candidates are independent per frame. Prototype
//! carry-over must follow frame order. Camera labels, fusion, CRF and
//! metrics are again independent per frame.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::camera_label::{
    compute_prototype, similarity_labels, similarity_map, trajectory_patches, upsample, PrototypeSource,
    PrototypeTracker,
};
use crate::config::SequenceConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::FeatureProvider;
use crate::fusion::{binarize, crf_refine, fuse, FusedLabel, Provenance};
use crate::geometry::{limit_fov, Pose, RingScan};
use crate::grid::{LabelImage, Mask};
use crate::ingest::FrameSample;
use crate::lidar_label::{label_points, rasterize, GradientThreshold, LidarLabelParams, PointLabel};
use crate::metrics::{confusion, Confusion, FrameMetrics, MetricsReport};
use crate::trajectory::{fit_trajectory, trajectory_mask, TrajectoryFit};

/// Which lidar cues feed a lidar label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LidarVariant {
    Height,
    GradientNoThreshold,
    Gradient,
    HeightGradient,
}

impl LidarVariant {
    pub fn params(self, cfg: &SequenceConfig) -> LidarLabelParams {
        let base = LidarLabelParams::from_config(cfg);
        match self {
            LidarVariant::Height => LidarLabelParams {
                use_gradient: false,
                ..base
            },
            LidarVariant::Gradient => LidarLabelParams {
                use_height: false,
                ..base
            },
            LidarVariant::GradientNoThreshold => LidarLabelParams {
                use_height: false,
                threshold: GradientThreshold::Zero,
                ..base
            },
            LidarVariant::HeightGradient => base,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LidarVariant::Height => "H",
            LidarVariant::GradientNoThreshold => "G0",
            LidarVariant::Gradient => "G",
            LidarVariant::HeightGradient => "H+G",
        }
    }
}

/// One ablation configuration: which labels are combined and whether the
/// CRF refines the result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub camera: bool,
    pub lidar: Option<LidarVariant>,
    pub crf: bool,
}

impl AblationConfig {
    pub fn new(name: &str, camera: bool, lidar: Option<LidarVariant>, crf: bool) -> Self {
        Self {
            name: name.to_string(),
            camera,
            lidar,
            crf,
        }
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The nine configurations of the ablation table, in order.
pub fn ablation_configs() -> Vec<AblationConfig> {
    use LidarVariant::*;
    vec![
        AblationConfig::new("C", true, None, false),
        AblationConfig::new("H", false, Some(Height), false),
        AblationConfig::new("G-no-threshold", false, Some(GradientNoThreshold), false),
        AblationConfig::new("G", false, Some(Gradient), false),
        AblationConfig::new("H+G", false, Some(HeightGradient), false),
        AblationConfig::new("C+H", true, Some(Height), false),
        AblationConfig::new("C+G", true, Some(Gradient), false),
        AblationConfig::new("C+H+G", true, Some(HeightGradient), false),
        AblationConfig::new("C+H+G+CRF", true, Some(HeightGradient), true),
    ]
}

/// The full pipeline: camera, height and gradient labels with CRF.
pub fn full_config() -> AblationConfig {
    ablation_configs().pop().expect("non-empty table")
}

/// Trajectory fit of one frame in the lidar frame.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    /// Scan limited to the configured field of view.
    pub scan: RingScan,
    /// Future poses in the lidar frame.
    pub poses: Vec<Pose>,
    pub fit: TrajectoryFit,
    pub trajectory: Mask,
}

pub fn fit_frame(sample: &FrameSample, cfg: &SequenceConfig, exec: Execution) -> FrameGeometry {
    let calib = &sample.calib;
    let scan = limit_fov(&sample.scan, cfg.fov_deg);
    let to_lidar = calib.world_to_lidar(&sample.pose);
    let poses: Vec<Pose> = sample.future_poses.iter().map(|p| p.transformed(&to_lidar)).collect();
    let fit = fit_trajectory(&scan, &poses, calib, &cfg.trajectory, exec);
    let trajectory = trajectory_mask(&fit, &scan, calib);
    FrameGeometry {
        scan,
        poses,
        fit,
        trajectory,
    }
}

/// Everything produced for one frame. Handed to the sink of [`Pipeline::run_with`].
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub frame_id: String,
    pub geometry: FrameGeometry,
    /// Point labels of the height+gradient variant, when computed.
    pub points: Vec<PointLabel>,
    pub lidar: BTreeMap<LidarVariant, LabelImage>,
    pub camera: Option<LabelImage>,
    pub prototype: Option<PrototypeSource>,
    /// Camera + height + gradient fusion, when both are available.
    pub fused: Option<LabelImage>,
    pub provenance: Option<ProvenanceCounts>,
    /// Final mask per configuration, in configuration order.
    pub masks: Vec<(String, Mask)>,
    pub confusion: Vec<(String, Confusion)>,
}

/// Pixel counts of a fused label by contributing input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCounts {
    pub both: usize,
    pub camera_only: usize,
    pub lidar_only: usize,
    pub neither: usize,
}

impl ProvenanceCounts {
    pub fn of(label: &FusedLabel) -> Self {
        Self {
            both: label.count(Provenance::Both),
            camera_only: label.count(Provenance::CameraOnly),
            lidar_only: label.count(Provenance::LidarOnly),
            neither: label.count(Provenance::Neither),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Skipped { reason: String },
}

impl FrameStatus {
    pub fn is_ok(&self) -> bool {
        *self == FrameStatus::Ok
    }
}

/// Per-frame facts kept after a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame_id: String,
    #[serde(flatten)]
    pub status: FrameStatus,
    pub valid_rings: usize,
    pub ring_failures: BTreeMap<String, usize>,
    pub prototype: Option<PrototypeSource>,
    pub provenance: Option<ProvenanceCounts>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub frames: Vec<FrameSummary>,
    /// One report per configuration; empty without ground truth.
    pub reports: Vec<MetricsReport>,
}

type FrameResult = (FrameSummary, Vec<(String, Confusion)>);

struct Prepared {
    geometry: FrameGeometry,
    points: Vec<PointLabel>,
    lidar: BTreeMap<LidarVariant, LabelImage>,
    camera: Option<(crate::features::PatchFeatureMap, Option<Vec<f64>>, usize)>,
}

pub struct Pipeline<'a> {
    pub cfg: SequenceConfig,
    pub features: &'a dyn FeatureProvider,
    pub exec: Execution,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: SequenceConfig, features: &'a dyn FeatureProvider) -> Self {
        let exec = cfg.execution;
        Self { cfg, features, exec }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Run `configs` over `frames` (in sequence order) and score them against
    /// `ground_truth` when given.
    pub fn run(&self, frames: &[FrameSample], configs: &[AblationConfig], ground_truth: Option<&[Mask]>) -> Result<RunOutput> {
        self.run_with(frames, configs, ground_truth, &|_| Ok(()))
    }

    /// Like [`Pipeline::run`], passing every frame's full output to `sink`.
    pub fn run_with(
        &self,
        frames: &[FrameSample],
        configs: &[AblationConfig],
        ground_truth: Option<&[Mask]>,
        sink: &(dyn Fn(&FrameOutput) -> Result<()> + Sync),
    ) -> Result<RunOutput> {
        self.cfg.validate()?;
        if let Some(gt) = ground_truth {
            if gt.len() != frames.len() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{} ground-truth masks", frames.len()),
                    found: format!("{}", gt.len()),
                });
            }
        }
        let needs_camera = configs.iter().any(|c| c.camera);
        let mut variants: Vec<LidarVariant> = configs.iter().filter_map(|c| c.lidar).collect();
        variants.sort();
        variants.dedup();
        // nested loops share the same pool
        let inner = self.exec;
        let outer = self.exec;

        let prepared: Vec<Prepared> = outer
            .map_slice(frames, |f| self.prepare(f, &variants, needs_camera, inner))
            .into_iter()
            .collect::<Result<_>>()?;

        let mut tracker = PrototypeTracker::new(self.cfg.camera.min_prototype_patches);
        let mut prototypes = Vec::with_capacity(prepared.len());
        for p in &prepared {
            prototypes.push(match &p.camera {
                Some((_, candidate, patches)) => tracker.accept(candidate.clone(), *patches).map(Some),
                None => Ok(None),
            });
        }

        let jobs: Vec<usize> = (0..frames.len()).collect();
        let results: Vec<Result<FrameResult>> = outer.map_slice(&jobs, |&i| {
            let geometry = &prepared[i].geometry;
            let mut summary = FrameSummary {
                frame_id: frames[i].frame_id.clone(),
                status: FrameStatus::Ok,
                valid_rings: geometry.fit.valid_count(),
                ring_failures: BTreeMap::new(),
                prototype: None,
                provenance: None,
            };
            for r in &geometry.fit.rings {
                if let Some(f) = r.failure {
                    *summary.ring_failures.entry(f.to_string()).or_insert(0) += 1;
                }
            }
            let out = prototypes[i].as_ref().map_err(clone_local).and_then(|proto| {
                self.finish(&frames[i], &prepared[i], proto.as_ref(), configs, ground_truth.map(|g| &g[i]), inner)
            });
            let out = match out {
                Ok(out) => out,
                Err(e) if e.is_frame_local() => {
                    log::warn!("skipping frame {}: {e}", summary.frame_id);
                    summary.status = FrameStatus::Skipped { reason: e.to_string() };
                    return Ok((summary, Vec::new()));
                }
                Err(e) => return Err(e),
            };
            sink(&out)?;
            summary.prototype = out.prototype;
            summary.provenance = out.provenance;
            Ok((summary, out.confusion))
        });

        let mut summaries = Vec::with_capacity(frames.len());
        let mut per_config: Vec<Vec<FrameMetrics>> = vec![Vec::new(); configs.len()];
        for r in results {
            let (summary, conf) = r?;
            for (k, (_, c)) in conf.into_iter().enumerate() {
                per_config[k].push(FrameMetrics {
                    frame_id: summary.frame_id.clone(),
                    confusion: c,
                    metrics: c.metrics(),
                });
            }
            summaries.push(summary);
        }
        let reports = if ground_truth.is_some() {
            configs
                .iter()
                .zip(per_config)
                .map(|(c, frames)| MetricsReport::new(c.name.clone(), frames))
                .collect()
        } else {
            Vec::new()
        };
        Ok(RunOutput {
            frames: summaries,
            reports,
        })
    }

    fn prepare(&self, sample: &FrameSample, variants: &[LidarVariant], needs_camera: bool, exec: Execution) -> Result<Prepared> {
        let geometry = fit_frame(sample, &self.cfg, exec);
        let mut lidar = BTreeMap::new();
        let mut points = Vec::new();
        for &v in variants {
            let pts = label_points(&geometry.scan, &geometry.fit, &v.params(&self.cfg));
            lidar.insert(v, rasterize(&pts, &sample.calib, self.cfg.lidar.max_triangle_edge_px, exec));
            if v == LidarVariant::HeightGradient {
                points = pts;
            }
        }
        let camera = if needs_camera {
            let map = self.features.features(&sample.frame_id, &sample.image)?;
            let cam = &self.cfg.camera;
            let selected = trajectory_patches(&geometry.trajectory, map.rows, map.cols, map.patch_size, cam.membership_fraction);
            let patches = selected.iter().filter(|&&s| s).count();
            let candidate = compute_prototype(&map, &selected, cam.min_prototype_patches);
            Some((map, candidate, patches))
        } else {
            None
        };
        Ok(Prepared {
            geometry,
            points,
            lidar,
            camera,
        })
    }

    fn finish(
        &self,
        sample: &FrameSample,
        prep: &Prepared,
        prototype: Option<&(Vec<f64>, PrototypeSource)>,
        configs: &[AblationConfig],
        gt: Option<&Mask>,
        exec: Execution,
    ) -> Result<FrameOutput> {
        let (w, h) = sample.calib.image_size();
        let camera = match (&prep.camera, prototype) {
            (Some((map, _, _)), Some((proto, _))) => {
                let sim = similarity_map(map, proto)?;
                let labels = similarity_labels(&sim, self.cfg.sigma_c)?;
                Some(upsample(&labels, map.rows, map.cols, map.patch_size, w, h))
            }
            _ => None,
        };
        let thr = self.cfg.binarize_threshold;
        let mut masks = Vec::with_capacity(configs.len());
        let mut fused_full = None;
        let mut provenance = None;
        for c in configs {
            let lidar = c.lidar.map(|v| &prep.lidar[&v]);
            let label = match (c.camera, lidar) {
                (true, Some(l)) => {
                    let f = fuse(camera.as_ref().expect("camera label computed"), l)?;
                    if c.lidar == Some(LidarVariant::HeightGradient) {
                        provenance = Some(ProvenanceCounts::of(&f));
                        fused_full = Some(f.image.clone());
                    }
                    f.image
                }
                (true, None) => camera.clone().expect("camera label computed"),
                (false, Some(l)) => l.clone(),
                (false, None) => LabelImage::empty(w, h),
            };
            let mask = if c.crf {
                crf_refine(&label, &sample.image, &self.cfg.crf, exec)?
            } else {
                binarize(&label, thr)
            };
            masks.push((c.name.clone(), mask));
        }
        let confusion = match gt {
            Some(gt) => masks
                .iter()
                .map(|(n, m)| Ok((n.clone(), confusion(m, gt)?)))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(FrameOutput {
            frame_id: sample.frame_id.clone(),
            geometry: prep.geometry.clone(),
            points: prep.points.clone(),
            lidar: prep.lidar.clone(),
            camera,
            prototype: prototype.map(|p| p.1),
            fused: fused_full,
            provenance,
            masks,
            confusion,
        })
    }
}

// Only frame-local errors reach this point from the prototype pass.
fn clone_local(e: &Error) -> Error {
    match e {
        Error::NoPrototype { min } => Error::NoPrototype { min: *min },
        Error::ZeroNormPrototype => Error::ZeroNormPrototype,
        Error::NonPositiveSimilarity(v) => Error::NonPositiveSimilarity(*v),
        other => Error::Config(other.to_string()),
    }
}
