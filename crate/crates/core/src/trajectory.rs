//! Fitting the driven trajectory to scan rings.
//!
//! For every ring the point nearest to any future pose becomes the center
//! candidate. Wheel points are the ring points nearest to the center offset
//! by half the track width to either side of the matched pose's heading.
//! Rings are then filtered near-to-far; a ring failing any rule is dropped
//! while the remaining rings stay usable.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DistanceMode, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{Calibration, LidarPoint, Pixel, Pose, RingScan, Vec3};
use crate::grid::Mask;
use crate::raster::fill_polygon;

/// Column half-width of the occlusion rule, in pixels.
pub const OCCLUSION_DU_PX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterCandidate {
    pub ring: usize,
    pub index: usize,
    pub pose_index: usize,
    /// Matched pose, in the scan's sensor frame.
    pub pose: Pose,
    /// 3D distance between the point and the pose.
    pub distance: f64,
}

/// Per ring, the scan point closest (3D) to any pose. Poses must already be
/// in the scan's sensor frame. Ties go to the lowest azimuth, then to the
/// earliest pose.
pub fn fit_centers(scan: &RingScan, poses: &[Pose]) -> Vec<Option<CenterCandidate>> {
    fit_centers_with(scan, poses, Execution::default())
}

pub fn fit_centers_with(
    scan: &RingScan,
    poses: &[Pose],
    exec: Execution,
) -> Vec<Option<CenterCandidate>> {
    exec.map_range(scan.rings.len(), |ring| {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, p) in scan.rings[ring].iter().enumerate() {
            for (k, pose) in poses.iter().enumerate() {
                let d2 = (p.xyz - pose.position).norm_squared();
                if best.is_none_or(|(_, _, b)| d2 < b) {
                    best = Some((i, k, d2));
                }
            }
        }
        best.map(|(index, pose_index, d2)| CenterCandidate {
            ring,
            index,
            pose_index,
            pose: poses[pose_index],
            distance: d2.sqrt(),
        })
    })
}

/// Estimated left and right wheel positions: the center shifted by half the
/// track width along the horizontal normal of `heading` (left = +90°).
pub fn wheel_estimates(center: &Vec3, heading: f64, track_width: f64) -> (Vec3, Vec3) {
    let left = Vec3::new(-heading.sin(), heading.cos(), 0.0) * (track_width / 2.0);
    (center + left, center - left)
}

/// Index of the ring point nearest to `target`, skipping `exclude`. Ties go
/// to the lowest azimuth.
pub fn nearest_point(ring: &[LidarPoint], target: &Vec3, exclude: &[usize]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in ring.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let d2 = (p.xyz - target).norm_squared();
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelCandidates {
    pub left: usize,
    pub right: usize,
    pub left_estimate: Vec3,
    pub right_estimate: Vec3,
}

/// Pick wheel points for a ring. The center point is excluded from both
/// searches and the left point from the right search, so the three indices
/// are always distinct; rings with fewer than three points yield `None`.
pub fn extend_wheels(
    ring: &[LidarPoint],
    center_index: usize,
    heading: f64,
    track_width: f64,
) -> Option<WheelCandidates> {
    let center = ring.get(center_index)?;
    let (le, re) = wheel_estimates(&center.xyz, heading, track_width);
    let (left, _) = nearest_point(ring, &le, &[center_index])?;
    let (right, _) = nearest_point(ring, &re, &[center_index, left])?;
    Some(WheelCandidates {
        left,
        right,
        left_estimate: le,
        right_estimate: re,
    })
}

/// The first filter rule a ring failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingFailure {
    /// Fewer than three points in the ring.
    InsufficientPoints,
    PoseDistance,
    CenterSpacing,
    CenterElevation,
    WheelDistance,
    Occlusion,
}

impl fmt::Display for RingFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RingFailure::InsufficientPoints => "insufficient_points",
            RingFailure::PoseDistance => "pose_distance",
            RingFailure::CenterSpacing => "center_spacing",
            RingFailure::CenterElevation => "center_elevation",
            RingFailure::WheelDistance => "wheel_distance",
            RingFailure::Occlusion => "occlusion",
        })
    }
}

/// Center and wheel picks for one ring, before filtering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingCandidate {
    pub center: CenterCandidate,
    pub wheels: WheelCandidates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoints {
    pub center: usize,
    pub left: usize,
    pub right: usize,
}

/// Filter outcome for one ring. Valid rings carry their point indices;
/// invalid rings carry the first rule they failed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingTrajectory {
    pub ring: usize,
    pub points: Option<TrajectoryPoints>,
    pub failure: Option<RingFailure>,
}

impl RingTrajectory {
    pub fn is_valid(&self) -> bool {
        self.points.is_some()
    }
}

/// Line of sight to `wheel` is blocked when some pixel lies within
/// [`OCCLUSION_DU_PX`] columns of it and above it in the image.
pub fn occluded(wheel: &Pixel, scan_pixels: &[Pixel]) -> bool {
    occluded_within(wheel, scan_pixels, OCCLUSION_DU_PX)
}

pub fn occluded_within(wheel: &Pixel, scan_pixels: &[Pixel], du_px: f64) -> bool {
    scan_pixels
        .iter()
        .any(|p| (p.u - wheel.u).abs() < du_px && p.v < wheel.v)
}

/// Camera-frame projections of every scan point, with range from the camera.
/// Points behind the camera are `None`.
#[derive(Clone, Debug)]
pub struct ProjectedScan {
    pub rings: Vec<Vec<Option<(Pixel, f64)>>>,
}

impl ProjectedScan {
    pub fn new(scan: &RingScan, calib: &Calibration) -> Self {
        Self {
            rings: scan
                .rings
                .iter()
                .map(|ring| {
                    ring.iter()
                        .map(|p| {
                            let cam = calib.lidar_to_camera.apply(&p.xyz);
                            crate::geometry::project_point(&cam, calib).map(|px| (px, cam.norm()))
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Pixels of the points at least `min_gap` closer to the camera than
    /// `(ring, index)`, the candidate occluders of that point.
    pub fn occluders_of(&self, ring: usize, index: usize, min_gap: f64) -> Vec<Pixel> {
        let Some((_, range)) = self.rings[ring][index] else {
            return Vec::new();
        };
        self.rings
            .iter()
            .enumerate()
            .flat_map(|(r, pts)| {
                pts.iter().enumerate().filter_map(move |(i, p)| {
                    let (px, d) = (*p)?;
                    (d < range - min_gap && (r, i) != (ring, index)).then_some(px)
                })
            })
            .collect()
    }

    /// Whether the point is hidden from the camera. Points that do not
    /// project into the camera count as hidden.
    pub fn is_occluded(&self, ring: usize, index: usize, du_px: f64, min_gap: f64) -> bool {
        match self.rings[ring][index] {
            None => true,
            Some((px, _)) => occluded_within(&px, &self.occluders_of(ring, index, min_gap), du_px),
        }
    }
}

fn pose_point_distance(point: &Vec3, pose: &Pose, mode: DistanceMode) -> f64 {
    let d = point - pose.position;
    match mode {
        DistanceMode::Euclidean => d.norm(),
        DistanceMode::Horizontal => d.x.hypot(d.y),
    }
}

/// Apply the ring filters in increasing center range. Pairwise rules compare
/// against the most recent ring that passed every rule; the first such ring
/// is exempt from them.
pub fn filter_rings(
    scan: &RingScan,
    candidates: &[Option<RingCandidate>],
    calib: &Calibration,
    cfg: &TrajectoryConfig,
) -> Vec<RingTrajectory> {
    let projected = ProjectedScan::new(scan, calib);
    let mut order: Vec<&RingCandidate> = candidates.iter().flatten().collect();
    order.sort_by(|a, b| {
        let ra = scan.rings[a.center.ring][a.center.index].horizontal_range();
        let rb = scan.rings[b.center.ring][b.center.index].horizontal_range();
        ra.total_cmp(&rb).then(a.center.ring.cmp(&b.center.ring))
    });

    let mut out = Vec::with_capacity(scan.rings.len());
    let mut last_valid: Option<Vec3> = None;
    for cand in order {
        let ring = cand.center.ring;
        let pts = &scan.rings[ring];
        let c = pts[cand.center.index].xyz;
        let l = pts[cand.wheels.left].xyz;
        let r = pts[cand.wheels.right].xyz;

        let failure = if pose_point_distance(&c, &cand.center.pose, cfg.pose_distance)
            >= cfg.max_pose_distance_m
        {
            Some(RingFailure::PoseDistance)
        } else if last_valid
            .is_some_and(|p| (c.x - p.x).hypot(c.y - p.y) <= cfg.min_center_spacing_m)
        {
            Some(RingFailure::CenterSpacing)
        } else if last_valid.is_some_and(|p| (c.z - p.z).abs() >= cfg.max_center_elevation_m) {
            Some(RingFailure::CenterElevation)
        } else if (l - c).norm() >= cfg.max_wheel_distance_m
            || (r - c).norm() >= cfg.max_wheel_distance_m
        {
            Some(RingFailure::WheelDistance)
        } else if projected.is_occluded(ring, cand.wheels.left, cfg.occlusion_du_px, cfg.occlusion_min_gap_m)
            || projected.is_occluded(ring, cand.wheels.right, cfg.occlusion_du_px, cfg.occlusion_min_gap_m)
        {
            Some(RingFailure::Occlusion)
        } else {
            None
        };

        if failure.is_none() {
            last_valid = Some(c);
        }
        out.push(RingTrajectory {
            ring,
            points: failure.is_none().then_some(TrajectoryPoints {
                center: cand.center.index,
                left: cand.wheels.left,
                right: cand.wheels.right,
            }),
            failure,
        });
    }
    for (ring, cand) in candidates.iter().enumerate() {
        if cand.is_none() {
            out.push(RingTrajectory {
                ring,
                points: None,
                failure: Some(RingFailure::InsufficientPoints),
            });
        }
    }
    out
}

/// Everything [`fit_trajectory`] produced for one frame.
#[derive(Clone, Debug)]
pub struct TrajectoryFit {
    /// Per ring, indexed by ring number.
    pub candidates: Vec<Option<RingCandidate>>,
    /// Filter results, near-to-far, followed by rings without candidates.
    pub rings: Vec<RingTrajectory>,
}

impl TrajectoryFit {
    pub fn valid(&self) -> impl Iterator<Item = (usize, TrajectoryPoints)> + '_ {
        self.rings.iter().filter_map(|r| r.points.map(|p| (r.ring, p)))
    }

    pub fn valid_count(&self) -> usize {
        self.valid().count()
    }

    /// Per-ring CSV: ring, center/left/right xyz, validity, failed rule.
    pub fn write_debug_csv<W: Write>(&self, scan: &RingScan, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "ring,center_x,center_y,center_z,left_x,left_y,left_z,right_x,right_y,right_z,valid,failed_rule"
        )?;
        for r in &self.rings {
            let xyz = |i: usize| {
                let p = scan.rings[r.ring][i].xyz;
                format!("{:.4},{:.4},{:.4}", p.x, p.y, p.z)
            };
            let cols = match &self.candidates[r.ring] {
                Some(c) => format!(
                    "{},{},{}",
                    xyz(c.center.index),
                    xyz(c.wheels.left),
                    xyz(c.wheels.right)
                ),
                None => ",,,,,,,,".to_string(),
            };
            writeln!(
                w,
                "{},{cols},{},{}",
                r.ring,
                r.is_valid(),
                r.failure.map(|f| f.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    }

    pub fn save_debug_csv(&self, scan: &RingScan, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_debug_csv(scan, &mut buf).expect("writing to a Vec");
        crate::ingest::write_atomic(path, |tmp| std::fs::write(tmp, buf).map_err(|e| Error::io(tmp, e)))
    }
}

/// Full trajectory fit on a FOV-limited scan with poses in the sensor frame.
pub fn fit_trajectory(
    scan: &RingScan,
    poses: &[Pose],
    calib: &Calibration,
    cfg: &TrajectoryConfig,
    exec: Execution,
) -> TrajectoryFit {
    let centers = fit_centers_with(scan, poses, exec);
    let candidates: Vec<Option<RingCandidate>> = centers
        .into_iter()
        .map(|c| {
            let c = c?;
            let wheels =
                extend_wheels(&scan.rings[c.ring], c.index, c.pose.heading, calib.track_width)?;
            Some(RingCandidate { center: c, wheels })
        })
        .collect();
    let rings = filter_rings(scan, &candidates, calib, cfg);
    TrajectoryFit { candidates, rings }
}

/// Pixels inside the polygon bounded by the left-wheel chain (near to far)
/// and the right-wheel chain (far to near). Fewer than two valid rings give
/// an empty mask.
pub fn trajectory_mask(fit: &TrajectoryFit, scan: &RingScan, calib: &Calibration) -> Mask {
    let (w, h) = calib.image_size();
    let valid: Vec<TrajectoryPoints> = fit.valid().map(|(_, p)| p).collect();
    let rings: Vec<usize> = fit.valid().map(|(r, _)| r).collect();
    if valid.len() < 2 {
        return Mask::new(w, h);
    }
    let project = |ring: usize, i: usize| calib.project_lidar(&scan.rings[ring][i].xyz);
    let left: Option<Vec<Pixel>> = valid
        .iter()
        .zip(&rings)
        .map(|(p, &r)| project(r, p.left))
        .collect();
    let right: Option<Vec<Pixel>> = valid
        .iter()
        .zip(&rings)
        .rev()
        .map(|(p, &r)| project(r, p.right))
        .collect();
    match (left, right) {
        (Some(mut poly), Some(right)) => {
            poly.extend(right);
            fill_polygon(&poly, w, h)
        }
        _ => Mask::new(w, h),
    }
}
