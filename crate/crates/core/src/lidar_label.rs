//! Height and gradient labels on scan ring points.
//!
//! Both cues are computed per valid ring relative to its trajectory center.
//! Rings are ordered by azimuth; increasing index walks to the vehicle's
//! left, decreasing index to its right.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DistanceMode, SequenceConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{Calibration, LidarPoint, RingScan, Vec3};
use crate::grid::LabelImage;
use crate::raster::{interpolate_samples, PixelSample};
use crate::trajectory::{TrajectoryFit, TrajectoryPoints};

/// How the gradient threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientThreshold {
    /// Largest outward height step between the wheels.
    Adaptive,
    /// Every upward step counts.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarLabelParams {
    pub sigma_h: f64,
    pub sigma_g: f64,
    pub use_height: bool,
    pub use_gradient: bool,
    pub threshold: GradientThreshold,
    pub radial_rejection_m: f64,
    pub radial_distance: DistanceMode,
    /// Drop points missing either cue instead of falling back to the other.
    pub strict_cues: bool,
    /// Count a step only when it strictly exceeds the threshold.
    pub strict_gradient_threshold: bool,
}

impl LidarLabelParams {
    pub fn from_config(cfg: &SequenceConfig) -> Self {
        Self {
            sigma_h: cfg.sigma_h,
            sigma_g: cfg.sigma_g,
            use_height: true,
            use_gradient: true,
            threshold: GradientThreshold::Adaptive,
            radial_rejection_m: cfg.lidar.radial_rejection_m,
            radial_distance: cfg.lidar.radial_distance,
            strict_cues: cfg.lidar.strict_cues,
            strict_gradient_threshold: cfg.lidar.strict_gradient_threshold,
        }
    }
}

/// `exp(-H²/σ²)` with `H = max(z - z0, 0)`.
pub fn height_label(z: f64, z_center: f64, sigma_h: f64) -> f64 {
    let h = (z - z_center).max(0.0);
    (-(h * h) / (sigma_h * sigma_h)).exp()
}

/// `exp(-G²/σ²)`.
pub fn gradient_label(g: f64, sigma_g: f64) -> f64 {
    (-(g * g) / (sigma_g * sigma_g)).exp()
}

fn radial(p: &Vec3, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Euclidean => p.norm(),
        DistanceMode::Horizontal => p.x.hypot(p.y),
    }
}

/// Height step of point `k` taken outward from the center, i.e. relative to
/// its neighbour on the center side.
fn outward_step(ring: &[LidarPoint], center: usize, k: usize) -> f64 {
    let prev = if k > center { k - 1 } else { k + 1 };
    ring[k].xyz.z - ring[prev].xyz.z
}

/// Largest outward step over the points strictly between the center and each
/// wheel, wheels included. Floored at zero; an empty span gives zero.
pub fn adaptive_threshold(ring: &[LidarPoint], t: &TrajectoryPoints) -> f64 {
    let lo = t.left.min(t.right).min(t.center);
    let hi = t.left.max(t.right).max(t.center);
    (lo..=hi)
        .filter(|&k| k != t.center)
        .map(|k| outward_step(ring, t.center, k))
        .fold(0.0, f64::max)
}

/// Cumulative thresholded gradient `G` for every ring point. The center is 0.
pub fn cumulative_gradients(ring: &[LidarPoint], center: usize, eps: f64, strict: bool) -> Vec<f64> {
    let keep = |dz: f64| if (strict && dz > eps) || (!strict && dz >= eps) { dz } else { 0.0 };
    let mut g = vec![0.0; ring.len()];
    for k in center + 1..ring.len() {
        g[k] = g[k - 1] + keep(outward_step(ring, center, k));
    }
    for k in (0..center).rev() {
        g[k] = g[k + 1] + keep(outward_step(ring, center, k));
    }
    g
}

/// Label of one ring point with its constituent cues.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub ring: usize,
    pub index: usize,
    pub xyz: Vec3,
    pub height: Option<f64>,
    pub gradient: Option<f64>,
    pub label: f64,
}

/// Per-ring cue profile for a valid ring.
#[derive(Clone, Debug, PartialEq)]
pub struct RingProfile {
    pub ring: usize,
    pub trajectory: TrajectoryPoints,
    pub threshold: f64,
    pub height: Vec<Option<f64>>,
    pub gradient: Vec<f64>,
}

impl RingProfile {
    pub fn compute(ring_idx: usize, ring: &[LidarPoint], t: TrajectoryPoints, p: &LidarLabelParams) -> Self {
        let c = ring[t.center].xyz;
        let rc = radial(&c, p.radial_distance);
        let height = ring
            .iter()
            .map(|pt| {
                ((radial(&pt.xyz, p.radial_distance) - rc).abs() <= p.radial_rejection_m)
                    .then(|| height_label(pt.xyz.z, c.z, p.sigma_h))
            })
            .collect();
        let threshold = match p.threshold {
            GradientThreshold::Adaptive => adaptive_threshold(ring, &t),
            GradientThreshold::Zero => 0.0,
        };
        let gradient = cumulative_gradients(ring, t.center, threshold, p.strict_gradient_threshold)
            .into_iter()
            .map(|g| gradient_label(g, p.sigma_g))
            .collect();
        Self {
            ring: ring_idx,
            trajectory: t,
            threshold,
            height,
            gradient,
        }
    }

    /// Combined label for point `i`, or `None` when the enabled cues do not
    /// produce one.
    pub fn label(&self, i: usize, p: &LidarLabelParams) -> Option<(Option<f64>, Option<f64>, f64)> {
        let h = if p.use_height { self.height[i] } else { None };
        let g = p.use_gradient.then_some(self.gradient[i]);
        let label = match (h, g) {
            (Some(h), Some(g)) => (h + g) / 2.0,
            (Some(_), None) | (None, Some(_)) if p.strict_cues && p.use_height && p.use_gradient => {
                return None
            }
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => return None,
        };
        Some((h, g, label))
    }
}

/// Labels for every point of every valid ring. Rings without a valid
/// trajectory produce nothing.
pub fn label_points(scan: &RingScan, fit: &TrajectoryFit, p: &LidarLabelParams) -> Vec<PointLabel> {
    let mut out = Vec::new();
    for (ring_idx, t) in fit.valid() {
        let ring = &scan.rings[ring_idx];
        let prof = RingProfile::compute(ring_idx, ring, t, p);
        for (i, pt) in ring.iter().enumerate() {
            if let Some((height, gradient, label)) = prof.label(i, p) {
                out.push(PointLabel {
                    ring: ring_idx,
                    index: i,
                    xyz: pt.xyz,
                    height,
                    gradient,
                    label,
                });
            }
        }
    }
    out
}

/// Project labeled points into the image and interpolate between them.
/// Points landing on the same pixel are averaged.
pub fn rasterize(
    points: &[PointLabel],
    calib: &Calibration,
    max_edge_px: f64,
    exec: Execution,
) -> LabelImage {
    let (w, h) = calib.image_size();
    let mut acc: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
    for p in points {
        if let Some((x, y)) = calib.project_lidar(&p.xyz).and_then(|px| px.to_index(w, h)) {
            let e = acc.entry((y, x)).or_default();
            e.0 += p.label;
            e.1 += 1;
        }
    }
    let samples: Vec<PixelSample> = acc
        .into_iter()
        .map(|((y, x), (s, n))| PixelSample {
            x,
            y,
            value: s / n as f64,
        })
        .collect();
    interpolate_samples(&samples, w, h, max_edge_px, exec)
}

pub fn write_points_csv<W: Write>(points: &[PointLabel], mut w: W) -> std::io::Result<()> {
    writeln!(w, "ring,index,x,y,z,height,gradient,label")?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for p in points {
        writeln!(
            w,
            "{},{},{:.4},{:.4},{:.4},{},{},{:.6}",
            p.ring,
            p.index,
            p.xyz.x,
            p.xyz.y,
            p.xyz.z,
            opt(p.height),
            opt(p.gradient),
            p.label
        )?;
    }
    Ok(())
}

pub fn save_points_csv(points: &[PointLabel], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_points_csv(points, &mut buf).expect("writing to a Vec");
    crate::ingest::write_atomic(path, |tmp| std::fs::write(tmp, buf).map_err(|e| Error::io(tmp, e)))
}
