//! Parametric winter-road scenes with exact ground truth.
//!
//! The world is a cross-section swept along a straight or circular
//! centerline: a flat road of `road_width`, banks rising at `bank_slope` to
//! `bank_height`, flat snow beyond. Lidar points come from ray/surface
//! intersection per ring elevation and azimuth, the camera image from one ray
//! per pixel. Vehicle poses run along the centerline at ground level.

use std::path::Path;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{FeatureSource, SequenceConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::features::{patch_grid_dims, MemoryFeatures, PatchFeatureMap};
use crate::geometry::{Calibration, LidarPoint, Pixel, Pose, RigidTransform, RingScan, Vec3};
use crate::grid::Mask;
use crate::ingest::{save_index, save_poses, save_scan, FrameSample};
use crate::lidar_label::PointLabel;
use crate::trajectory::TrajectoryPoints;

const ROAD_RGB: [f64; 3] = [96.0, 98.0, 104.0];
const SNOW_RGB: [f64; 3] = [232.0, 236.0, 242.0];
const SKY_RGB: [f64; 3] = [150.0, 180.0, 222.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub road_width: f64,
    pub bank_height: f64,
    /// Rise per meter of the bank face.
    pub bank_slope: f64,
    pub road_roughness_std: f64,
    /// Lateral offset of the driven path from the centerline, left positive.
    pub lane_offset: f64,
    pub sensor_height: f64,
    pub ring_elevation_deg: Vec<f64>,
    pub azimuth_step_deg: f64,
    pub max_range_m: f64,
    /// Centerline curvature in 1/m, left turns positive; 0 is straight.
    pub curvature: f64,
    /// Camera position in the lidar frame.
    pub camera_offset: [f64; 3],
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_noise_std: f64,
    pub track_width: f64,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub feature_noise_std: f64,
    pub pose_spacing_m: f64,
    pub frame_spacing_m: f64,
    pub speed_mps: f64,
    pub future_travel_m: f64,
    pub noise_seed: u64,
}

/// 32 rings spaced evenly over −25°…+15°.
pub fn default_ring_elevations() -> Vec<f64> {
    (0..32).map(|i| -25.0 + 40.0 * i as f64 / 31.0).collect()
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            road_width: 6.0,
            bank_height: 0.5,
            bank_slope: 1.0,
            road_roughness_std: 0.02,
            lane_offset: 0.0,
            sensor_height: 1.8,
            ring_elevation_deg: default_ring_elevations(),
            azimuth_step_deg: 0.2,
            max_range_m: 100.0,
            curvature: 0.0,
            camera_offset: [0.0, 0.0, -0.3],
            image_width: 800,
            image_height: 300,
            focal_px: 525.0,
            cx: 400.0,
            cy: 62.0,
            image_noise_std: 3.0,
            track_width: 1.6,
            patch_size: 8,
            feature_dim: 8,
            feature_noise_std: 0.1,
            pose_spacing_m: 0.5,
            frame_spacing_m: 10.0,
            speed_mps: 10.0,
            future_travel_m: 60.0,
            noise_seed: 0,
        }
    }
}

impl SceneParams {
    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let p: SceneParams = serde_yaml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if !(self.road_width > self.track_width) {
            return bad("road_width must exceed track_width");
        }
        if self.bank_height < 0.0 || (self.bank_height > 0.0 && !(self.bank_slope > 0.0)) {
            return bad("bank_height must be >= 0 with a positive bank_slope");
        }
        let cam_h = self.sensor_height + self.camera_offset[2];
        if !(self.sensor_height > self.bank_height && cam_h > self.bank_height) {
            return bad("sensors must sit above the banks");
        }
        if self.road_roughness_std < 0.0 || self.feature_noise_std < 0.0 || self.image_noise_std < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if self.patch_size == 0 || self.feature_dim < 2 || self.azimuth_step_deg <= 0.0 {
            return bad("patch_size, feature_dim >= 2 and azimuth_step_deg must be positive");
        }
        if self.curvature != 0.0 && (1.0 / self.curvature.abs()) < self.road_width {
            return bad("curve radius must exceed the road width");
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration {
        let rot = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let c = Vec3::from(self.camera_offset);
        Calibration {
            fx: self.focal_px,
            fy: self.focal_px,
            cx: self.cx,
            cy: self.cy,
            k1: 0.0,
            k2: 0.0,
            lidar_to_camera: RigidTransform::new(rot, -(rot * c)),
            vehicle_to_lidar: RigidTransform::from_translation(Vec3::new(0.0, 0.0, -self.sensor_height)),
            track_width: self.track_width,
            image_width: self.image_width,
            image_height: self.image_height,
        }
    }

    /// Pipeline settings matching this scene's sensor layout.
    pub fn pipeline_config(&self) -> SequenceConfig {
        let mut cfg = SequenceConfig::default();
        cfg.camera.patch_size = self.patch_size;
        cfg.camera.features = FeatureSource::File;
        cfg.camera.feature_dim = Some(self.feature_dim);
        cfg.future_travel_m = self.future_travel_m;
        // chords of curved spacing are a little shorter than the arc
        cfg.sample_spacing_m = self.frame_spacing_m * 0.9;
        cfg
    }

    /// Cross-section height at lateral offset `s` from the centerline.
    pub fn surface_height(&self, s: f64) -> f64 {
        let edge = self.road_width / 2.0;
        let a = s.abs();
        if a <= edge || self.bank_height == 0.0 {
            0.0
        } else {
            ((a - edge) * self.bank_slope).min(self.bank_height)
        }
    }

    /// Centerline point and heading at arc length `sigma`.
    pub fn centerline(&self, sigma: f64) -> (Vec3, f64) {
        let k = self.curvature;
        if k == 0.0 {
            (Vec3::new(sigma, 0.0, 0.0), 0.0)
        } else {
            let h = k * sigma;
            (Vec3::new(h.sin() / k, (1.0 - h.cos()) / k, 0.0), h)
        }
    }

    /// Signed lateral offset of a world point from the centerline.
    pub fn lateral(&self, p: &Vec3) -> f64 {
        let k = self.curvature;
        if k == 0.0 {
            p.y
        } else {
            let r = 1.0 / k;
            let dist = p.x.hypot(p.y - r);
            r.signum() * (r.abs() - dist)
        }
    }

    /// Vehicle pose at arc length `sigma`.
    pub fn pose_at(&self, sigma: f64) -> Pose {
        let (c, h) = self.centerline(sigma);
        let left = Vec3::new(-h.sin(), h.cos(), 0.0);
        Pose::new(sigma / self.speed_mps, c + left * self.lane_offset, h)
    }

    /// First intersection of a world ray with the surface: (distance, point).
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        if dir.z >= 0.0 {
            return None;
        }
        let t_top = ((origin.z - self.bank_height) / -dir.z).max(0.0);
        let t_floor = origin.z / -dir.z;
        let t_max = t_floor.min(self.max_range_m);
        if t_top > t_max {
            return None;
        }
        let t = if self.curvature == 0.0 {
            self.intersect_straight(origin, dir, t_top, t_max)?
        } else {
            self.intersect_march(origin, dir, t_top, t_max)?
        };
        Some((t, origin + dir * t))
    }

    fn intersect_straight(&self, o: &Vec3, d: &Vec3, t_lo: f64, t_hi: f64) -> Option<f64> {
        let edge = self.road_width / 2.0;
        let mut pieces = vec![(0.0, 0.0, -edge, edge)];
        if self.bank_height > 0.0 {
            let foot = edge + self.bank_height / self.bank_slope;
            let m = self.bank_slope;
            pieces.extend([
                (-edge * m, m, edge, foot),
                (-edge * m, -m, -foot, -edge),
                (self.bank_height, 0.0, foot, f64::INFINITY),
                (self.bank_height, 0.0, f64::NEG_INFINITY, -foot),
            ]);
        } else {
            pieces.extend([(0.0, 0.0, edge, f64::INFINITY), (0.0, 0.0, f64::NEG_INFINITY, -edge)]);
        }
        // z = a + b·s with s = y on a straight road
        pieces
            .into_iter()
            .filter_map(|(a, b, lo, hi)| {
                let den = d.z - b * d.y;
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = (a + b * o.y - o.z) / den;
                let s = o.y + t * d.y;
                (t >= t_lo - 1e-9 && t <= t_hi + 1e-9 && s >= lo - 1e-9 && s <= hi + 1e-9).then_some(t)
            })
            .min_by(f64::total_cmp)
    }

    fn intersect_march(&self, o: &Vec3, d: &Vec3, t_lo: f64, t_hi: f64) -> Option<f64> {
        let g = |t: f64| {
            let p = o + d * t;
            p.z - self.surface_height(self.lateral(&p))
        };
        const STEP: f64 = 0.05;
        let mut a = t_lo;
        while a < t_hi {
            let b = (a + STEP).min(t_hi);
            if g(b) <= 0.0 {
                let (mut lo, mut hi) = (a, b);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if g(mid) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(hi);
            }
            a = b;
        }
        None
    }
}

/// One generated frame with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub sample: FrameSample,
    pub ground_truth: Mask,
    pub features: PatchFeatureMap,
    /// Projected left and right road edges, near to far.
    pub road_edges: [Vec<Pixel>; 2],
}

fn rng_for(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((frame as u128) << 40);
    rng
}

fn rot_z(h: f64) -> Matrix3<f64> {
    let (s, c) = h.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Generate frame `index` of the scene (vehicle at `index · frame_spacing_m`).
pub fn generate(params: &SceneParams, index: usize) -> Result<SyntheticFrame> {
    generate_with(params, index, Execution::default())
}

/// Scan and poses of one frame, without image or features.
#[derive(Clone, Debug)]
pub struct ScanFrame {
    pub pose: Pose,
    pub scan: RingScan,
    /// World-frame poses ahead of the vehicle, `pose_spacing_m` apart.
    pub future_poses: Vec<Pose>,
}

pub fn generate_scan(params: &SceneParams, index: usize, exec: Execution) -> Result<ScanFrame> {
    params.validate()?;
    let sigma = index as f64 * params.frame_spacing_m;
    let pose = params.pose_at(sigma);
    let rot = rot_z(pose.heading);
    let lidar_origin = pose.position + Vec3::new(0.0, 0.0, params.sensor_height);

    let n_az = (360.0 / params.azimuth_step_deg).round() as usize;
    let rings: Vec<Vec<LidarPoint>> = exec.map_range(params.ring_elevation_deg.len(), |ring| {
        let e = params.ring_elevation_deg[ring].to_radians();
        (0..n_az)
            .filter_map(|k| {
                let a = (-180.0 + k as f64 * params.azimuth_step_deg).to_radians();
                let dir_l = Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
                let (_, hit) = params.intersect(&lidar_origin, &(rot * dir_l))?;
                Some(rot.transpose() * (hit - lidar_origin))
            })
            .map(|p| LidarPoint::new(p, ring as u16))
            .collect()
    });
    let mut rng = rng_for(params.noise_seed, index, 1);
    let jitter = Normal::new(0.0, params.road_roughness_std.max(1e-300)).expect("valid std");
    let mut points = Vec::with_capacity(rings.iter().map(Vec::len).sum());
    for ring in rings {
        for mut p in ring {
            if params.road_roughness_std > 0.0 {
                p.xyz.z += jitter.sample(&mut rng);
            }
            points.push(p);
        }
    }
    let scan = RingScan::from_points(points, params.ring_elevation_deg.len(), pose.timestamp);
    let step = params.pose_spacing_m;
    let n = (params.future_travel_m / step).floor() as usize;
    let future_poses = (0..=n).map(|k| params.pose_at(sigma + k as f64 * step)).collect();
    Ok(ScanFrame {
        pose,
        scan,
        future_poses,
    })
}

pub fn generate_with(params: &SceneParams, index: usize, exec: Execution) -> Result<SyntheticFrame> {
    let ScanFrame {
        pose,
        scan,
        future_poses,
    } = generate_scan(params, index, exec)?;
    let calib = params.calibration();
    let sigma = index as f64 * params.frame_spacing_m;
    let rot = rot_z(pose.heading);
    let lidar_origin = pose.position + Vec3::new(0.0, 0.0, params.sensor_height);

    // image and ground truth
    let (w, h) = (params.image_width, params.image_height);
    let cam_origin = lidar_origin + rot * Vec3::from(params.camera_offset);
    let cam_to_world = rot * calib.lidar_to_camera.rotation.transpose();
    let pixels: Vec<([f64; 3], bool)> = exec.map_range(w * h, |i| {
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let ray_c = Vec3::new((u - params.cx) / params.focal_px, (v - params.cy) / params.focal_px, 1.0);
        match params.intersect(&cam_origin, &(cam_to_world * ray_c)) {
            None => (SKY_RGB, false),
            Some((_, p)) => {
                let s = params.lateral(&p);
                if s.abs() <= params.road_width / 2.0 {
                    (ROAD_RGB, true)
                } else {
                    // banks slightly darker than the flat snow on top
                    let shade = if params.surface_height(s) < params.bank_height { 0.93 } else { 1.0 };
                    (SNOW_RGB.map(|c| c * shade), false)
                }
            }
        }
    });
    let mut rng = rng_for(params.noise_seed, index, 2);
    let img_noise = Normal::new(0.0, params.image_noise_std.max(1e-300)).expect("valid std");
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut gt = Mask::new(w, h);
    for (i, (rgb, road)) in pixels.iter().enumerate() {
        let px = rgb.map(|c| {
            let n = if params.image_noise_std > 0.0 { img_noise.sample(&mut rng) } else { 0.0 };
            (c + n).round().clamp(0.0, 255.0) as u8
        });
        image.put_pixel((i % w) as u32, (i / w) as u32, Rgb(px));
        gt.data[i] = *road;
    }

    // features: road and background directions mixed by road share of the patch
    let ps = params.patch_size;
    let (rows, cols) = patch_grid_dims(w, h, ps);
    let mut features = PatchFeatureMap::zeros(rows, cols, params.feature_dim, ps);
    let mut rng = rng_for(params.noise_seed, index, 3);
    let f_noise = Normal::new(0.0, params.feature_noise_std.max(1e-300)).expect("valid std");
    for pr in 0..rows {
        for pc in 0..cols {
            let mut n = 0usize;
            for y in pr * ps..(pr + 1) * ps {
                for x in pc * ps..(pc + 1) * ps {
                    n += gt.get(x, y) as usize;
                }
            }
            let frac = n as f64 / (ps * ps) as f64;
            let f = features.feature_mut(pr * cols + pc);
            for (k, v) in f.iter_mut().enumerate() {
                let base = match k {
                    0 => frac,
                    1 => 1.0 - frac,
                    _ => 0.0,
                };
                let n = if params.feature_noise_std > 0.0 { f_noise.sample(&mut rng) } else { 0.0 };
                *v = (base + n) as f32;
            }
        }
    }
    let frame_id = format!("f{index:04}");
    features.frame_id = frame_id.clone();

    // road edges at increasing distance ahead
    let world_to_lidar = calib.world_to_lidar(&pose);
    let edge = |side: f64| -> Vec<Pixel> {
        (1..=160)
            .filter_map(|k| {
                let (c, hh) = params.centerline(sigma + k as f64 * 0.5);
                let left = Vec3::new(-hh.sin(), hh.cos(), 0.0);
                let p = world_to_lidar.apply(&(c + left * side * params.road_width / 2.0));
                calib.project_lidar(&p)
            })
            .collect()
    };

    let road_edges = [edge(1.0), edge(-1.0)];
    Ok(SyntheticFrame {
        sample: FrameSample {
            frame_id,
            timestamp: pose.timestamp,
            image,
            scan,
            pose,
            future_poses,
            calib: Arc::new(calib),
        },
        ground_truth: gt,
        features,
        road_edges,
    })
}

/// Generate frames `0..n`.
pub fn generate_sequence(params: &SceneParams, n: usize, exec: Execution) -> Result<Vec<SyntheticFrame>> {
    // frames run one after another so each frame's own work can use the pool
    (0..n).map(|i| generate_with(params, i, exec)).collect()
}

/// Feature provider serving the frames' toy feature maps.
pub fn memory_features(frames: &[SyntheticFrame]) -> MemoryFeatures {
    MemoryFeatures {
        maps: frames
            .iter()
            .map(|f| (f.sample.frame_id.clone(), f.features.clone()))
            .collect(),
    }
}

/// Write `n` frames as a sequence directory readable by [`crate::ingest::Sequence`],
/// plus `config.yaml` with matching pipeline settings.
pub fn write_sequence(params: &SceneParams, n: usize, dir: &Path, exec: Execution) -> Result<Vec<SyntheticFrame>> {
    let frames = generate_sequence(params, n, exec)?;
    for sub in ["images", "scans", "features", "gt"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let calib = params.calibration();
    calib.save(&dir.join("calib.yaml"))?;

    let last = n.saturating_sub(1) as f64 * params.frame_spacing_m + params.future_travel_m;
    let steps = (last / params.pose_spacing_m).ceil() as usize;
    let poses: Vec<Pose> = (0..=steps).map(|k| params.pose_at(k as f64 * params.pose_spacing_m)).collect();
    save_poses(&poses, &dir.join("poses.csv"))?;

    let index: Vec<(String, f64)> = frames
        .iter()
        .map(|f| (f.sample.frame_id.clone(), f.sample.timestamp))
        .collect();
    save_index(&index, "frame_id", &dir.join("images.csv"))?;
    save_index(&index, "scan_id", &dir.join("scans.csv"))?;

    for f in &frames {
        let id = &f.sample.frame_id;
        let img_path = dir.join("images").join(format!("{id}.png"));
        crate::ingest::write_atomic(&img_path, |tmp| {
            f.sample
                .image
                .save_with_format(tmp, image::ImageFormat::Png)
                .map_err(|source| Error::Image {
                    path: img_path.clone(),
                    source,
                })
        })?;
        save_scan(&f.sample.scan, &dir.join("scans").join(format!("{id}.bin")))?;
        f.features.save(&dir.join("features").join(format!("{id}.pfmap")))?;
        f.ground_truth.save_png(&dir.join("gt").join(format!("{id}.png")))?;
    }
    let cfg = params.pipeline_config();
    std::fs::write(dir.join("config.yaml"), cfg.to_yaml()).map_err(|e| Error::io(dir.join("config.yaml"), e))?;
    std::fs::write(dir.join("scene.yaml"), params.to_yaml()).map_err(|e| Error::io(dir.join("scene.yaml"), e))?;
    Ok(frames)
}

/// Settings for [`oracle_labels`].
#[derive(Clone, Copy, Debug)]
pub struct OracleSettings {
    pub sigma_h: f64,
    pub sigma_g: f64,
    pub radial_rejection_m: f64,
    /// Use ε = 0 instead of the adaptive threshold.
    pub zero_threshold: bool,
}

/// Brute-force lidar labels for the given valid rings: every point's height
/// and gradient cue evaluated directly from the point list, without the
/// incremental sums the pipeline uses. Horizontal radial distance and mean
/// fusion with fallback to the height-free gradient cue.
pub fn oracle_labels(scan: &RingScan, valid: &[(usize, TrajectoryPoints)], s: &OracleSettings) -> Vec<PointLabel> {
    let mut out = Vec::new();
    for &(ring_idx, t) in valid {
        let ring = &scan.rings[ring_idx];
        let z: Vec<f64> = ring.iter().map(|p| p.xyz.z).collect();
        let c = t.center;
        let step = |k: usize| if k > c { z[k] - z[k - 1] } else { z[k] - z[k + 1] };
        let mut eps = 0.0f64;
        if !s.zero_threshold {
            for k in t.left.min(t.right).min(c)..=t.left.max(t.right).max(c) {
                if k != c {
                    eps = eps.max(step(k));
                }
            }
        }
        let rc = ring[c].horizontal_range();
        for (i, p) in ring.iter().enumerate() {
            let height = ((p.horizontal_range() - rc).abs() <= s.radial_rejection_m).then(|| {
                let hh = (z[i] - z[c]).max(0.0);
                (-(hh * hh) / (s.sigma_h * s.sigma_h)).exp()
            });
            let between: Vec<usize> = if i > c { (c + 1..=i).collect() } else { (i..c).collect() };
            let g: f64 = between.into_iter().map(step).filter(|dz| *dz >= eps).sum();
            let gradient = (-(g * g) / (s.sigma_g * s.sigma_g)).exp();
            let label = match height {
                Some(hv) => (hv + gradient) / 2.0,
                None => gradient,
            };
            out.push(PointLabel {
                ring: ring_idx,
                index: i,
                xyz: p.xyz,
                height,
                gradient: Some(gradient),
                label,
            });
        }
    }
    out
}
