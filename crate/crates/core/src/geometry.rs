//! Frames, calibration and camera projection.
//!
//! Conventions: lidar/vehicle frame has +x forward, +y left, +z up. The
//! camera frame has +z along the optical axis, +x right and +y down, so image
//! `v` grows downward. Pixel centers sit at integer coordinates.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Wrap an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub timestamp: f64,
    pub position: Vec3,
    /// Yaw in radians, normalized to (-π, π].
    pub heading: f64,
}

impl Pose {
    pub fn new(timestamp: f64, position: Vec3, heading: f64) -> Self {
        Self {
            timestamp,
            position,
            heading: normalize_angle(heading),
        }
    }

    /// Unit vector along the heading in the horizontal plane.
    pub fn forward(&self) -> Vec3 {
        Vec3::new(self.heading.cos(), self.heading.sin(), 0.0)
    }

    /// Transform from this pose's vehicle frame into the world frame.
    pub fn vehicle_to_world(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.heading, self.position)
    }

    /// Express this pose in another frame.
    pub fn transformed(&self, t: &RigidTransform) -> Pose {
        let dir = t.rotation * self.forward();
        Pose::new(
            self.timestamp,
            t.apply(&self.position),
            dir.y.atan2(dir.x),
        )
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation about +z by `yaw`, followed by translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::new(r, translation)
    }

    /// Build from a row-major 4×4 homogeneous matrix. The rotation block must
    /// be orthonormal to 1e-6.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Calibration(format!(
                "rigid transform needs 16 values, got {}",
                m.len()
            )));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t = Vec3::new(m[3], m[7], m[11]);
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Calibration(format!(
                "last row of rigid transform must be 0 0 0 1, got {bottom:?}"
            )));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::Calibration(
                "rotation block is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(Self::new(r, t))
    }

    #[rustfmt::skip]
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }
}

/// Apply a rigid transform to a point.
pub fn transform(p: &Vec3, t: &RigidTransform) -> Vec3 {
    t.apply(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub xyz: Vec3,
    pub ring: u16,
    /// Polar angle in the sensor's horizontal plane, (-π, π].
    pub azimuth: f64,
}

impl LidarPoint {
    /// Point with the azimuth derived from its own coordinates.
    pub fn new(xyz: Vec3, ring: u16) -> Self {
        Self {
            xyz,
            ring,
            azimuth: xyz.y.atan2(xyz.x),
        }
    }

    pub fn horizontal_range(&self) -> f64 {
        self.xyz.x.hypot(self.xyz.y)
    }
}

/// One lidar sweep grouped by ring, each ring sorted by azimuth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RingScan {
    pub rings: Vec<Vec<LidarPoint>>,
    pub timestamp: f64,
}

impl RingScan {
    /// Group loose points by ring and sort each ring by azimuth (stable).
    /// The ring count is the larger of `ring_count` and the highest index seen.
    pub fn from_points(points: Vec<LidarPoint>, ring_count: usize, timestamp: f64) -> Self {
        let n_rings = points
            .iter()
            .map(|p| p.ring as usize + 1)
            .max()
            .unwrap_or(0)
            .max(ring_count);
        let mut rings = vec![Vec::new(); n_rings];
        for p in points {
            rings[p.ring as usize].push(p);
        }
        for ring in &mut rings {
            ring.sort_by(|a, b| a.azimuth.total_cmp(&b.azimuth));
        }
        Self { rings, timestamp }
    }

    pub fn point_count(&self) -> usize {
        self.rings.iter().map(Vec::len).sum()
    }

    pub fn points(&self) -> impl Iterator<Item = &LidarPoint> {
        self.rings.iter().flatten()
    }
}

/// Keep only points within ±fov/2 of the forward (+x) axis.
pub fn limit_fov(scan: &RingScan, fov_deg: f64) -> RingScan {
    let half = fov_deg.to_radians() / 2.0;
    RingScan {
        rings: scan
            .rings
            .iter()
            .map(|ring| {
                ring.iter()
                    .filter(|p| p.azimuth.abs() <= half)
                    .copied()
                    .collect()
            })
            .collect(),
        timestamp: scan.timestamp,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Integer pixel containing this point, if inside a `width`×`height` image.
    pub fn to_index(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let c = self.u.round();
        let r = self.v.round();
        if c >= 0.0 && r >= 0.0 && (c as usize) < width && (r as usize) < height {
            Some((c as usize, r as usize))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub lidar_to_camera: RigidTransform,
    /// Mount of the lidar relative to the pose (vehicle) frame.
    pub vehicle_to_lidar: RigidTransform,
    pub track_width: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.track_width]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Calibration("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Calibration("focal lengths must be positive".into()));
        }
        if !(0.0..self.image_width as f64).contains(&self.cx)
            || !(0.0..self.image_height as f64).contains(&self.cy)
        {
            return Err(Error::Calibration(
                "principal point lies outside the image".into(),
            ));
        }
        if self.track_width <= 0.0 {
            return Err(Error::Calibration("track width must be positive".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }

    /// Project a lidar-frame point into the image.
    pub fn project_lidar(&self, p: &Vec3) -> Option<Pixel> {
        project_point(&self.lidar_to_camera.apply(p), self)
    }

    /// World → lidar transform for a scan taken at `pose`.
    pub fn world_to_lidar(&self, pose: &Pose) -> RigidTransform {
        self.vehicle_to_lidar
            .compose(&pose.vehicle_to_world().inverse())
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let file: CalibrationFile =
            serde_yaml::from_str(text).map_err(|e| Error::Calibration(e.to_string()))?;
        file.try_into()
    }

    pub fn to_yaml_string(&self) -> String {
        serde_yaml::to_string(&CalibrationFile::from(self)).expect("calibration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_yaml_string()).map_err(|e| Error::io(path, e))
    }
}

/// Pinhole projection with two-term radial distortion. `None` when the
/// point is not in front of the camera.
pub fn project_point(p: &Vec3, calib: &Calibration) -> Option<Pixel> {
    if p.z <= 1e-6 {
        return None;
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    let r2 = x * x + y * y;
    let d = 1.0 + calib.k1 * r2 + calib.k2 * r2 * r2;
    Some(Pixel::new(
        calib.cx + calib.fx * x * d,
        calib.cy + calib.fy * y * d,
    ))
}

/// Inverse of [`project_point`] at a known depth, ignoring distortion.
pub fn unproject_undistorted(px: &Pixel, depth: f64, calib: &Calibration) -> Vec3 {
    Vec3::new(
        (px.u - calib.cx) / calib.fx * depth,
        (px.v - calib.cy) / calib.fy * depth,
        depth,
    )
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixRepr {
    fn flatten(self) -> Vec<f64> {
        match self {
            MatrixRepr::Rows(rows) => rows.into_iter().flatten().collect(),
            MatrixRepr::Flat(v) => v,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    k1: f64,
    #[serde(default)]
    k2: f64,
    lidar_to_camera: MatrixRepr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vehicle_to_lidar: Option<MatrixRepr>,
    track_width: f64,
    image_width: usize,
    image_height: usize,
}

impl From<&Calibration> for CalibrationFile {
    fn from(c: &Calibration) -> Self {
        let rows = |t: &RigidTransform| {
            MatrixRepr::Rows(t.to_row_major().chunks(4).map(<[f64]>::to_vec).collect())
        };
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            k1: c.k1,
            k2: c.k2,
            lidar_to_camera: rows(&c.lidar_to_camera),
            vehicle_to_lidar: Some(rows(&c.vehicle_to_lidar)),
            track_width: c.track_width,
            image_width: c.image_width,
            image_height: c.image_height,
        }
    }
}

impl TryFrom<CalibrationFile> for Calibration {
    type Error = Error;

    fn try_from(f: CalibrationFile) -> Result<Self> {
        let calib = Calibration {
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            k1: f.k1,
            k2: f.k2,
            lidar_to_camera: RigidTransform::from_row_major(&f.lidar_to_camera.flatten())?,
            vehicle_to_lidar: match f.vehicle_to_lidar {
                Some(m) => RigidTransform::from_row_major(&m.flatten())?,
                None => RigidTransform::identity(),
            },
            track_width: f.track_width,
            image_width: f.image_width,
            image_height: f.image_height,
        };
        calib.validate()?;
        Ok(calib)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn calib() -> Calibration {
        Calibration {
            fx: 1000.0,
            fy: 1000.0,
            cx: 612.0,
            cy: 200.0,
            k1: 0.0,
            k2: 0.0,
            lidar_to_camera: RigidTransform::identity(),
            vehicle_to_lidar: RigidTransform::identity(),
            track_width: 1.6,
            image_width: 1224,
            image_height: 400,
        }
    }

    #[test]
    fn projects_principal_point_and_offset() {
        let c = calib();
        let p = project_point(&Vec3::new(0.0, 0.0, 5.0), &c).unwrap();
        assert_eq!((p.u, p.v), (612.0, 200.0));
        let p = project_point(&Vec3::new(1.0, 0.0, 5.0), &c).unwrap();
        assert_abs_diff_eq!(p.u, 812.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.v, 200.0, epsilon = 1e-12);
        assert!(project_point(&Vec3::new(0.0, 0.0, -1.0), &c).is_none());
        assert!(project_point(&Vec3::new(1.0, 1.0, 1e-7), &c).is_none());
    }

    #[test]
    fn radial_distortion_scales_normalized_radius() {
        let mut c = calib();
        c.k1 = 0.1;
        c.k2 = 0.01;
        // x/z = 0.5 → r² = 0.25, d = 1 + 0.025 + 0.000625
        let p = project_point(&Vec3::new(1.0, 0.0, 2.0), &c).unwrap();
        assert_abs_diff_eq!(p.u, 612.0 + 1000.0 * 0.5 * 1.025625, epsilon = 1e-9);
    }

    #[test]
    fn transform_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(transform(&p, &RigidTransform::identity()), p);
        let t = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(transform(&p, &t), Vec3::new(1.0, 2.0, 4.0));
        let yaw = RigidTransform::from_yaw(PI / 2.0, Vec3::zeros());
        let q = transform(&Vec3::new(1.0, 0.0, 0.0), &yaw);
        assert_abs_diff_eq!(q.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fov_examples() {
        let pts = [0.0f64, 50.0, -44.0, 46.0, 180.0]
            .iter()
            .map(|deg| {
                let a = deg.to_radians();
                LidarPoint::new(Vec3::new(10.0 * a.cos(), 10.0 * a.sin(), -1.0), 0)
            })
            .collect();
        let scan = RingScan::from_points(pts, 1, 0.0);
        assert_eq!(limit_fov(&scan, 360.0), scan);
        let lim = limit_fov(&scan, 90.0);
        let kept: Vec<i64> = lim.rings[0]
            .iter()
            .map(|p| p.azimuth.to_degrees().round() as i64)
            .collect();
        assert_eq!(kept, vec![-44, 0]);
    }

    #[test]
    fn calibration_yaml_round_trip() {
        let mut c = calib();
        c.lidar_to_camera = RigidTransform::new(
            Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            Vec3::new(0.1, -0.2, 0.3),
        );
        c.k1 = -0.05;
        let text = c.to_yaml_string();
        assert_eq!(Calibration::from_yaml_str(&text).unwrap(), c);
    }

    #[test]
    fn calibration_accepts_flat_matrix_and_rejects_bad_values() {
        let text = "fx: 500\nfy: 500\ncx: 320\ncy: 120\nk1: 0\nk2: 0\n\
            lidar_to_camera: [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]\n\
            track_width: 1.6\nimage_width: 640\nimage_height: 240\n";
        let c = Calibration::from_yaml_str(text).unwrap();
        assert_eq!(c.lidar_to_camera, RigidTransform::identity());

        let bad = text.replace("fx: 500", "fx: -5");
        assert!(Calibration::from_yaml_str(&bad).is_err());
        let bad = text.replace("cx: 320", "cx: 700");
        assert!(Calibration::from_yaml_str(&bad).is_err());
        let bad = text.replace("[1,0,0,0,", "[2,0,0,0,");
        assert!(Calibration::from_yaml_str(&bad).is_err());
    }

    #[test]
    fn pose_heading_is_normalized() {
        let p = Pose::new(0.0, Vec3::zeros(), 3.0 * PI);
        assert_abs_diff_eq!(p.heading, PI, epsilon = 1e-12);
        let p = Pose::new(0.0, Vec3::zeros(), -PI);
        assert_abs_diff_eq!(p.heading, PI, epsilon = 1e-12);
    }

    #[test]
    fn world_to_lidar_maps_pose_origin_below_sensor() {
        let mut c = calib();
        c.vehicle_to_lidar = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -1.8));
        let pose = Pose::new(0.0, Vec3::new(5.0, 3.0, 0.0), PI / 2.0);
        let t = c.world_to_lidar(&pose);
        let origin = t.apply(&pose.position);
        assert_abs_diff_eq!(origin, Vec3::new(0.0, 0.0, -1.8), epsilon = 1e-12);
        // a point one meter ahead of the vehicle lies on lidar +x
        let ahead = t.apply(&(pose.position + pose.forward()));
        assert_abs_diff_eq!(ahead, Vec3::new(1.0, 0.0, -1.8), epsilon = 1e-12);
        let moved = pose.transformed(&t);
        assert_abs_diff_eq!(moved.heading, 0.0, epsilon = 1e-12);
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (-PI..PI, -PI..PI, -PI..PI, arb_vec()).prop_map(|(a, b, c, t)| {
            let r = nalgebra::Rotation3::from_euler_angles(a, b, c);
            RigidTransform::new(*r.matrix(), t)
        })
    }

    proptest! {
        #[test]
        fn projection_inverts_unprojection(u in 0.0..1224.0f64, v in 0.0..400.0f64, depth in 0.5..80.0f64) {
            let c = calib();
            let px = Pixel::new(u, v);
            let back = project_point(&unproject_undistorted(&px, depth, &c), &c).unwrap();
            prop_assert!((back.u - u).abs() < 1e-6 && (back.v - v).abs() < 1e-6);
        }

        #[test]
        fn transform_preserves_distances(a in arb_vec(), b in arb_vec(), t in arb_transform()) {
            let d0 = (a - b).norm();
            let d1 = (transform(&a, &t) - transform(&b, &t)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
            let back = t.inverse().apply(&t.apply(&a));
            prop_assert!((back - a).norm() < 1e-9);
        }

        #[test]
        fn fov_is_idempotent(az in proptest::collection::vec(-PI..PI, 0..60), fov in 1.0..360.0f64) {
            let pts = az.iter().enumerate()
                .map(|(i, a)| LidarPoint::new(Vec3::new(a.cos(), a.sin(), 0.0), (i % 3) as u16))
                .collect();
            let scan = RingScan::from_points(pts, 3, 0.0);
            let once = limit_fov(&scan, fov);
            prop_assert_eq!(limit_fov(&once, fov), once);
        }
    }
}
