//! Dataset loading, timestamp synchronization and distance-based sampling.
//!
//! A sequence directory looks like this:
//!
//! ```text
//! calib.yaml
//! poses.csv            timestamp,x,y,z,yaw  (or timestamp,x,y,z,qw,qx,qy,qz)
//! images.csv           frame_id,timestamp
//! scans.csv            scan_id,timestamp
//! images/<frame_id>.png
//! scans/<scan_id>.bin
//! features/<frame_id>.pfmap   (optional, for file features)
//! gt/<frame_id>.png           (optional, ground-truth masks)
//! ```
//!
//! Scan files: u32 point count, then per point x, y, z (f32), ring (u16),
//! azimuth (f32), all little endian.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::SequenceConfig;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Calibration, LidarPoint, Pose, RingScan, Vec3};
use crate::grid::Mask;

const SCAN_POINT_BYTES: usize = 18;

/// Write through a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    // keep the extension last so format-sniffing writers still work
    let tmp = path.with_file_name(format!(".tmp-{}-{file_name}", std::process::id()));
    match write(&tmp) {
        Ok(()) => std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e)),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn write_scan<W: Write>(scan: &RingScan, mut w: W) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(scan.point_count() as u32)?;
    for p in scan.points() {
        w.write_f32::<LittleEndian>(p.xyz.x as f32)?;
        w.write_f32::<LittleEndian>(p.xyz.y as f32)?;
        w.write_f32::<LittleEndian>(p.xyz.z as f32)?;
        w.write_u16::<LittleEndian>(p.ring)?;
        w.write_f32::<LittleEndian>(p.azimuth as f32)?;
    }
    Ok(())
}

pub fn save_scan(scan: &RingScan, path: &Path) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut buf = Vec::with_capacity(4 + scan.point_count() * SCAN_POINT_BYTES);
        write_scan(scan, &mut buf).expect("writing to a Vec");
        std::fs::write(tmp, buf).map_err(|e| Error::io(tmp, e))
    })
}

pub fn parse_scan(bytes: &[u8], timestamp: f64) -> std::result::Result<RingScan, String> {
    let mut r = bytes;
    let n = r
        .read_u32::<LittleEndian>()
        .map_err(|_| "missing point count".to_string())? as usize;
    if r.len() != n * SCAN_POINT_BYTES {
        return Err(format!(
            "expected {} payload bytes for {n} points, found {}",
            n * SCAN_POINT_BYTES,
            r.len()
        ));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut f = [0f32; 3];
        r.read_f32_into::<LittleEndian>(&mut f).map_err(|e| e.to_string())?;
        let ring = r.read_u16::<LittleEndian>().map_err(|e| e.to_string())?;
        let azimuth = r.read_f32::<LittleEndian>().map_err(|e| e.to_string())?;
        if f.iter().chain([&azimuth]).any(|v| !v.is_finite()) {
            return Err("non-finite point".into());
        }
        points.push(LidarPoint {
            xyz: Vec3::new(f[0] as f64, f[1] as f64, f[2] as f64),
            ring,
            azimuth: normalize_angle(azimuth as f64),
        });
    }
    Ok(RingScan::from_points(points, 0, timestamp))
}

pub fn load_scan(path: &Path, timestamp: f64) -> Result<RingScan> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_scan(&bytes, timestamp).map_err(|reason| Error::format(path, reason))
}

#[derive(Debug, Deserialize)]
struct PoseRow {
    timestamp: f64,
    x: f64,
    y: f64,
    z: f64,
    yaw: Option<f64>,
    qw: Option<f64>,
    qx: Option<f64>,
    qy: Option<f64>,
    qz: Option<f64>,
}

/// Read a pose CSV. Either a `yaw` column or a full `qw,qx,qy,qz`
/// quaternion must be present; only yaw is kept.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut poses: Vec<Pose> = Vec::new();
    for (line, row) in rdr.deserialize::<PoseRow>().enumerate() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let yaw = match (row.yaw, row.qw, row.qx, row.qy, row.qz) {
            (Some(yaw), ..) => yaw,
            (None, Some(w), Some(x), Some(y), Some(z)) => {
                (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
            }
            _ => {
                return Err(Error::format(
                    path,
                    format!("row {}: needs yaw or qw,qx,qy,qz", line + 2),
                ))
            }
        };
        if let Some(prev) = poses.last() {
            if row.timestamp <= prev.timestamp {
                return Err(Error::format(
                    path,
                    format!("row {}: timestamps must strictly increase", line + 2),
                ));
            }
        }
        poses.push(Pose::new(row.timestamp, Vec3::new(row.x, row.y, row.z), yaw));
    }
    Ok(poses)
}

pub fn save_poses(poses: &[Pose], path: &Path) -> Result<()> {
    let mut out = String::from("timestamp,x,y,z,yaw\n");
    for p in poses {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.timestamp, p.position.x, p.position.y, p.position.z, p.heading
        ));
    }
    write_atomic(path, |tmp| std::fs::write(tmp, out).map_err(|e| Error::io(tmp, e)))
}

/// `(id, timestamp)` rows of an index CSV with a header line.
pub fn load_index(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    for row in rdr.deserialize::<(String, f64)>() {
        rows.push(row.map_err(|e| Error::format(path, e.to_string()))?);
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(rows)
}

pub fn save_index(rows: &[(String, f64)], header: &str, path: &Path) -> Result<()> {
    let mut out = format!("{header},timestamp\n");
    for (id, t) in rows {
        out.push_str(&format!("{id},{t}\n"));
    }
    write_atomic(path, |tmp| std::fs::write(tmp, out).map_err(|e| Error::io(tmp, e)))
}

/// Pose at time `t`, linearly interpolated (heading along the shorter arc).
/// `None` outside the pose time span.
pub fn interpolate_pose(poses: &[Pose], t: f64) -> Option<Pose> {
    let first = poses.first()?;
    let last = poses.last()?;
    if t < first.timestamp || t > last.timestamp {
        return None;
    }
    let hi = poses.partition_point(|p| p.timestamp < t);
    if poses[hi].timestamp == t {
        return Some(poses[hi]);
    }
    let (a, b) = (&poses[hi - 1], &poses[hi]);
    let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let dh = normalize_angle(b.heading - a.heading);
    Some(Pose::new(
        t,
        a.position + (b.position - a.position) * s,
        a.heading + s * dh,
    ))
}

/// Poses from time `t` onward until `travel_m` of path length is covered.
/// The interpolated pose at `t` comes first.
pub fn future_poses(poses: &[Pose], t: f64, travel_m: f64) -> Vec<Pose> {
    let Some(start) = interpolate_pose(poses, t) else {
        return Vec::new();
    };
    let mut out = vec![start];
    let mut travelled = 0.0;
    for p in poses.iter().skip_while(|p| p.timestamp <= t) {
        travelled += (p.position - out.last().unwrap().position).norm();
        if travelled > travel_m {
            break;
        }
        out.push(*p);
    }
    out
}

/// One image matched to one scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePairing {
    pub frame_id: String,
    pub image_index: usize,
    pub scan_index: usize,
    pub image_timestamp: f64,
    pub scan_timestamp: f64,
    pub pose: Pose,
    pub future_poses: Vec<Pose>,
}

impl FramePairing {
    pub fn dt(&self) -> f64 {
        (self.image_timestamp - self.scan_timestamp).abs()
    }
}

/// Pair every image with its nearest scan within `tol` seconds. A scan is
/// never shared: when several images claim it, the closest in time wins
/// (earliest on ties). Frames outside the pose time span are dropped.
/// Inputs must be sorted by timestamp.
pub fn synchronize(
    images: &[(String, f64)],
    scans: &[(String, f64)],
    poses: &[Pose],
    tol: f64,
    future_travel_m: f64,
) -> Vec<FramePairing> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; scans.len()];
    for (ii, (_, ti)) in images.iter().enumerate() {
        let hi = scans.partition_point(|(_, ts)| *ts < *ti);
        let candidates = [hi.checked_sub(1), (hi < scans.len()).then_some(hi)];
        let nearest = candidates
            .into_iter()
            .flatten()
            .map(|si| (si, (scans[si].1 - ti).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((si, dt)) = nearest else { continue };
        if dt > tol {
            continue;
        }
        match best[si] {
            Some((_, prev)) if prev <= dt => {}
            _ => best[si] = Some((ii, dt)),
        }
    }
    let mut out: Vec<FramePairing> = best
        .iter()
        .enumerate()
        .filter_map(|(si, b)| {
            let (ii, _) = (*b)?;
            let ts = scans[si].1;
            let pose = interpolate_pose(poses, ts)?;
            Some(FramePairing {
                frame_id: images[ii].0.clone(),
                image_index: ii,
                scan_index: si,
                image_timestamp: images[ii].1,
                scan_timestamp: ts,
                pose,
                future_poses: future_poses(poses, ts, future_travel_m),
            })
        })
        .collect();
    out.sort_by_key(|f| f.image_index);
    if out.is_empty() && !images.is_empty() {
        log::warn!("no image/scan pair within {tol} s");
    }
    out
}

/// Anything carrying a world position for distance sampling.
pub trait Located {
    fn position(&self) -> Vec3;
}

impl Located for FramePairing {
    fn position(&self) -> Vec3 {
        self.pose.position
    }
}

impl Located for Pose {
    fn position(&self) -> Vec3 {
        self.position
    }
}

/// Greedy spacing: keep the first frame, then every frame at least
/// `spacing_m` away from the last kept one.
pub fn sample_by_distance<T: Located>(frames: Vec<T>, spacing_m: f64) -> Vec<T> {
    let mut last: Option<Vec3> = None;
    frames
        .into_iter()
        .filter(|f| {
            let p = f.position();
            match last {
                Some(q) if (p - q).norm() < spacing_m => false,
                _ => {
                    last = Some(p);
                    true
                }
            }
        })
        .collect()
}

/// A synchronized frame with its sensor data loaded.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub frame_id: String,
    pub timestamp: f64,
    pub image: RgbImage,
    pub scan: RingScan,
    pub pose: Pose,
    pub future_poses: Vec<Pose>,
    pub calib: Arc<Calibration>,
}

impl Located for FrameSample {
    fn position(&self) -> Vec3 {
        self.pose.position
    }
}

/// An opened sequence directory.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub root: PathBuf,
    pub calib: Arc<Calibration>,
    pub poses: Vec<Pose>,
    pub frames: Vec<FramePairing>,
    scans: Vec<(String, f64)>,
}

impl Sequence {
    /// Open, synchronize, drop excluded frames, then apply distance sampling.
    pub fn open(root: &Path, cfg: &SequenceConfig) -> Result<Self> {
        let calib = Arc::new(Calibration::load(&root.join("calib.yaml"))?);
        let poses = load_poses(&root.join("poses.csv"))?;
        let images = load_index(&root.join("images.csv"))?;
        let scans = load_index(&root.join("scans.csv"))?;
        let frames = synchronize(
            &images,
            &scans,
            &poses,
            cfg.sync_tolerance_s,
            cfg.future_travel_m,
        )
        .into_iter()
        .filter(|f| !cfg.excluded_frames.contains(&f.frame_id))
        .collect();
        let frames = sample_by_distance(frames, cfg.sample_spacing_m);
        Ok(Self {
            root: root.to_path_buf(),
            calib,
            poses,
            frames,
            scans,
        })
    }

    pub fn image_path(&self, frame_id: &str) -> PathBuf {
        self.root.join("images").join(format!("{frame_id}.png"))
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn gt_path(&self, frame_id: &str) -> PathBuf {
        self.root.join("gt").join(format!("{frame_id}.png"))
    }

    pub fn load_frame(&self, pairing: &FramePairing) -> Result<FrameSample> {
        let img_path = self.image_path(&pairing.frame_id);
        let image = load_rgb(&img_path)?;
        let (w, h) = self.calib.image_size();
        if (image.width() as usize, image.height() as usize) != (w, h) {
            return Err(Error::format(
                &img_path,
                format!(
                    "image is {}x{}, calibration expects {w}x{h}",
                    image.width(),
                    image.height()
                ),
            ));
        }
        let scan_id = &self.scans[pairing.scan_index].0;
        let scan = load_scan(
            &self.root.join("scans").join(format!("{scan_id}.bin")),
            pairing.scan_timestamp,
        )?;
        Ok(FrameSample {
            frame_id: pairing.frame_id.clone(),
            timestamp: pairing.scan_timestamp,
            image,
            scan,
            pose: pairing.pose,
            future_poses: pairing.future_poses.clone(),
            calib: self.calib.clone(),
        })
    }

    /// Ground-truth mask for a frame, when present.
    pub fn ground_truth(&self, frame_id: &str) -> Result<Option<Mask>> {
        let p = self.gt_path(frame_id);
        if !p.exists() {
            return Ok(None);
        }
        Mask::load_png(&p).map(Some)
    }
}
