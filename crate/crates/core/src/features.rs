//! Patch feature maps: the PFMAP1 container and feature providers.
//!
//! PFMAP1 layout (little endian): ASCII magic `PFMAP1`, then `Hp`, `Wp`, `D`
//! as u32, then `Hp·Wp·D` f32 values in row-major (row, column, channel)
//! order.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;

use crate::error::{Error, Result};

pub const PFMAP_MAGIC: &[u8; 6] = b"PFMAP1";

/// `Hp × Wp` grid of `D`-dimensional patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub patch_size: usize,
    pub frame_id: String,
}

impl PatchFeatureMap {
    pub fn zeros(rows: usize, cols: usize, dim: usize, patch_size: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
            patch_size,
            frame_id: String::new(),
        }
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Feature of patch `i` in row-major patch order.
    pub fn feature(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(PFMAP_MAGIC)?;
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for v in &self.data {
            w.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ingest::write_atomic(path, |tmp| {
            let f = std::fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))
        })
    }
}

/// Read a PFMAP1 file. When `expected_dim` is given the header's `D` must
/// match it.
pub fn load_feature_map(
    path: &Path,
    patch_size: usize,
    expected_dim: Option<usize>,
) -> Result<PatchFeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut map = parse_feature_map(&bytes).map_err(|reason| Error::format(path, reason))?;
    if let Some(d) = expected_dim {
        if d != map.dim {
            return Err(Error::format(
                path,
                format!("feature dimension {} does not match configured {d}", map.dim),
            ));
        }
    }
    map.patch_size = patch_size;
    map.frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(map)
}

fn parse_feature_map(bytes: &[u8]) -> std::result::Result<PatchFeatureMap, String> {
    let mut r = bytes;
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| "file too short for PFMAP1 header".to_string())?;
    if &magic != PFMAP_MAGIC {
        return Err("bad magic, expected PFMAP1".into());
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| "truncated PFMAP1 header".to_string())? as usize;
    }
    let [rows, cols, dim] = dims;
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(dim))
        .ok_or("header dimensions overflow")?;
    if r.len() != n * 4 {
        return Err(format!(
            "payload holds {} bytes, header {rows}x{cols}x{dim} needs {}",
            r.len(),
            n * 4
        ));
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| e.to_string())?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(PatchFeatureMap {
        rows,
        cols,
        dim,
        data,
        patch_size: 0,
        frame_id: String::new(),
    })
}

/// Source of patch features for a frame.
pub trait FeatureProvider: Sync {
    fn features(&self, frame_id: &str, image: &RgbImage) -> Result<PatchFeatureMap>;
}

/// Loads `<dir>/<frame_id>.pfmap`.
#[derive(Clone, Debug)]
pub struct FileFeatures {
    pub dir: PathBuf,
    pub patch_size: usize,
    pub expected_dim: Option<usize>,
}

impl FeatureProvider for FileFeatures {
    fn features(&self, frame_id: &str, image: &RgbImage) -> Result<PatchFeatureMap> {
        let path = self.dir.join(format!("{frame_id}.pfmap"));
        let map = load_feature_map(&path, self.patch_size, self.expected_dim)?;
        let (rows, cols) = patch_grid_dims(
            image.width() as usize,
            image.height() as usize,
            self.patch_size,
        );
        if (map.rows, map.cols) != (rows, cols) {
            return Err(Error::format(
                &path,
                format!(
                    "grid {}x{} does not match image grid {rows}x{cols}",
                    map.rows, map.cols
                ),
            ));
        }
        Ok(map)
    }
}

/// Feature maps held in memory, keyed by frame id.
#[derive(Clone, Debug, Default)]
pub struct MemoryFeatures {
    pub maps: std::collections::HashMap<String, PatchFeatureMap>,
}

impl FeatureProvider for MemoryFeatures {
    fn features(&self, frame_id: &str, _image: &RgbImage) -> Result<PatchFeatureMap> {
        self.maps.get(frame_id).cloned().ok_or_else(|| {
            Error::format(Path::new(frame_id), "no feature map for frame".to_string())
        })
    }
}

/// Per-patch mean color and color standard deviation (D = 6), scaled to
/// [0, 1]. Enough to separate road from snow in test scenes.
#[derive(Clone, Copy, Debug)]
pub struct ToyExtractor {
    pub patch_size: usize,
}

impl ToyExtractor {
    pub const DIM: usize = 6;

    pub fn extract(&self, image: &RgbImage) -> PatchFeatureMap {
        let ps = self.patch_size;
        let (rows, cols) = patch_grid_dims(image.width() as usize, image.height() as usize, ps);
        let mut map = PatchFeatureMap::zeros(rows, cols, Self::DIM, ps);
        let n = (ps * ps) as f64;
        for pr in 0..rows {
            for pc in 0..cols {
                let mut sum = [0f64; 3];
                let mut sq = [0f64; 3];
                for y in pr * ps..(pr + 1) * ps {
                    for x in pc * ps..(pc + 1) * ps {
                        let px = image.get_pixel(x as u32, y as u32).0;
                        for c in 0..3 {
                            let v = px[c] as f64 / 255.0;
                            sum[c] += v;
                            sq[c] += v * v;
                        }
                    }
                }
                let f = map.feature_mut(pr * cols + pc);
                for c in 0..3 {
                    let mean = sum[c] / n;
                    f[c] = mean as f32;
                    f[3 + c] = (sq[c] / n - mean * mean).max(0.0).sqrt() as f32;
                }
            }
        }
        map
    }
}

impl FeatureProvider for ToyExtractor {
    fn features(&self, frame_id: &str, image: &RgbImage) -> Result<PatchFeatureMap> {
        let mut map = self.extract(image);
        map.frame_id = frame_id.to_string();
        Ok(map)
    }
}

/// Patch grid for an image: `floor(size / patch)`, remainder cropped.
pub fn patch_grid_dims(width: usize, height: usize, patch_size: usize) -> (usize, usize) {
    (height / patch_size, width / patch_size)
}
