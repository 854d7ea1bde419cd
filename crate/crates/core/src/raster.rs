//! Pixel-space rasterization: polygon fill and linear interpolation over a
//! Delaunay triangulation of sparse samples. Pixel centers are at integer
//! coordinates.

use crate::exec::Execution;
use crate::geometry::Pixel;
use crate::grid::{LabelImage, Mask};

/// Even-odd fill of a closed polygon, sampled at pixel centers.
pub fn fill_polygon(poly: &[Pixel], width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    if poly.len() < 3 {
        return mask;
    }
    let mut xs: Vec<f64> = Vec::new();
    for row in 0..height {
        let y = row as f64;
        xs.clear();
        for (i, a) in poly.iter().enumerate() {
            let b = &poly[(i + 1) % poly.len()];
            // half-open in y so shared vertices are counted once
            if (a.v <= y && y < b.v) || (b.v <= y && y < a.v) {
                xs.push(a.u + (y - a.v) * (b.u - a.u) / (b.v - a.v));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let start = span[0].ceil().max(0.0);
            let end = span[1].ceil().min(width as f64);
            let mut c = start;
            while c < end {
                mask.set(c as usize, row, true);
                c += 1.0;
            }
        }
    }
    mask
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[Pixel]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let a = &poly[i];
            let b = &poly[(i + 1) % n];
            a.u * b.v - b.u * a.v
        })
        .sum();
    twice.abs() / 2.0
}

/// A labeled sample snapped to a pixel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSample {
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Triangulate samples in pixel space and interpolate barycentrically.
/// Triangles with an edge longer than `max_edge_px` are skipped. Coverage is
/// the union of the remaining triangles (closed). Fewer than three distinct
/// samples give an empty image.
pub fn interpolate_samples(
    samples: &[PixelSample],
    width: usize,
    height: usize,
    max_edge_px: f64,
    exec: Execution,
) -> LabelImage {
    let mut out = LabelImage::empty(width, height);
    if samples.len() < 3 {
        return out;
    }
    let pts: Vec<delaunator::Point> = samples
        .iter()
        .map(|s| delaunator::Point {
            x: s.x as f64,
            y: s.y as f64,
        })
        .collect();
    let tri = delaunator::triangulate(&pts);
    let max2 = max_edge_px * max_edge_px;
    let triangles: Vec<[usize; 3]> = tri
        .triangles
        .chunks_exact(3)
        .map(|t| [t[0], t[1], t[2]])
        .filter(|t| {
            (0..3).all(|k| {
                let a = &pts[t[k]];
                let b = &pts[t[(k + 1) % 3]];
                (a.x - b.x).powi(2) + (a.y - b.y).powi(2) <= max2
            })
        })
        .collect();

    // bucket triangles by the rows they touch so rows can be filled independently
    let mut by_row: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (ti, t) in triangles.iter().enumerate() {
        let ys = t.map(|i| samples[i].y);
        let (lo, hi) = (ys.iter().min().unwrap(), ys.iter().max().unwrap());
        for r in by_row.iter_mut().take(*hi + 1).skip(*lo) {
            r.push(ti as u32);
        }
    }

    let mut rows: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); height];
    exec.for_each_chunk_mut(&mut rows, 1, |row, slot| {
        let (vals, cov) = &mut slot[0];
        *vals = vec![0.0; width];
        *cov = vec![false; width];
        let y = row as f64;
        for &ti in &by_row[row] {
            let t = triangles[ti as usize];
            let [a, b, c] = t.map(|i| samples[i]);
            let (ax, ay) = (a.x as f64, a.y as f64);
            let (bx, by) = (b.x as f64, b.y as f64);
            let (cx, cy) = (c.x as f64, c.y as f64);
            let det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy);
            if det.abs() < 1e-12 {
                continue;
            }
            let x_lo = a.x.min(b.x).min(c.x);
            let x_hi = a.x.max(b.x).max(c.x);
            for col in x_lo..=x_hi {
                let x = col as f64;
                let l1 = ((by - cy) * (x - cx) + (cx - bx) * (y - cy)) / det;
                let l2 = ((cy - ay) * (x - cx) + (ax - cx) * (y - cy)) / det;
                let l3 = 1.0 - l1 - l2;
                const TOL: f64 = -1e-9;
                if l1 >= TOL && l2 >= TOL && l3 >= TOL {
                    let v = l1 * a.value + l2 * b.value + l3 * c.value;
                    vals[col] = v.clamp(0.0, 1.0);
                    cov[col] = true;
                }
            }
        }
    });
    for (row, (vals, cov)) in rows.into_iter().enumerate() {
        let base = row * width;
        out.values[base..base + width].copy_from_slice(&vals);
        out.coverage[base..base + width].copy_from_slice(&cov);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(u: f64, v: f64) -> Pixel {
        Pixel::new(u, v)
    }

    #[test]
    fn rectangle_fill_covers_interior() {
        let poly = [px(2.0, 1.0), px(6.0, 1.0), px(6.0, 4.0), px(2.0, 4.0)];
        let m = fill_polygon(&poly, 10, 8);
        for y in 0..8 {
            for x in 0..10 {
                let inside = (2..6).contains(&x) && (1..4).contains(&y);
                assert_eq!(m.get(x, y), inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn degenerate_polygon_is_empty() {
        assert_eq!(fill_polygon(&[], 5, 5).count(), 0);
        assert_eq!(fill_polygon(&[px(1.0, 1.0), px(3.0, 3.0)], 5, 5).count(), 0);
    }

    #[test]
    fn quadrilateral_area_matches_shoelace() {
        let poly = [
            px(100.5, 300.2),
            px(400.7, 310.9),
            px(330.1, 120.4),
            px(180.3, 110.6),
        ];
        let m = fill_polygon(&poly, 640, 480);
        let area = polygon_area(&poly);
        let rel = (m.count() as f64 - area).abs() / area;
        assert!(rel < 0.02, "filled {} vs area {area}", m.count());
    }

    #[test]
    fn constant_field_and_centroid() {
        let s = |x, y, value| PixelSample { x, y, value };
        let img = interpolate_samples(
            &[s(0, 0, 1.0), s(30, 0, 1.0), s(0, 30, 1.0)],
            40,
            40,
            200.0,
            Execution::Sequential,
        );
        assert!(img.covered_count() > 400);
        for (v, c) in img.values.iter().zip(&img.coverage) {
            if *c {
                assert!((*v - 1.0).abs() < 1e-12);
            }
        }

        let img = interpolate_samples(
            &[s(0, 0, 0.0), s(30, 0, 0.0), s(0, 30, 1.0)],
            40,
            40,
            200.0,
            Execution::Sequential,
        );
        // centroid (10, 10) is a pixel center
        assert!((img.get(10, 10).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_samples_or_long_edges_leave_no_coverage() {
        let s = |x, y| PixelSample { x, y, value: 0.5 };
        let img = interpolate_samples(&[s(0, 0), s(5, 5)], 10, 10, 200.0, Execution::Sequential);
        assert_eq!(img.covered_count(), 0);
        let img = interpolate_samples(
            &[s(0, 0), s(300, 0), s(0, 5)],
            400,
            10,
            200.0,
            Execution::Sequential,
        );
        assert_eq!(img.covered_count(), 0);
    }
}
