//! Permutohedral lattice Gaussian filtering.
//!
//! Approximates `out_i = Σ_j exp(-|f_i - f_j|² / 2) · v_j` in `O(N·d²)` by
//! splatting onto the vertices of the enclosing lattice simplex, blurring
//! along each lattice direction with `[1/2, 1, 1/2]`, and slicing back with
//! the same barycentric weights.

use rustc_hash::FxHashMap;

use crate::exec::Execution;

pub struct Lattice {
    d: usize,
    n: usize,
    /// Per point, `d + 1` lattice vertex indices (offset by one; slot 0 is
    /// the zero vertex used for missing neighbours).
    offsets: Vec<u32>,
    weights: Vec<f64>,
    vertices: usize,
    /// Per direction and vertex, the two blur neighbours (0 if absent).
    neighbours: Vec<[u32; 2]>,
    alpha: f64,
}

struct Embedding {
    keys: Vec<Vec<i32>>,
    bary: Vec<f64>,
}

fn embed(f: &[f64], d: usize, scale: &[f64]) -> Embedding {
    let mut elevated = vec![0.0; d + 1];
    let mut sm = 0.0;
    for j in (1..=d).rev() {
        let cf = f[j - 1] * scale[j - 1];
        elevated[j] = sm - j as f64 * cf;
        sm += cf;
    }
    elevated[0] = sm;

    let down = 1.0 / (d + 1) as f64;
    let up = (d + 1) as i32;
    let mut rem0 = vec![0i32; d + 1];
    let mut sum = 0i32;
    for i in 0..=d {
        let rd = (down * elevated[i]).round() as i32;
        rem0[i] = rd * up;
        sum += rd;
    }

    let mut rank = vec![0i32; d + 1];
    for i in 0..d {
        let di = elevated[i] - rem0[i] as f64;
        for j in i + 1..=d {
            if di < elevated[j] - rem0[j] as f64 {
                rank[i] += 1;
            } else {
                rank[j] += 1;
            }
        }
    }
    for i in 0..=d {
        rank[i] += sum;
        if rank[i] < 0 {
            rank[i] += up;
            rem0[i] += up;
        } else if rank[i] > d as i32 {
            rank[i] -= up;
            rem0[i] -= up;
        }
    }

    let mut bary = vec![0.0; d + 2];
    for i in 0..=d {
        let v = (elevated[i] - rem0[i] as f64) * down;
        let r = rank[i] as usize;
        bary[d - r] += v;
        bary[d - r + 1] -= v;
    }
    bary[0] += 1.0 + bary[d + 1];
    bary.truncate(d + 1);

    // vertex `remainder` of the simplex: rem0 + canonical simplex offsets
    let keys = (0..=d)
        .map(|remainder| {
            (0..d)
                .map(|i| {
                    let r = rank[i] as usize;
                    let c = if r <= d - remainder {
                        remainder as i32
                    } else {
                        remainder as i32 - up
                    };
                    rem0[i] + c
                })
                .collect()
        })
        .collect();
    Embedding { keys, bary }
}

impl Lattice {
    /// Build the lattice for `n` points whose `d`-dimensional features are
    /// stored row-major in `features`. Features must already be divided by
    /// the kernel standard deviations.
    pub fn new(features: &[f64], d: usize, exec: Execution) -> Self {
        assert!(d > 0 && features.len().is_multiple_of(d));
        let n = features.len() / d;
        let inv_std = (d + 1) as f64 * (2.0f64 / 3.0).sqrt();
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        let embeddings = exec.map_range(n, |i| embed(&features[i * d..(i + 1) * d], d, &scale));

        let mut table: FxHashMap<Vec<i32>, u32> = FxHashMap::default();
        let mut keys: Vec<Vec<i32>> = Vec::new();
        let mut offsets = Vec::with_capacity(n * (d + 1));
        let mut weights = Vec::with_capacity(n * (d + 1));
        for e in embeddings {
            for (key, w) in e.keys.into_iter().zip(e.bary) {
                let next = keys.len() as u32 + 1;
                let id = *table.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                offsets.push(id);
                weights.push(w);
            }
        }
        let vertices = keys.len();

        let mut neighbours = Vec::with_capacity((d + 1) * vertices);
        for j in 0..=d {
            neighbours.extend(exec.map_slice(&keys, |key| {
                let mut n1: Vec<i32> = key.iter().map(|k| k - 1).collect();
                let mut n2: Vec<i32> = key.iter().map(|k| k + 1).collect();
                if j < d {
                    n1[j] = key[j] + d as i32;
                    n2[j] = key[j] - d as i32;
                }
                [
                    table.get(&n1).copied().unwrap_or(0),
                    table.get(&n2).copied().unwrap_or(0),
                ]
            }));
        }

        Self {
            d,
            n,
            offsets,
            weights,
            vertices,
            neighbours,
            alpha: 1.0 / (1.0 + 2f64.powi(-(d as i32))),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    /// Filter `c`-channel values stored row-major per point.
    pub fn filter(&self, values: &[f64], c: usize, exec: Execution) -> Vec<f64> {
        assert_eq!(values.len(), self.n * c);
        let d1 = self.d + 1;
        let mut lat = vec![0.0; (self.vertices + 1) * c];
        for i in 0..self.n {
            for r in 0..d1 {
                let o = self.offsets[i * d1 + r] as usize;
                let w = self.weights[i * d1 + r];
                for k in 0..c {
                    lat[o * c + k] += w * values[i * c + k];
                }
            }
        }

        let m = self.vertices;
        for j in 0..=self.d {
            let nb = &self.neighbours[j * m..(j + 1) * m];
            let old = &lat;
            let mut next = vec![0.0; (m + 1) * c];
            exec.for_each_chunk_mut(&mut next[c..], c * 1024, |chunk_idx, out| {
                let base = chunk_idx * 1024;
                for (local, slot) in out.chunks_mut(c).enumerate() {
                    let v = base + local;
                    let [a, b] = nb[v];
                    let (a, b) = (a as usize, b as usize);
                    for k in 0..c {
                        slot[k] = old[(v + 1) * c + k] + 0.5 * (old[a * c + k] + old[b * c + k]);
                    }
                }
            });
            lat = next;
        }

        let alpha = self.alpha;
        let mut out = vec![0.0; self.n * c];
        exec.for_each_chunk_mut(&mut out, c * 1024, |chunk_idx, out| {
            let base = chunk_idx * 1024;
            for (local, slot) in out.chunks_mut(c).enumerate() {
                let i = base + local;
                for r in 0..d1 {
                    let o = self.offsets[i * d1 + r] as usize;
                    let w = self.weights[i * d1 + r] * alpha;
                    for k in 0..c {
                        slot[k] += w * lat[o * c + k];
                    }
                }
            }
        });
        out
    }
}
