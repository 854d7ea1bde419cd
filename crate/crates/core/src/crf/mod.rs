//! Fully connected two-label CRF with Gaussian edge potentials, solved by
//! mean-field inference.
//!
//! Unaries are `-ln p` for road and `-ln (1 - p)` for background with `p`
//! clipped away from 0 and 1. The pairwise term is Potts over a spatial
//! kernel on pixel position and a bilateral kernel on position and color.
//! Each kernel's message is the kernel-weighted average of the neighbours'
//! marginals, excluding the pixel itself.

pub mod exact;
pub mod lattice;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::CrfParams;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{LabelImage, Mask};
use lattice::Lattice;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    /// Permutohedral lattice filtering, linear in the pixel count.
    Lattice,
    /// Direct summation over all pixel pairs.
    Exact,
}

struct Kernel {
    weight: f64,
    d: usize,
    features: Vec<f64>,
    lattice: Option<Lattice>,
    /// Per-pixel kernel mass with the self term removed (lattice only).
    norm: Vec<f64>,
}

/// Marginals `[background, road]` per pixel, row-major.
pub type Marginals = Vec<[f64; 2]>;

#[derive(Clone, Debug)]
pub struct CrfOutput {
    pub marginals: Marginals,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct DenseCrf {
    pub params: CrfParams,
    pub inference: Inference,
    pub exec: Execution,
}

impl DenseCrf {
    pub fn new(params: CrfParams) -> Self {
        Self {
            params,
            inference: Inference::Lattice,
            exec: Execution::default(),
        }
    }

    pub fn with_inference(mut self, inference: Inference) -> Self {
        self.inference = inference;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn run(&self, prob: &LabelImage, image: &RgbImage) -> Result<CrfOutput> {
        self.run_observed(prob, image, |_, _| {})
    }

    /// Like [`DenseCrf::run`], calling `observer(iteration, marginals)` after
    /// the initialization (iteration 0) and after every update.
    pub fn run_observed<F>(&self, prob: &LabelImage, image: &RgbImage, mut observer: F) -> Result<CrfOutput>
    where
        F: FnMut(usize, &[[f64; 2]]),
    {
        self.params.validate()?;
        let (w, h) = prob.dims();
        if (image.width() as usize, image.height() as usize) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: format!("{w}x{h}"),
                found: format!("{}x{}", image.width(), image.height()),
            });
        }
        let clip = self.params.unary_clip;
        let unary: Vec<[f64; 2]> = prob
            .values
            .iter()
            .map(|&p| {
                let p = p.clamp(clip, 1.0 - clip);
                [-(1.0 - p).ln(), -p.ln()]
            })
            .collect();
        let kernels = self.kernels(image);

        let mut energy = unary.clone();
        let mut q: Marginals = energy.iter().map(marginal).collect();
        observer(0, &q);
        for it in 1..=self.params.iterations {
            let road: Vec<f64> = q.iter().map(|m| m[1]).collect();
            energy.clone_from(&unary);
            for k in &kernels {
                let msg = self.messages(k, &road);
                for (e, m) in energy.iter_mut().zip(msg) {
                    // Potts: penalty for disagreeing with the neighbourhood
                    e[0] += k.weight * m;
                    e[1] += k.weight * (1.0 - m);
                }
            }
            q = energy.iter().map(marginal).collect();
            observer(it, &q);
        }

        let mut mask = Mask::new(w, h);
        for (i, e) in energy.iter().enumerate() {
            mask.data[i] = e[1] <= e[0];
        }
        Ok(CrfOutput { marginals: q, mask })
    }

    fn kernels(&self, image: &RgbImage) -> Vec<Kernel> {
        let p = &self.params;
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut out = Vec::new();
        if p.spatial_weight > 0.0 {
            let s = p.spatial_sigma;
            let mut f = Vec::with_capacity(w * h * 2);
            for y in 0..h {
                for x in 0..w {
                    f.extend([x as f64 / s, y as f64 / s]);
                }
            }
            out.push(self.kernel(p.spatial_weight, 2, f));
        }
        if p.bilateral_weight > 0.0 {
            let (sxy, srgb) = (p.bilateral_sigma_xy, p.bilateral_sigma_rgb);
            let mut f = Vec::with_capacity(w * h * 5);
            for (x, y, px) in image.enumerate_pixels() {
                f.extend([x as f64 / sxy, y as f64 / sxy]);
                f.extend(px.0.map(|c| c as f64 / srgb));
            }
            out.push(self.kernel(p.bilateral_weight, 5, f));
        }
        out
    }

    fn kernel(&self, weight: f64, d: usize, features: Vec<f64>) -> Kernel {
        match self.inference {
            Inference::Exact => Kernel {
                weight,
                d,
                features,
                lattice: None,
                norm: Vec::new(),
            },
            Inference::Lattice => {
                let lat = Lattice::new(&features, d, self.exec);
                let ones = vec![1.0; lat.len()];
                let norm = lat.filter(&ones, 1, self.exec).into_iter().map(|v| v - 1.0).collect();
                Kernel {
                    weight,
                    d,
                    features,
                    lattice: Some(lat),
                    norm,
                }
            }
        }
    }

    /// Kernel-weighted average of the neighbours' road marginal.
    fn messages(&self, k: &Kernel, road: &[f64]) -> Vec<f64> {
        match &k.lattice {
            None => exact::kernel_sums(&k.features, k.d, road, self.exec)
                .into_iter()
                .zip(road)
                .map(|((num, den), &own)| if den > 0.0 { num / den } else { own })
                .collect(),
            Some(lat) => lat
                .filter(road, 1, self.exec)
                .into_iter()
                .zip(&k.norm)
                .zip(road)
                .map(|((num, &den), &own)| {
                    // remove the pixel's own contribution; fall back to the
                    // inclusive average when the neighbourhood is empty
                    if den > 1e-6 {
                        ((num - own) / den).clamp(0.0, 1.0)
                    } else {
                        (num / (den + 1.0)).clamp(0.0, 1.0)
                    }
                })
                .collect(),
        }
    }
}

fn marginal(e: &[f64; 2]) -> [f64; 2] {
    let road = 1.0 / (1.0 + (e[1] - e[0]).exp());
    let bg = 1.0 / (1.0 + (e[0] - e[1]).exp());
    [bg, road]
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn noisy_square(n: usize) -> (LabelImage, RgbImage) {
        let inside = |x: usize, y: usize| (n / 4..3 * n / 4).contains(&x) && (n / 4..3 * n / 4).contains(&y);
        let img = RgbImage::from_fn(n as u32, n as u32, |x, y| {
            if inside(x as usize, y as usize) { Rgb([90, 90, 90]) } else { Rgb([240, 240, 250]) }
        });
        let mut values = Vec::new();
        for y in 0..n {
            for x in 0..n {
                // deterministic salt: every 7th pixel is flipped
                let base = if inside(x, y) { 0.8 } else { 0.2 };
                values.push(if (x * 31 + y * 17) % 7 == 0 { 1.0 - base } else { base });
            }
        }
        (LabelImage::full(n, n, values), img)
    }

    #[test]
    fn zero_pairwise_weights_threshold_at_half() {
        let params = CrfParams {
            spatial_weight: 0.0,
            bilateral_weight: 0.0,
            ..CrfParams::default()
        };
        let values = vec![0.0, 0.3, 0.5, 0.5000001, 0.49999, 0.95, 1.0, 0.05];
        let prob = LabelImage::full(8, 1, values.clone());
        let out = DenseCrf::new(params).run(&prob, &RgbImage::new(8, 1)).unwrap();
        let want: Vec<bool> = values.iter().map(|v| *v >= 0.5).collect();
        assert_eq!(out.mask.data, want);
    }

    #[test]
    fn marginals_normalized_every_iteration() {
        let (prob, img) = noisy_square(24);
        let mut seen = 0;
        DenseCrf::new(CrfParams::default())
            .run_observed(&prob, &img, |_, q| {
                seen += 1;
                for m in q {
                    assert!((m[0] + m[1] - 1.0).abs() < 1e-9);
                    assert!(m[0] >= 0.0 && m[1] >= 0.0);
                }
            })
            .unwrap();
        assert_eq!(seen, 6);
    }

    #[test]
    fn smoothing_removes_salt() {
        let (prob, img) = noisy_square(32);
        for inference in [Inference::Exact, Inference::Lattice] {
            let out = DenseCrf::new(CrfParams::default()).with_inference(inference).run(&prob, &img).unwrap();
            let wrong = (0..32 * 32)
                .filter(|&i| {
                    let (x, y) = (i % 32, i / 32);
                    out.mask.data[i] != ((8..24).contains(&x) && (8..24).contains(&y))
                })
                .count();
            assert!(wrong < 10, "{inference:?}: {wrong} wrong pixels");
        }
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let prob = LabelImage::constant(4, 4, 0.5);
        assert!(DenseCrf::new(CrfParams::default()).run(&prob, &RgbImage::new(5, 4)).is_err());
    }
}
