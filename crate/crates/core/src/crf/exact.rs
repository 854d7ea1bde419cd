//! Exact `O(N²)` Gaussian kernel sums, used as the reference for the
//! lattice approximation on small images.

use crate::exec::Execution;

/// For every point, `(Σ_{j≠i} k_ij · v_j, Σ_{j≠i} k_ij)` with
/// `k_ij = exp(-|f_i - f_j|² / 2)`.
pub fn kernel_sums(features: &[f64], d: usize, values: &[f64], exec: Execution) -> Vec<(f64, f64)> {
    let n = values.len();
    assert_eq!(features.len(), n * d);
    exec.map_range(n, |i| {
        let fi = &features[i * d..(i + 1) * d];
        let mut num = 0.0;
        let mut den = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let fj = &features[j * d..(j + 1) * d];
            let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-0.5 * d2).exp();
            num += k * values[j];
            den += k;
        }
        (num, den)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points() {
        let s = kernel_sums(&[0.0, 0.0, 1.0, 0.0], 2, &[0.25, 1.0], Execution::Sequential);
        let k = (-0.5f64).exp();
        assert!((s[0].0 - k).abs() < 1e-15 && (s[0].1 - k).abs() < 1e-15);
        assert!((s[1].0 - 0.25 * k).abs() < 1e-15);
    }
}
