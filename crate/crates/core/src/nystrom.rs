//! Nyström linearization of the tensor kernel.
//!
//! `K_CC = V Λ Vᵀ`, `P⁻¹ = V Λ^{-1/2} Vᵀ` with eigenvalues below
//! `clamp_eps · λ_max` dropped, features `G = K_NC P⁻¹`, centred by the
//! per-feature training mean.

use crate::error::{Result, UktlError};
use crate::kernel::{gram_matrix, gram_symmetric, BasisTuple, KernelConfig};
use crate::linalg::{symmetric_eigen, Matrix};

pub const DEFAULT_CLAMP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NystromMap {
    /// Pivot bases, already uncertainty-weighted when the map was fitted.
    pub pivot_bases: Vec<BasisTuple>,
    pub cfg: KernelConfig,
    pub p_inv: Matrix,
    /// Set by [`NystromMap::embed_fit`].
    pub feature_mean: Option<Vec<f64>>,
    pub clamp_eps: f64,
}

/// Pseudo-inverse square root of a symmetric PSD matrix.
pub fn inverse_sqrt_psd(k: &Matrix, clamp_eps: f64) -> Result<Matrix> {
    if !(clamp_eps >= 0.0) {
        return Err(UktlError::InvalidArgument(format!(
            "clamp_eps must be nonnegative, got {clamp_eps}"
        )));
    }
    let eig = symmetric_eigen(k)?;
    let lambda_max = eig.values[0];
    if !(lambda_max > 0.0) {
        return Err(UktlError::Degenerate(format!(
            "pivot kernel has no positive eigenvalue (max {lambda_max})"
        )));
    }
    let threshold = clamp_eps * lambda_max;
    let scale: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if l < threshold || l <= 0.0 { 0.0 } else { 1.0 / l.sqrt() })
        .collect();
    let n = k.rows();
    let v = &eig.vectors;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (r, s) in scale.iter().enumerate() {
                if *s != 0.0 {
                    acc += v.get(i, r) * s * v.get(j, r);
                }
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    Ok(out)
}

pub fn fit_nystrom(pivot_bases: Vec<BasisTuple>, cfg: KernelConfig, clamp_eps: f64) -> Result<NystromMap> {
    if pivot_bases.is_empty() {
        return Err(UktlError::Empty("Nyström map needs at least one pivot".into()));
    }
    let kcc = gram_symmetric(&pivot_bases, &cfg)?;
    let p_inv = inverse_sqrt_psd(&kcc, clamp_eps)?;
    Ok(NystromMap {
        pivot_bases,
        cfg,
        p_inv,
        feature_mean: None,
        clamp_eps,
    })
}

impl NystromMap {
    pub fn num_pivots(&self) -> usize {
        self.pivot_bases.len()
    }

    /// Kernel values against the pivots, `K_*C`.
    pub fn kernel_to_pivots(&self, items: &[BasisTuple]) -> Result<Matrix> {
        gram_matrix(items, &self.pivot_bases, &self.cfg)
    }

    /// Uncentred features `K_*C P⁻¹`.
    pub fn raw_features(&self, items: &[BasisTuple]) -> Result<Matrix> {
        if items.is_empty() {
            return Err(UktlError::Empty("no tuples to embed".into()));
        }
        self.kernel_to_pivots(items)?.matmul(&self.p_inv)
    }

    /// Embeds the training set, stores its per-feature mean and returns the
    /// centred features.
    pub fn embed_fit(&mut self, train: &[BasisTuple]) -> Result<Matrix> {
        let g = self.raw_features(train)?;
        let n = g.rows() as f64;
        let mut mean = vec![0.0; g.cols()];
        for i in 0..g.rows() {
            for (m, v) in mean.iter_mut().zip(g.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        self.feature_mean = Some(mean);
        self.center(g)
    }

    pub fn embed_apply(&self, items: &[BasisTuple]) -> Result<Matrix> {
        let g = self.raw_features(items)?;
        self.center(g)
    }

    fn center(&self, mut g: Matrix) -> Result<Matrix> {
        let mean = self
            .feature_mean
            .as_ref()
            .ok_or_else(|| UktlError::NotFitted("Nyström feature mean not estimated".into()))?;
        let c = g.cols();
        for (idx, v) in g.as_mut_slice().iter_mut().enumerate() {
            *v -= mean[idx % c];
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Combine;
    use crate::subspace::Subspace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tuples(n: usize, seed: u64) -> Vec<BasisTuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [5usize, 6, 7]
                    .iter()
                    .map(|&d| Subspace::random(d, 2, &mut rng).unwrap().basis().clone())
                    .collect()
            })
            .collect()
    }

    fn product_cfg() -> KernelConfig {
        KernelConfig {
            combine: Combine::Product,
            ..KernelConfig::default()
        }
    }

    #[test]
    fn two_by_two_inverse_sqrt() {
        let k = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let eig = symmetric_eigen(&k).unwrap();
        assert!((eig.values[0] - 1.5).abs() < 1e-15 && (eig.values[1] - 0.5).abs() < 1e-15);
        let p = inverse_sqrt_psd(&k, DEFAULT_CLAMP_EPS).unwrap();
        // Closed form from the eigenpairs (1.5, [1,1]/√2) and (0.5, [1,-1]/√2).
        let a = 0.5 / 1.5f64.sqrt();
        let b = 0.5 / 0.5f64.sqrt();
        assert!((p.get(0, 0) - (a + b)).abs() < 1e-15);
        assert!((p.get(0, 1) - (a - b)).abs() < 1e-15);
        assert!((p.get(0, 0) - 1.115355).abs() < 1e-6);
        assert!((p.get(0, 1) + 0.298858).abs() < 1e-6);
        let pkp = p.matmul(&k).unwrap().matmul(&p).unwrap();
        assert!(pkp.max_abs_diff(&Matrix::identity(2)) <= 1e-10);
    }

    #[test]
    fn identity_and_scalar_cases() {
        let p = inverse_sqrt_psd(&Matrix::identity(3), DEFAULT_CLAMP_EPS).unwrap();
        assert_eq!(p, Matrix::identity(3));

        let pivots = random_tuples(1, 1);
        let map = fit_nystrom(pivots, product_cfg(), DEFAULT_CLAMP_EPS).unwrap();
        assert_eq!(map.p_inv.as_slice(), &[1.0]);
    }

    #[test]
    fn degenerate_pivot_kernel_rejected() {
        assert!(matches!(
            inverse_sqrt_psd(&Matrix::zeros(2, 2), DEFAULT_CLAMP_EPS),
            Err(UktlError::Degenerate(_))
        ));
    }

    #[test]
    fn clamped_directions_are_dropped() {
        // Rank-one kernel: the null direction must not blow up.
        let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let p = inverse_sqrt_psd(&k, DEFAULT_CLAMP_EPS).unwrap();
        assert!(p.is_finite());
        let pkp = p.matmul(&k).unwrap().matmul(&p).unwrap();
        // Projector onto [1,1]/√2.
        for v in pkp.as_slice() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn retained_eigenspace_is_whitened() {
        let pivots = random_tuples(8, 2);
        let cfg = KernelConfig::default();
        let kcc = gram_symmetric(&pivots, &cfg).unwrap();
        let map = fit_nystrom(pivots, cfg, DEFAULT_CLAMP_EPS).unwrap();
        let pkp = map.p_inv.matmul(&kcc).unwrap().matmul(&map.p_inv).unwrap();
        assert!(pkp.max_abs_diff(&Matrix::identity(8)) < 1e-8);
        assert!(map.p_inv.max_abs_diff(&map.p_inv.transpose()) == 0.0);
    }

    #[test]
    fn exact_when_pivots_are_the_samples() {
        let items = random_tuples(12, 3);
        let cfg = KernelConfig::default();
        let mut map = fit_nystrom(items.clone(), cfg, DEFAULT_CLAMP_EPS).unwrap();
        let g = map.raw_features(&items).unwrap();
        let ggt = g.matmul(&g.transpose()).unwrap();
        let k = gram_symmetric(&items, &cfg).unwrap();
        let diff = Matrix::from_fn(12, 12, |i, j| k.get(i, j) - ggt.get(i, j));
        assert!(diff.frobenius_norm() / k.frobenius_norm() <= 1e-6);

        let centred = map.embed_fit(&items).unwrap();
        for j in 0..12 {
            let mean: f64 = (0..12).map(|i| centred.get(i, j)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
        }
        // Re-centring changes nothing.
        let mut again = centred.clone();
        for j in 0..12 {
            let mean: f64 = (0..12).map(|i| centred.get(i, j)).sum::<f64>() / 12.0;
            for i in 0..12 {
                again.set(i, j, again.get(i, j) - mean);
            }
        }
        assert!(again.max_abs_diff(&centred) < 1e-12);
    }

    #[test]
    fn single_sample_centres_to_zero() {
        let pivots = random_tuples(3, 4);
        let mut map = fit_nystrom(pivots, KernelConfig::default(), DEFAULT_CLAMP_EPS).unwrap();
        let one = random_tuples(1, 5);
        let g = map.embed_fit(&one).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_pivot_feature_is_centred_kernel() {
        let pivots = random_tuples(1, 6);
        let train = random_tuples(5, 7);
        let cfg = product_cfg();
        let mut map = fit_nystrom(pivots.clone(), cfg, DEFAULT_CLAMP_EPS).unwrap();
        let g = map.embed_fit(&train).unwrap();
        let ks: Vec<f64> = train
            .iter()
            .map(|t| crate::kernel::tensor_kernel(t, &pivots[0], &cfg).unwrap())
            .collect();
        let mean = ks.iter().sum::<f64>() / 5.0;
        for (i, k) in ks.iter().enumerate() {
            assert!((g.get(i, 0) - (k - mean)).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_reproduces_fit_bit_exactly() {
        let pivots = random_tuples(4, 8);
        let train = random_tuples(9, 9);
        let mut map = fit_nystrom(pivots, KernelConfig::default(), DEFAULT_CLAMP_EPS).unwrap();
        let fit = map.embed_fit(&train).unwrap();
        let applied = map.embed_apply(&train).unwrap();
        assert_eq!(fit, applied);
    }

    #[test]
    fn pivot_row_feature_is_kernel_row_times_p_inv() {
        let pivots = random_tuples(4, 10);
        let cfg = product_cfg();
        let kcc = gram_symmetric(&pivots, &cfg).unwrap();
        let map = fit_nystrom(pivots.clone(), cfg, DEFAULT_CLAMP_EPS).unwrap();
        let g = map.raw_features(&pivots[2..3]).unwrap();
        for c in 0..4 {
            let expected: f64 = (0..4).map(|r| kcc.get(2, r) * map.p_inv.get(r, c)).sum();
            assert!((g.get(0, c) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn held_out_matches_scalar_loop() {
        let pivots = random_tuples(5, 11);
        let train = random_tuples(7, 12);
        let held = random_tuples(3, 13);
        let cfg = KernelConfig::default();
        let mut map = fit_nystrom(pivots.clone(), cfg, DEFAULT_CLAMP_EPS).unwrap();
        map.embed_fit(&train).unwrap();
        let got = map.embed_apply(&held).unwrap();
        let mean = map.feature_mean.clone().unwrap();
        for (i, t) in held.iter().enumerate() {
            let k: Vec<f64> = pivots
                .iter()
                .map(|z| crate::kernel::tensor_kernel(t, z, &cfg).unwrap())
                .collect();
            for c in 0..5 {
                let mut acc = 0.0;
                for r in 0..5 {
                    acc += k[r] * map.p_inv.get(r, c);
                }
                assert!((got.get(i, c) - (acc - mean[c])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn apply_before_fit_is_an_error() {
        let pivots = random_tuples(2, 14);
        let map = fit_nystrom(pivots.clone(), KernelConfig::default(), DEFAULT_CLAMP_EPS).unwrap();
        assert!(matches!(map.embed_apply(&pivots), Err(UktlError::NotFitted(_))));
    }
}
