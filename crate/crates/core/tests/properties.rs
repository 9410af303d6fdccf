use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uktl::kernel::{gram_symmetric, tensor_kernel, Combine, KernelConfig};
use uktl::linalg::Matrix;
use uktl::nystrom::{fit_nystrom, DEFAULT_CLAMP_EPS};
use uktl::subspace::{projection_distance_sq, Subspace};
use uktl::uncertainty::{uncertainty_penalty, weight_subspace};

fn tuples(n: usize, dims: &[usize], p: usize, seed: u64) -> Vec<Vec<Matrix>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            dims.iter()
                .map(|&d| Subspace::random(d, p, &mut rng).unwrap().basis().clone())
                .collect()
        })
        .collect()
}

fn combine() -> impl Strategy<Value = Combine> {
    prop_oneof![Just(Combine::Sum), Just(Combine::Product), Just(Combine::SumProduct)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_is_symmetric_and_bounded(seed in any::<u64>(), c in combine(), mu in 0.0..=1.0f64, bw in 0.2..5.0f64) {
        let cfg = KernelConfig { bandwidth: bw, mu, combine: c };
        let t = tuples(2, &[4, 5, 6], 2, seed);
        let ab = tensor_kernel(&t[0], &t[1], &cfg).unwrap();
        let ba = tensor_kernel(&t[1], &t[0], &cfg).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1e-300));
        let aa = tensor_kernel(&t[0], &t[0], &cfg).unwrap();
        prop_assert!(ab >= 0.0 && ab <= aa + 1e-12);
    }

    #[test]
    fn projection_distance_in_range(seed in any::<u64>(), n in 2usize..10, p_frac in 0.0..1.0f64) {
        let p = 1 + ((n - 1) as f64 * p_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Subspace::random(n, p, &mut rng).unwrap();
        let b = Subspace::random(n, p, &mut rng).unwrap();
        let d = projection_distance_sq(&a, &b).unwrap();
        let cap = 2.0 * p.min(n - p) as f64;
        prop_assert!(d >= 0.0 && d <= cap + 1e-10);
        prop_assert!(projection_distance_sq(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn penalty_is_nonpositive(seed in any::<u64>(), n in 1usize..6, beta in 0.0..1.0f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..2).map(|_| (0..3).map(|_| rng.random_range(0.1..10.0)).collect()).collect())
            .collect();
        prop_assert!(uncertainty_penalty(&batch, beta).unwrap() <= 1e-15);
    }

    #[test]
    fn weighted_gram_is_psd(seed in any::<u64>(), c in combine()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let cfg = KernelConfig { combine: c, ..KernelConfig::default() };
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<Vec<Matrix>> = (0..10)
            .map(|_| {
                [4usize, 5]
                    .iter()
                    .map(|&d| {
                        let s = Subspace::random(d, 2, &mut rng2).unwrap();
                        let sig: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..10.0)).collect();
                        weight_subspace(&s, &sig).unwrap()
                    })
                    .collect()
            })
            .collect();
        let k = gram_symmetric(&items, &cfg).unwrap();
        let n = k.rows();
        let eig = nalgebra::DMatrix::from_row_slice(n, n, k.as_slice()).symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() >= -1e-8 * eig.eigenvalues.max());
    }

    #[test]
    fn nystrom_features_are_psd_approximations(seed in any::<u64>(), c in 1usize..8) {
        let items = tuples(12, &[4, 5, 6], 2, seed);
        let cfg = KernelConfig::default();
        let map = fit_nystrom(items[..c].to_vec(), cfg, DEFAULT_CLAMP_EPS).unwrap();
        let g = map.raw_features(&items).unwrap();
        let ggt = g.matmul(&g.transpose()).unwrap();
        let k = gram_symmetric(&items, &cfg).unwrap();
        // K - GGᵀ is a Schur complement, hence PSD.
        let n = k.rows();
        let diff: Vec<f64> = k.as_slice().iter().zip(ggt.as_slice()).map(|(a, b)| a - b).collect();
        let eig = nalgebra::DMatrix::from_row_slice(n, n, &diff).symmetric_eigen();
        let scale = k.frobenius_norm();
        prop_assert!(eig.eigenvalues.min() >= -1e-8 * scale);
    }
}
