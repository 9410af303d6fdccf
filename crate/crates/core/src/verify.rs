//! The acceptance suite, runnable from the library, the CLI and the test harness.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{generate, normalize_skeleton, resample_indices, temporal_blocks, temporal_resample, SyntheticSpec};
use crate::error::Result;
use crate::kernel::{bases_of, gram_matrix, gram_symmetric, tensor_kernel, BasisTuple, Combine, KernelConfig};
use crate::linalg::Matrix;
use crate::model::{grad_check, train, TrainConfig, UktlModel};
use crate::nystrom::fit_nystrom;
use crate::oracle::{brute_force_gram, nystrom_error_curve, nystrom_self_error, OracleReport};
use crate::subspace::{
    cross_gram_norm_sq, orthonormalize_columns, principal_angles, projection_distance_sq, tensor_subspaces, Subspace,
    SubspaceTuple,
};
use crate::tensor::Tensor;
use crate::uncertainty::{logit, uncertainty_penalty, weight_subspace};

pub const CRITERIA: [(u32, &str); 9] = [
    (1, "kernel matches brute-force Gram"),
    (2, "Gram matrices are PSD"),
    (3, "Grassmann identities"),
    (4, "Nyström exactness and trend"),
    (5, "analytic gradients match finite differences"),
    (6, "degenerate configurations"),
    (7, "end-to-end synthetic benchmark"),
    (8, "preprocessing contracts"),
    (9, "uncertainty penalty identities"),
];

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u32,
    pub title: &'static str,
    pub checks: Vec<OracleReport>,
    pub elapsed: Duration,
    /// Set when the criterion could not be evaluated at all.
    pub error: Option<String>,
}

impl CriterionResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "criterion {} {}: {} ({:.2} s)",
            self.id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.title,
            self.elapsed.as_secs_f64()
        )?;
        if let Some(e) = &self.error {
            writeln!(f, "    error: {e}")?;
        }
        for c in &self.checks {
            writeln!(f, "    {c}")?;
        }
        Ok(())
    }
}

fn budget(checks: &mut Vec<OracleReport>, start: Instant, seconds: f64) {
    checks.push(OracleReport::at_most("runtime_s", start.elapsed().as_secs_f64(), seconds));
}

pub fn run_criterion(id: u32) -> CriterionResult {
    let title = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map_or("unknown criterion", |(_, t)| *t);
    let start = Instant::now();
    let outcome = match id {
        1 => kernel_agreement(),
        2 => psd(),
        3 => grassmann(),
        4 => nystrom(),
        5 => gradients(),
        6 => degenerate(),
        7 => end_to_end(),
        8 => preprocessing(),
        9 => penalty(),
        _ => Err(crate::UktlError::InvalidArgument(format!("no criterion {id}"))),
    };
    let (checks, error) = match outcome {
        Ok(c) => (c, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    CriterionResult {
        id,
        title,
        checks,
        elapsed: start.elapsed(),
        error,
    }
}

pub fn run_all() -> Vec<CriterionResult> {
    CRITERIA.iter().map(|(id, _)| run_criterion(*id)).collect()
}

fn gaussian_tensors(n: usize, dims: &[usize], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(dims.to_vec(), |_| rng.sample(StandardNormal)).expect("valid dims"))
        .collect()
}

/// Log-uniform uncertainty values in `[0.1, 10]`.
fn random_sigmas(n: usize, orders: &[usize], seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            orders
                .iter()
                .map(|&p| (0..p).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect())
                .collect()
        })
        .collect()
}

fn weighted(tuples: &[SubspaceTuple], sigmas: &[Vec<Vec<f64>>]) -> Result<Vec<BasisTuple>> {
    tuples
        .iter()
        .zip(sigmas)
        .map(|(t, s)| t.iter().zip(s).map(|(sub, sg)| weight_subspace(sub, sg)).collect())
        .collect()
}

fn subspaces(tensors: &[Tensor], orders: &[usize]) -> Result<Vec<SubspaceTuple>> {
    tensors.iter().map(|t| tensor_subspaces(t, orders)).collect()
}

fn combos() -> [KernelConfig; 3] {
    [Combine::Sum, Combine::Product, Combine::SumProduct].map(|combine| KernelConfig {
        combine,
        mu: 0.5,
        bandwidth: 1.0,
    })
}

fn kernel_agreement() -> Result<Vec<OracleReport>> {
    let start = Instant::now();
    let dims = [6, 8, 10];
    let orders = [3, 3, 3];
    let tensors = gaussian_tensors(20, &dims, 101);
    let sigmas = random_sigmas(20, &orders, 102);
    let tuples = subspaces(&tensors, &orders)?;
    let plain: Vec<BasisTuple> = tuples.iter().map(bases_of).collect();
    let scaled = weighted(&tuples, &sigmas)?;
    let mut checks = Vec::new();
    for cfg in combos() {
        let fast = gram_matrix(&plain, &plain, &cfg)?;
        let slow = brute_force_gram(&tensors, &orders, &cfg, None)?;
        checks.push(OracleReport::at_most(format!("{}_unweighted_max_abs", cfg.combine), fast.max_abs_diff(&slow), 1e-10));
        let fast = gram_matrix(&scaled, &scaled, &cfg)?;
        let slow = brute_force_gram(&tensors, &orders, &cfg, Some(&sigmas))?;
        checks.push(OracleReport::at_most(format!("{}_weighted_max_abs", cfg.combine), fast.max_abs_diff(&slow), 1e-10));
    }
    budget(&mut checks, start, 10.0);
    Ok(checks)
}

/// `-λ_min / λ_max`, via nalgebra.
fn negative_spectrum_ratio(k: &Matrix) -> f64 {
    let n = k.rows();
    let m = DMatrix::from_row_slice(n, n, k.as_slice());
    let eig = m.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    (-min / max).max(0.0)
}

fn psd() -> Result<Vec<OracleReport>> {
    let start = Instant::now();
    let orders = [3, 3, 3];
    let mut worst = [0.0f64; 3];
    for seed in 0..10 {
        let tensors = gaussian_tensors(32, &[6, 8, 10], 200 + seed);
        let tuples = subspaces(&tensors, &orders)?;
        let plain: Vec<BasisTuple> = tuples.iter().map(bases_of).collect();
        let scaled = weighted(&tuples, &random_sigmas(32, &orders, 300 + seed))?;
        for (slot, cfg) in worst.iter_mut().zip(combos()) {
            for items in [&plain, &scaled] {
                *slot = slot.max(negative_spectrum_ratio(&gram_symmetric(items, &cfg)?));
            }
        }
    }
    let mut checks: Vec<OracleReport> = combos()
        .iter()
        .zip(worst)
        .map(|(cfg, w)| OracleReport::at_most(format!("{}_neg_eig_ratio", cfg.combine), w, 1e-8))
        .collect();
    budget(&mut checks, start, 30.0);
    Ok(checks)
}

fn random_orthogonal(p: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    orthonormalize_columns(&Matrix::from_fn(p, p, |_, _| rng.sample(StandardNormal)))
}

fn grassmann() -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let (mut angle_err, mut identity_err, mut literal_err, mut invariance_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(3..=12);
        let p = rng.random_range(1..=n.min(5));
        let a = Subspace::random(n, p, &mut rng)?;
        let b = Subspace::random(n, p, &mut rng)?;
        let cross = cross_gram_norm_sq(a.basis(), b.basis())?;
        let cos2: f64 = principal_angles(&a, &b)?.iter().map(|t| t.cos().powi(2)).sum();
        angle_err = angle_err.max((cross - cos2).abs());
        let d = projection_distance_sq(&a, &b)?;
        identity_err = identity_err.max((d - (2.0 * p as f64 - 2.0 * cross)).abs());
        let (pa, pb) = (a.projector(), b.projector());
        let literal: f64 = pa.as_slice().iter().zip(pb.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
        literal_err = literal_err.max((d - literal).abs());
        let ar = a.rotated(&random_orthogonal(p, &mut rng)?)?;
        let br = b.rotated(&random_orthogonal(p, &mut rng)?)?;
        invariance_err = invariance_err.max((projection_distance_sq(&ar, &br)? - d).abs());
    }
    Ok(vec![
        OracleReport::at_most("cross_gram_vs_cos2", angle_err, 1e-10),
        OracleReport::at_most("distance_vs_2p_minus_2cross", identity_err, 1e-10),
        OracleReport::at_most("distance_vs_literal_projectors", literal_err, 1e-10),
        OracleReport::at_most("rotation_invariance", invariance_err, 1e-10),
    ])
}

fn nystrom_data(seed: u64) -> Result<Vec<Tensor>> {
    let spec = SyntheticSpec {
        num_classes: 4,
        per_class: 20,
        dims: vec![6, 8, 10],
        rank: 3,
        noise: 0.3,
        seed,
    };
    Ok(generate(&spec)?.0.tensors)
}

fn nystrom() -> Result<Vec<OracleReport>> {
    let start = Instant::now();
    let orders = [3, 3, 3];
    let cfg = KernelConfig::default();
    let data = nystrom_data(500)?;
    let mut checks = vec![OracleReport::at_most(
        format!("self_pivots_rel_err_n{}", data.len()),
        nystrom_self_error(&data, &orders, &cfg)?,
        1e-6,
    )];
    let counts = [2, 4, 8, 16];
    let mut means = [0.0; 4];
    for seed in 0..5 {
        let data = nystrom_data(510 + seed)?;
        for (slot, (_, e)) in means.iter_mut().zip(nystrom_error_curve(&data, &orders, &cfg, &counts, seed, 1.0)?) {
            *slot += e / 5.0;
        }
    }
    let worst = means.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    checks.push(OracleReport::at_most(
        format!("trend_max_step_ratio means={means:.4?}"),
        worst,
        1.05,
    ));
    budget(&mut checks, start, 60.0);
    Ok(checks)
}

/// A desk-scale model with every trainable parameter perturbed, plus a batch of four.
pub fn gradcheck_fixture(seed: u64) -> Result<(UktlModel, Vec<Tensor>, Vec<usize>)> {
    let spec = SyntheticSpec {
        num_classes: 3,
        per_class: 10,
        dims: vec![8, 10, 12],
        rank: 4,
        noise: 0.3,
        seed,
    };
    let (train_set, _) = generate(&spec)?;
    let cfg = TrainConfig {
        p: 4,
        pivots: 8,
        epochs: 0,
        seed,
        ..TrainConfig::default()
    };
    let (mut model, _) = train(&train_set.tensors, &train_set.labels, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = model.params();
    for v in params.iter_mut() {
        *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    model.set_params(&params)?;
    Ok((model, train_set.tensors[..4].to_vec(), train_set.labels[..4].to_vec()))
}

fn gradients() -> Result<Vec<OracleReport>> {
    let start = Instant::now();
    let (model, tensors, labels) = gradcheck_fixture(0)?;
    let report = grad_check(&model, &tensors, &labels, 1e-5)?;
    let mut checks: Vec<OracleReport> = report
        .groups
        .iter()
        .map(|(g, e)| OracleReport::at_most(format!("{}_max_rel_err", g.name()), *e, 1e-4))
        .collect();
    budget(&mut checks, start, 30.0);
    Ok(checks)
}

/// Sets every MSN output to (numerically) 1 and refits the map.
pub fn freeze_unit_uncertainty(model: &mut UktlModel, train: &[Tensor]) -> Result<()> {
    let (lo, hi) = (model.msn.sigma_min, model.msn.sigma_max);
    for br in &mut model.msn.branches {
        br.weights.as_mut_slice().fill(0.0);
        br.bias.fill(logit((1.0 - lo) / (hi - lo)));
    }
    let train_tuples = model.subspaces_of(train)?;
    let pivot_tuples = model.subspaces_of(&model.pivots)?;
    model.refresh(&pivot_tuples, &train_tuples)
}

fn degenerate() -> Result<Vec<OracleReport>> {
    let orders = [3, 3, 3];
    let tensors = gaussian_tensors(12, &[6, 8, 10], 600);
    let items: Vec<BasisTuple> = subspaces(&tensors, &orders)?.iter().map(bases_of).collect();
    let with = |combine, mu| KernelConfig {
        combine,
        mu,
        bandwidth: 1.0,
    };
    let (mut sum_err, mut prod_err) = (0.0f64, 0.0f64);
    for a in &items {
        for b in &items {
            let sp1 = tensor_kernel(a, b, &with(Combine::SumProduct, 1.0))?;
            let sp0 = tensor_kernel(a, b, &with(Combine::SumProduct, 0.0))?;
            sum_err = sum_err.max((sp1 - tensor_kernel(a, b, &with(Combine::Sum, 0.5))?).abs());
            prod_err = prod_err.max((sp0 - tensor_kernel(a, b, &with(Combine::Product, 0.5))?).abs());
        }
    }

    let spec = SyntheticSpec {
        num_classes: 3,
        per_class: 10,
        dims: vec![8, 10, 12],
        rank: 4,
        noise: 0.3,
        seed: 601,
    };
    let (train_set, test_set) = generate(&spec)?;
    let cfg = TrainConfig {
        pivots: 8,
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (mut model, _) = train(&train_set.tensors, &train_set.labels, &cfg)?;
    freeze_unit_uncertainty(&mut model, &train_set.tensors)?;
    let plain = |t: &[Tensor]| -> Result<Vec<BasisTuple>> { Ok(subspaces(t, &model.orders)?.iter().map(bases_of).collect()) };
    let mut map = fit_nystrom(plain(&model.pivots)?, model.kernel_config(), model.config.clamp_eps)?;
    map.embed_fit(&plain(&train_set.tensors)?)?;
    let g = map.embed_apply(&plain(&test_set.tensors)?)?;
    let logits = model.logits(&test_set.tensors)?;
    let mut ktl_err = 0.0f64;
    for i in 0..test_set.len() {
        for (a, b) in logits.row(i).iter().zip(model.classifier.logits(g.row(i))) {
            ktl_err = ktl_err.max((a - b).abs());
        }
    }
    Ok(vec![
        OracleReport::at_most("mu1_vs_sum", sum_err, 1e-15),
        OracleReport::at_most("mu0_vs_product", prod_err, 1e-15),
        OracleReport::at_most("unit_sigma_vs_plain_logits", ktl_err, 1e-12),
    ])
}

/// Dataset and training settings of the end-to-end benchmark.
pub fn benchmark_setup() -> (SyntheticSpec, TrainConfig) {
    let spec = SyntheticSpec {
        num_classes: 3,
        per_class: 100,
        dims: vec![8, 10, 12],
        rank: 4,
        noise: 0.3,
        seed: 7,
    };
    let cfg = TrainConfig {
        p: 4,
        pivots: 16,
        epochs: 30,
        batch_size: 16,
        ..TrainConfig::default()
    };
    (spec, cfg)
}

fn end_to_end() -> Result<Vec<OracleReport>> {
    let start = Instant::now();
    let (spec, cfg) = benchmark_setup();
    let (train_set, test_set) = generate(&spec)?;
    let (model, _) = train(&train_set.tensors, &train_set.labels, &cfg)?;
    let json = model.to_json()?;
    let (again, _) = train(&train_set.tensors, &train_set.labels, &cfg)?;
    let loaded = UktlModel::from_json(&json)?;
    let acc = model.evaluate(&test_set.tensors, &test_set.labels)?;
    let train_acc = model.evaluate(&train_set.tensors, &train_set.labels)?;
    let mut checks = vec![
        OracleReport::at_least("test_accuracy", acc, 0.95),
        OracleReport::at_least("train_accuracy", train_acc, 0.97),
        OracleReport::check("rerun_checkpoint_identical", again.to_json()? == json),
        OracleReport::check(
            "reloaded_logits_identical",
            loaded.logits(&test_set.tensors)? == model.logits(&test_set.tensors)?,
        ),
    ];
    budget(&mut checks, start, 300.0);
    Ok(checks)
}

fn preprocessing() -> Result<Vec<OracleReport>> {
    let expected: Vec<usize> = (0..70).chain(0..70).chain(0..60).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let seq = Tensor::from_fn(vec![3, 4, 70], |_| rng.random_range(-1.0..1.0))?;
    let out = temporal_resample(&seq, 200)?;
    let cyclic = out.dims() == [3, 4, 200]
        && resample_indices(70, 200) == expected
        && expected
            .iter()
            .enumerate()
            .all(|(t, &s)| (0..3).all(|a| (0..4).all(|j| out.get(&[a, j, t]) == seq.get(&[a, j, s]))));
    let long = resample_indices(400, 200);
    let uniform = long.len() == 200 && long[0] == 0 && long[199] == 399;

    let seq200 = Tensor::from_fn(vec![3, 4, 200], |_| rng.random_range(-1.0..1.0))?;
    let blocks = temporal_blocks(&seq200, 30, 10)?.len();

    let (mut max_abs, mut ref_abs) = (0.0f64, 0.0f64);
    let mut unit_axes = true;
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(900 + seed);
        let joints = 25;
        let seq = Tensor::from_fn(vec![3, joints, 40], |_| r.random_range(-3.0..3.0))?;
        let reference = (seed as usize) % joints;
        let n = normalize_skeleton(&seq, reference)?;
        for a in 0..3 {
            let mut axis_max = 0.0f64;
            for j in 0..joints {
                for f in 0..40 {
                    let v = n.get(&[a, j, f]).abs();
                    axis_max = axis_max.max(v);
                    if j == reference {
                        ref_abs = ref_abs.max(v);
                    }
                }
            }
            max_abs = max_abs.max(axis_max);
            unit_axes &= axis_max == 1.0;
        }
    }
    Ok(vec![
        OracleReport::check("resample_70_to_200_cyclic", cyclic),
        OracleReport::check("resample_400_to_200_endpoints", uniform),
        OracleReport::at_most("blocks_200_30_10_count_minus_18", (blocks as f64 - 18.0).abs(), 0.0),
        OracleReport::at_most("normalized_max_abs", max_abs, 1.0),
        OracleReport::at_most("reference_joint_abs", ref_abs, 0.0),
        OracleReport::check("nondegenerate_axes_reach_one", unit_axes),
    ])
}

fn penalty() -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut single = 0.0f64;
    let mut identical = 0.0f64;
    for &modes in &[1usize, 3] {
        for &p in &[1usize, 4] {
            for &beta in &[0.01, 0.1] {
                let one: Vec<Vec<f64>> = (0..modes).map(|_| (0..p).map(|_| rng.random_range(0.1..10.0)).collect()).collect();
                single = single.max(uncertainty_penalty(std::slice::from_ref(&one), beta)?.abs());
                for &n in &[2usize, 3, 5, 16] {
                    let batch = vec![one.clone(); n];
                    let want = beta * (n * modes * p) as f64 * (1.0 / n as f64).ln();
                    identical = identical.max((uncertainty_penalty(&batch, beta)? - want).abs());
                }
            }
        }
    }
    Ok(vec![
        OracleReport::at_most("single_sample_penalty_abs", single, 1e-12),
        OracleReport::at_most("identical_sigma_penalty_err", identical, 1e-12),
    ])
}
