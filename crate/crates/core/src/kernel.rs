//! Grassmann factor kernels and their sum / product / sum-product combinations.
//!
//! A mode basis here is any `I_m x p` matrix: orthonormal subspace bases and
//! uncertainty-weighted bases (columns scaled by `1/sqrt(sigma_k)`) go through the
//! same code. Distances between the induced (weighted) projectors use
//!
//! ```text
//! ||AAᵀ - BBᵀ||_F^2 = ||AᵀA||_F^2 + ||BᵀB||_F^2 - 2 ||AᵀB||_F^2
//! ```
//!
//! so only `p x p` cross-Gram matrices are formed, never `I_m x I_m` projectors.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UktlError};
use crate::linalg::Matrix;
use crate::subspace::{cross_gram_norm_sq, SubspaceTuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Sum,
    Product,
    SumProduct,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Sum => "sum",
            Combine::Product => "product",
            Combine::SumProduct => "sum_product",
        })
    }
}

impl FromStr for Combine {
    type Err = UktlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Combine::Sum),
            "product" => Ok(Combine::Product),
            "sum_product" | "sum-product" => Ok(Combine::SumProduct),
            other => Err(UktlError::InvalidArgument(format!(
                "unknown kernel combination `{other}` (expected sum, product or sum_product)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// RBF bandwidth, shared by every mode.
    pub bandwidth: f64,
    /// Weight of the sum term in the sum-product mixture.
    pub mu: f64,
    pub combine: Combine,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            mu: 0.5,
            combine: Combine::SumProduct,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(UktlError::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(UktlError::InvalidArgument(format!(
                "mu must lie in [0, 1], got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// One (possibly weighted) basis per mode.
pub type BasisTuple = Vec<Matrix>;

pub fn bases_of(tuple: &SubspaceTuple) -> BasisTuple {
    tuple.iter().map(|s| s.basis().clone()).collect()
}

fn check_bases(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(UktlError::DimensionMismatch(format!(
            "mode bases {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `||AAᵀ - BBᵀ||_F^2` via `p x p` traces.
pub fn weighted_distance_sq(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_bases(a, b)?;
    let aa = cross_gram_norm_sq(a, a)?;
    let bb = cross_gram_norm_sq(b, b)?;
    let ab = cross_gram_norm_sq(a, b)?;
    Ok((aa + bb - 2.0 * ab).max(0.0))
}

#[inline]
pub fn rbf(dist_sq: f64, bandwidth: f64) -> f64 {
    (-dist_sq / (2.0 * bandwidth * bandwidth)).exp()
}

pub fn factor_kernel(a: &Matrix, b: &Matrix, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(UktlError::InvalidArgument(format!(
            "kernel bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(rbf(weighted_distance_sq(a, b)?, bandwidth))
}

/// Combines per-mode factor values. Sums and products run in mode order.
pub fn combine_factors(factors: &[f64], cfg: &KernelConfig) -> f64 {
    let sum = || factors.iter().sum::<f64>();
    let prod = || factors.iter().product::<f64>();
    match cfg.combine {
        Combine::Sum => sum(),
        Combine::Product => prod(),
        Combine::SumProduct => cfg.mu * sum() + (1.0 - cfg.mu) * prod(),
    }
}

fn check_tuples(a: &[Matrix], b: &[Matrix]) -> Result<()> {
    if a.len() != b.len() {
        return Err(UktlError::DimensionMismatch(format!(
            "{} modes vs {} modes",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(UktlError::Empty("tensor kernel needs at least one mode".into()));
    }
    Ok(())
}

pub fn tensor_kernel(a: &[Matrix], b: &[Matrix], cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    check_tuples(a, b)?;
    let factors = a
        .iter()
        .zip(b)
        .map(|(x, y)| factor_kernel(x, y, cfg.bandwidth))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_factors(&factors, cfg))
}

/// A basis tuple with its per-mode `||AᵀA||_F^2` precomputed.
struct Prepared<'a> {
    bases: &'a [Matrix],
    self_sq: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(bases: &'a [Matrix]) -> Result<Self> {
        let self_sq = bases
            .iter()
            .map(|b| cross_gram_norm_sq(b, b))
            .collect::<Result<_>>()?;
        Ok(Self { bases, self_sq })
    }

    fn kernel(&self, other: &Prepared<'_>, cfg: &KernelConfig) -> Result<f64> {
        check_tuples(self.bases, other.bases)?;
        let mut factors = Vec::with_capacity(self.bases.len());
        for m in 0..self.bases.len() {
            check_bases(&self.bases[m], &other.bases[m])?;
            let ab = cross_gram_norm_sq(&self.bases[m], &other.bases[m])?;
            let d = (self.self_sq[m] + other.self_sq[m] - 2.0 * ab).max(0.0);
            factors.push(rbf(d, cfg.bandwidth));
        }
        Ok(combine_factors(&factors, cfg))
    }
}

/// Kernel matrix between two lists of basis tuples.
///
/// When `rows` and `cols` are the same slice only the upper triangle is
/// evaluated and then mirrored, so the result is exactly symmetric.
pub fn gram_matrix(rows: &[BasisTuple], cols: &[BasisTuple], cfg: &KernelConfig) -> Result<Matrix> {
    cfg.validate()?;
    if rows.is_empty() || cols.is_empty() {
        return Err(UktlError::Empty("gram matrix needs nonempty inputs".into()));
    }
    if std::ptr::eq(rows, cols) {
        return gram_symmetric(rows, cfg);
    }
    let pr = rows.iter().map(|t| Prepared::new(t)).collect::<Result<Vec<_>>>()?;
    let pc = cols.iter().map(|t| Prepared::new(t)).collect::<Result<Vec<_>>>()?;
    let n_cols = cols.len();
    let data = (0..rows.len() * n_cols)
        .into_par_iter()
        .map(|idx| pr[idx / n_cols].kernel(&pc[idx % n_cols], cfg))
        .collect::<Result<Vec<f64>>>()?;
    Matrix::new(rows.len(), n_cols, data)
}

pub fn gram_symmetric(items: &[BasisTuple], cfg: &KernelConfig) -> Result<Matrix> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(UktlError::Empty("gram matrix needs nonempty inputs".into()));
    }
    let n = items.len();
    let prepared = items.iter().map(|t| Prepared::new(t)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let upper = pairs
        .par_iter()
        .map(|&(i, j)| prepared[i].kernel(&prepared[j], cfg))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Matrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(upper) {
        out.set(i, j, v);
        out.set(j, i, v);
    }
    Ok(out)
}

/// Linear kernel on projectors, `sum_m ||A_mᵀB_m||_F^2`. Baseline only.
pub fn linear_projection_kernel(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    check_tuples(a, b)?;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            check_bases(x, y)?;
            cross_gram_norm_sq(x, y)
        })
        .sum()
}

/// Median of pairwise per-mode projector distances over a seeded subsample.
pub fn median_bandwidth(items: &[BasisTuple], max_samples: usize, seed: u64) -> Result<f64> {
    if items.len() < 2 {
        return Err(UktlError::Empty("median heuristic needs at least two samples".into()));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(max_samples.max(2));
    let mut dists = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            check_tuples(&items[i], &items[j])?;
            for (x, y) in items[i].iter().zip(&items[j]) {
                dists.push(weighted_distance_sq(x, y)?.sqrt());
            }
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}
