//! Brute-force reference implementations for cross-checking the fast paths.
//!
//! Nothing here reuses the code it checks: unfoldings are literal index loops,
//! singular vectors come from nalgebra, projectors are materialized as full
//! `I_m x I_m` matrices and Frobenius differences are summed entry by entry.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UktlError};
use crate::kernel::{bases_of, Combine, KernelConfig};
use crate::linalg::Matrix;
use crate::nystrom::fit_nystrom;
use crate::pivot::{soft_kmeans, SoftKMeansConfig};
use crate::subspace::tensor_subspaces;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured.is_finite() && measured <= tolerance,
        }
    }

    /// Passes when `measured >= threshold`.
    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance: threshold,
            passed: measured.is_finite() && measured >= threshold,
        }
    }

    pub fn check(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            measured: if ok { 1.0 } else { 0.0 },
            tolerance: 1.0,
            passed: ok,
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} measured={:e} bound={:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

/// Mode-`mode` unfolding by direct index arithmetic: column index runs over
/// the remaining modes with the lowest mode varying fastest.
fn literal_unfold(t: &Tensor, mode: usize) -> DMatrix<f64> {
    let dims = t.dims();
    let rows = dims[mode];
    let cols = t.len() / rows;
    let mut out = DMatrix::zeros(rows, cols);
    let mut index = vec![0usize; dims.len()];
    for flat in 0..t.len() {
        let mut rem = flat;
        for m in (0..dims.len()).rev() {
            index[m] = rem % dims[m];
            rem /= dims[m];
        }
        let mut col = 0;
        let mut stride = 1;
        for m in 0..dims.len() {
            if m != mode {
                col += index[m] * stride;
                stride *= dims[m];
            }
        }
        out[(index[mode], col)] = t.values()[flat];
    }
    out
}

/// Leading `p` left singular vectors as columns, ordered by singular value.
fn leading_left_vectors(x: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    DMatrix::from_fn(x.nrows(), p, |i, k| u[(i, order[k])])
}

/// `sum_k u_k u_kᵀ / sigma_k` as a full matrix.
fn weighted_projector(u: &DMatrix<f64>, sigma: Option<&[f64]>) -> DMatrix<f64> {
    let n = u.nrows();
    let mut p = DMatrix::zeros(n, n);
    for k in 0..u.ncols() {
        let w = sigma.map_or(1.0, |s| 1.0 / s[k]);
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] += w * u[(i, k)] * u[(j, k)];
            }
        }
    }
    p
}

fn literal_kernel(a: &[DMatrix<f64>], b: &[DMatrix<f64>], cfg: &KernelConfig) -> f64 {
    let factors: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(pa, pb)| {
            let mut d = 0.0;
            for i in 0..pa.nrows() {
                for j in 0..pa.ncols() {
                    let diff = pa[(i, j)] - pb[(i, j)];
                    d += diff * diff;
                }
            }
            (-d / (2.0 * cfg.bandwidth * cfg.bandwidth)).exp()
        })
        .collect();
    let mut sum = 0.0;
    let mut prod = 1.0;
    for f in &factors {
        sum += f;
        prod *= f;
    }
    match cfg.combine {
        Combine::Sum => sum,
        Combine::Product => prod,
        Combine::SumProduct => cfg.mu * sum + (1.0 - cfg.mu) * prod,
    }
}

/// Full kernel matrix from explicit (optionally `1/sigma`-weighted) projectors.
///
/// `sigmas[i][m][k]` weights direction `k` of mode `m` of tensor `i`.
pub fn brute_force_gram(
    tensors: &[Tensor],
    orders: &[usize],
    cfg: &KernelConfig,
    sigmas: Option<&[Vec<Vec<f64>>]>,
) -> Result<Matrix> {
    if tensors.is_empty() {
        return Err(UktlError::Empty("no tensors".into()));
    }
    if let Some(s) = sigmas {
        if s.len() != tensors.len() {
            return Err(UktlError::DimensionMismatch("one sigma tuple per tensor is required".into()));
        }
    }
    let projectors: Vec<Vec<DMatrix<f64>>> = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.order() != orders.len() {
                return Err(UktlError::DimensionMismatch("one order per mode is required".into()));
            }
            Ok(orders
                .iter()
                .enumerate()
                .map(|(m, &p)| {
                    let u = leading_left_vectors(&literal_unfold(t, m), p);
                    weighted_projector(&u, sigmas.map(|s| s[i][m].as_slice()))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = tensors.len();
    Ok(Matrix::from_fn(n, n, |i, j| literal_kernel(&projectors[i], &projectors[j], cfg)))
}

fn relative_frobenius(k: &Matrix, approx: &Matrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in k.as_slice().iter().zip(approx.as_slice()) {
        num += (a - b) * (a - b);
        den += a * a;
    }
    (num / den).sqrt()
}

/// `||K_NN - GGᵀ||_F / ||K_NN||_F` for soft k-means pivots at each count in `counts`.
pub fn nystrom_error_curve(
    tensors: &[Tensor],
    orders: &[usize],
    cfg: &KernelConfig,
    counts: &[usize],
    seed: u64,
    temperature: f64,
) -> Result<Vec<(usize, f64)>> {
    let k = brute_force_gram(tensors, orders, cfg, None)?;
    let items = tensors
        .iter()
        .map(|t| tensor_subspaces(t, orders).map(|s| bases_of(&s)))
        .collect::<Result<Vec<_>>>()?;
    counts
        .iter()
        .map(|&c| {
            let kcfg = SoftKMeansConfig {
                clusters: c,
                temperature,
                seed,
                ..SoftKMeansConfig::default()
            };
            let pivots = soft_kmeans(tensors, &kcfg)?
                .pivots
                .iter()
                .map(|z| tensor_subspaces(z, orders).map(|s| bases_of(&s)))
                .collect::<Result<Vec<_>>>()?;
            let map = fit_nystrom(pivots, *cfg, crate::nystrom::DEFAULT_CLAMP_EPS)?;
            let g = map.raw_features(&items)?;
            Ok((c, relative_frobenius(&k, &g.matmul(&g.transpose())?)))
        })
        .collect()
}

/// Relative error of the Nyström approximation that uses the samples themselves as pivots.
pub fn nystrom_self_error(tensors: &[Tensor], orders: &[usize], cfg: &KernelConfig) -> Result<f64> {
    let k = brute_force_gram(tensors, orders, cfg, None)?;
    let items = tensors
        .iter()
        .map(|t| tensor_subspaces(t, orders).map(|s| bases_of(&s)))
        .collect::<Result<Vec<_>>>()?;
    let map = fit_nystrom(items.clone(), *cfg, crate::nystrom::DEFAULT_CLAMP_EPS)?;
    let g = map.raw_features(&items)?;
    Ok(relative_frobenius(&k, &g.matmul(&g.transpose())?))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from explicit initial centroids. Ties go to the lowest
/// centroid index; empty clusters keep their previous centroid.
pub fn hard_kmeans_from(data: &[Tensor], init: &[Tensor], iters: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if data.is_empty() || init.is_empty() {
        return Err(UktlError::Empty("hard k-means needs data and centroids".into()));
    }
    let dims = data[0].dims().to_vec();
    let mut cents: Vec<Vec<f64>> = init.iter().map(|t| t.values().to_vec()).collect();
    let mut labels = vec![0usize; data.len()];
    for _ in 0..=iters {
        for (i, x) in data.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in cents.iter().enumerate() {
                let d = sq_dist(x.values(), c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            labels[i] = best;
        }
        let mut next = cents.clone();
        for (j, c) in next.iter_mut().enumerate() {
            let members: Vec<&Tensor> = data.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(x, _)| x).collect();
            if members.is_empty() {
                continue;
            }
            for (e, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|x| x.values()[e]).sum::<f64>() / members.len() as f64;
            }
        }
        if next == cents {
            break;
        }
        cents = next;
    }
    let cents = cents
        .into_iter()
        .map(|c| Tensor::new(dims.clone(), c))
        .collect::<Result<Vec<_>>>()?;
    Ok((cents, labels))
}

/// Hard k-means with its own seeded farthest-point start.
pub fn hard_kmeans(data: &[Tensor], clusters: usize, seed: u64, iters: usize) -> Result<Vec<Tensor>> {
    if clusters == 0 || clusters > data.len() {
        return Err(UktlError::InvalidArgument(format!(
            "cluster count {clusters} must be in 1..={}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..data.len())];
    while chosen.len() < clusters {
        let far = (0..data.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let d = chosen
                    .iter()
                    .map(|&c| sq_dist(data[i].values(), data[c].values()))
                    .fold(f64::INFINITY, f64::min);
                (i, d)
            })
            .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        chosen.push(far.0);
    }
    let init: Vec<Tensor> = chosen.iter().map(|&i| data[i].clone()).collect();
    Ok(hard_kmeans_from(data, &init, iters)?.0)
}
