//! Soft k-means over tensors, used to place the Nyström pivots.
//!
//! Responsibilities are a temperature softmax of negative squared Frobenius
//! distances; pivots are responsibility-weighted means. Initialization is
//! greedy farthest-point from a seeded random start.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UktlError};
use crate::linalg::Matrix;
use crate::tensor::Tensor;

const EMPTY_CLUSTER_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftKMeansConfig {
    pub clusters: usize,
    pub temperature: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SoftKMeansConfig {
    fn default() -> Self {
        Self {
            clusters: 16,
            temperature: 1.0,
            max_iter: 100,
            tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PivotSet {
    pub pivots: Vec<Tensor>,
    pub temperature: f64,
    /// `N x C`, row-stochastic.
    pub assignments: Matrix,
    /// `sum_ij alpha_ij ||X_i - Z_j||^2` after each E-step.
    pub objective_history: Vec<f64>,
    /// Objective plus `T · sum alpha log alpha`; nonincreasing by construction.
    pub free_energy_history: Vec<f64>,
}

impl PivotSet {
    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(UktlError::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

/// Softmax over negative scaled distances, with max-subtraction.
fn softmax_neg(dists: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = dists.iter().map(|d| -d / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn soft_assign(x: &Tensor, pivots: &[Tensor], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if pivots.is_empty() {
        return Err(UktlError::Empty("soft assignment needs at least one pivot".into()));
    }
    let dists = pivots
        .iter()
        .map(|z| x.distance_sq(z))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_neg(&dists, temperature))
}

/// Greedy farthest-point selection from a seeded random start.
pub fn farthest_point_init(data: &[Tensor], clusters: usize, seed: u64) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(UktlError::Empty("no data to cluster".into()));
    }
    if clusters == 0 || clusters > data.len() {
        return Err(UktlError::InvalidArgument(format!(
            "cluster count {clusters} must be in 1..={}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..data.len());
    let mut chosen = vec![start];
    let mut taken = vec![false; data.len()];
    taken[start] = true;
    let mut min_d: Vec<f64> = data
        .par_iter()
        .map(|x| x.distance_sq(&data[start]))
        .collect::<Result<_>>()?;
    while chosen.len() < clusters {
        let mut best: Option<usize> = None;
        for i in 0..data.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if min_d[i] <= min_d[b] => {}
                _ => best = Some(i),
            }
        }
        let next = best.expect("clusters <= data.len()");
        taken[next] = true;
        chosen.push(next);
        for (i, x) in data.iter().enumerate() {
            min_d[i] = min_d[i].min(x.distance_sq(&data[next])?);
        }
    }
    Ok(chosen)
}

pub fn soft_kmeans(data: &[Tensor], cfg: &SoftKMeansConfig) -> Result<PivotSet> {
    let init = farthest_point_init(data, cfg.clusters, cfg.seed)?;
    let pivots = init.into_iter().map(|i| data[i].clone()).collect();
    soft_kmeans_from(data, pivots, cfg)
}

/// Soft k-means from explicit initial pivots (`cfg.clusters` and `cfg.seed` are ignored).
pub fn soft_kmeans_from(data: &[Tensor], init: Vec<Tensor>, cfg: &SoftKMeansConfig) -> Result<PivotSet> {
    check_temperature(cfg.temperature)?;
    if data.is_empty() {
        return Err(UktlError::Empty("no data to cluster".into()));
    }
    if init.is_empty() || init.len() > data.len() {
        return Err(UktlError::InvalidArgument(format!(
            "pivot count {} must be in 1..={}",
            init.len(),
            data.len()
        )));
    }
    if cfg.max_iter == 0 {
        return Err(UktlError::InvalidArgument("max_iter must be at least 1".into()));
    }
    for x in data.iter().chain(&init) {
        data[0].check_same_dims(x)?;
    }

    let n = data.len();
    let c = init.len();
    let t = cfg.temperature;
    let mut pivots = init;
    let mut objective_history = Vec::new();
    let mut free_energy_history = Vec::new();

    let mut iter = 0;
    loop {
        // E-step.
        let rows: Vec<(Vec<f64>, Vec<f64>)> = data
            .par_iter()
            .map(|x| {
                let d = pivots
                    .iter()
                    .map(|z| x.distance_sq(z))
                    .collect::<Result<Vec<_>>>()?;
                let a = softmax_neg(&d, t);
                Ok((d, a))
            })
            .collect::<Result<_>>()?;
        let mut objective = 0.0;
        let mut entropy_term = 0.0;
        for (d, a) in &rows {
            for (dj, aj) in d.iter().zip(a) {
                objective += aj * dj;
                if *aj > 0.0 {
                    entropy_term += aj * aj.ln();
                }
            }
        }
        let prev = objective_history.last().copied();
        objective_history.push(objective);
        free_energy_history.push(objective + t * entropy_term);

        let converged = prev.is_some_and(|p| p - objective < cfg.tol);
        if iter == cfg.max_iter || converged {
            let assignments =
                Matrix::new(n, c, rows.into_iter().flat_map(|(_, a)| a).collect())?;
            return Ok(PivotSet {
                pivots,
                temperature: t,
                assignments,
                objective_history,
                free_energy_history,
            });
        }

        // M-step, fixed summation order over samples.
        let dims = data[0].dims().to_vec();
        let len = data[0].len();
        let mut reseeded = vec![false; n];
        let mut next = Vec::with_capacity(c);
        for j in 0..c {
            let mass: f64 = rows.iter().map(|(_, a)| a[j]).sum();
            if mass < EMPTY_CLUSTER_MASS {
                // Re-seed at the worst-explained datum not already used.
                let mut worst: Option<(usize, f64)> = None;
                for (i, (d, a)) in rows.iter().enumerate() {
                    if reseeded[i] {
                        continue;
                    }
                    let err: f64 = d.iter().zip(a).map(|(x, y)| x * y).sum();
                    if worst.is_none_or(|(_, w)| err > w) {
                        worst = Some((i, err));
                    }
                }
                let (i, _) = worst.expect("C <= N");
                reseeded[i] = true;
                next.push(data[i].clone());
                continue;
            }
            let mut acc = vec![0.0; len];
            for ((_, a), x) in rows.iter().zip(data) {
                let w = a[j];
                if w == 0.0 {
                    continue;
                }
                for (s, v) in acc.iter_mut().zip(x.values()) {
                    *s += w * v;
                }
            }
            acc.iter_mut().for_each(|s| *s /= mass);
            next.push(Tensor::new(dims.clone(), acc)?);
        }
        pivots = next;
        iter += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn cluster_data(seed: u64, per: usize, centers: &[f64]) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![];
        for &c in centers {
            for _ in 0..per {
                out.push(
                    Tensor::from_fn(vec![2, 3], |_| c + 0.1 * rng.sample::<f64, _>(StandardNormal))
                        .unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn softmax_example() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let pivots = vec![
            Tensor::new(vec![1], vec![1.0]).unwrap(),
            Tensor::new(vec![1], vec![2f64.sqrt()]).unwrap(),
        ];
        let a = soft_assign(&x, &pivots, 1.0).unwrap();
        assert!((a[0] - 0.731059).abs() < 1e-6);
        assert!((a[1] - 0.268941).abs() < 1e-6);
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        assert!((a[0] - e1 / (e1 + e2)).abs() < 1e-12);
    }

    #[test]
    fn hard_limit_and_symmetry() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let pivots = vec![
            x.clone(),
            Tensor::new(vec![2], vec![5.0, 0.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 5.0]).unwrap(),
        ];
        let a = soft_assign(&x, &pivots, 1e-6).unwrap();
        assert_eq!(a, vec![1.0, 0.0, 0.0]);

        let ring = vec![
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, -1.0]).unwrap(),
        ];
        for v in soft_assign(&x, &ring, 0.7).unwrap() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(soft_assign(&x, &ring, 0.0).is_err());
        assert!(soft_assign(&Tensor::zeros(vec![3]).unwrap(), &ring, 1.0).is_err());
    }

    #[test]
    fn single_cluster_is_mean() {
        let data = cluster_data(1, 7, &[0.0, 3.0]);
        let cfg = SoftKMeansConfig {
            clusters: 1,
            ..SoftKMeansConfig::default()
        };
        let ps = soft_kmeans(&data, &cfg).unwrap();
        let n = data.len() as f64;
        let mut mean = vec![0.0; 6];
        for x in &data {
            for (m, v) in mean.iter_mut().zip(x.values()) {
                *m += v / n;
            }
        }
        for (a, b) in ps.pivots[0].values().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_point_when_initialized_at_data() {
        let data = cluster_data(2, 1, &[0.0, 2.0, 4.0, 6.0]);
        let cfg = SoftKMeansConfig {
            clusters: 4,
            temperature: 1e-3,
            max_iter: 1,
            tol: 0.0,
            seed: 0,
        };
        let ps = soft_kmeans_from(&data, data.clone(), &cfg).unwrap();
        for (z, x) in ps.pivots.iter().zip(&data) {
            assert!(z.distance_sq(x).unwrap().sqrt() < 1e-8);
        }
    }

    #[test]
    fn rows_stochastic_and_free_energy_monotone() {
        let data = cluster_data(3, 10, &[0.0, 0.4, 0.8]);
        let cfg = SoftKMeansConfig {
            clusters: 3,
            temperature: 0.5,
            max_iter: 50,
            tol: 0.0,
            seed: 4,
        };
        let ps = soft_kmeans(&data, &cfg).unwrap();
        for i in 0..data.len() {
            let row = ps.assignments.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
        for w in ps.free_energy_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{w:?}");
        }
    }

    #[test]
    fn objective_nonincreasing_on_separated_data() {
        let data = cluster_data(5, 12, &[0.0, 5.0, 10.0]);
        let cfg = SoftKMeansConfig {
            clusters: 3,
            temperature: 1.0,
            max_iter: 30,
            tol: 0.0,
            seed: 1,
        };
        let ps = soft_kmeans(&data, &cfg).unwrap();
        for w in ps.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{w:?}");
        }
    }

    #[test]
    fn deterministic() {
        let data = cluster_data(6, 8, &[0.0, 1.0]);
        let cfg = SoftKMeansConfig {
            clusters: 3,
            ..SoftKMeansConfig::default()
        };
        assert_eq!(soft_kmeans(&data, &cfg).unwrap(), soft_kmeans(&data, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let data = cluster_data(7, 2, &[0.0]);
        let cfg = SoftKMeansConfig {
            clusters: 3,
            ..SoftKMeansConfig::default()
        };
        assert!(soft_kmeans(&data, &cfg).is_err());
        assert!(soft_kmeans(&[], &cfg).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Two identical pivots at one end: the far datum ends up with no mass
        // behind the second, which must be re-seeded rather than become NaN.
        let data: Vec<Tensor> = [0.0, 0.1, 100.0]
            .iter()
            .map(|&v| Tensor::new(vec![1], vec![v]).unwrap())
            .collect();
        let init = vec![data[0].clone(), Tensor::new(vec![1], vec![-1000.0]).unwrap()];
        let cfg = SoftKMeansConfig {
            clusters: 2,
            temperature: 1e-3,
            max_iter: 3,
            tol: 0.0,
            seed: 0,
        };
        let ps = soft_kmeans_from(&data, init, &cfg).unwrap();
        assert!(ps.pivots.iter().all(|z| z.values()[0].is_finite()));
        assert!(ps.pivots.iter().any(|z| z.values()[0] == 100.0));
    }
}
