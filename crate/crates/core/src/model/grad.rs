//! Cached training path with analytic gradients.
//!
//! With `a_k = 1/sigma_k`, `G = UᵀU` and `c_jk = ||Ṽ_jᵀ u_k||²` for pivot `j`,
//! the weighted projector distance of one mode is
//!
//! ```text
//! d_j = sum_kl a_k a_l G_kl² + ||Ṽ_jᵀṼ_j||² - 2 sum_k a_k c_jk
//! ```
//!
//! Everything except `a` is fixed between refreshes, so it is cached once per
//! sample and the per-step cost is `O(C·M·p²)`.

use rayon::prelude::*;

use super::{cross_entropy, softmax, ParamGroup, UktlModel};
use crate::error::{Result, UktlError};
use crate::kernel::{combine_factors, rbf, BasisTuple, Combine};
use crate::linalg::Matrix;
use crate::subspace::SubspaceTuple;
use crate::tensor::Tensor;
use crate::uncertainty::{logistic, msn_features, uncertainty_penalty, uncertainty_penalty_grad};

struct SampleCache {
    features: Vec<Vec<f64>>,
    /// `[mode]`, `p x p` with entries `(u_kᵀu_l)²`.
    gram_sq: Vec<Matrix>,
    /// `[mode]`, `C x p` with entries `c_jk`.
    cross: Vec<Matrix>,
}

pub struct TrainingCache {
    tuples: Vec<SubspaceTuple>,
    samples: Vec<SampleCache>,
    /// `[pivot][mode]`, `||ṼᵀṼ||²`.
    pivot_self: Vec<Vec<f64>>,
    targets: Vec<usize>,
}

struct SampleState {
    logistic: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    /// `[pivot][mode]`.
    dist: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    g: Vec<f64>,
    logits: Vec<f64>,
}

fn cross_terms(tuple: &SubspaceTuple, pivot_bases: &[BasisTuple]) -> Result<Vec<Matrix>> {
    tuple
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let u = s.basis();
            let mut out = Matrix::zeros(pivot_bases.len(), u.cols());
            for (j, pb) in pivot_bases.iter().enumerate() {
                let uv = u.t_matmul(&pb[m])?;
                for k in 0..u.cols() {
                    out.set(j, k, uv.row(k).iter().map(|x| x * x).sum());
                }
            }
            Ok(out)
        })
        .collect()
}

impl TrainingCache {
    pub fn new(model: &UktlModel, tensors: &[Tensor], labels: &[usize]) -> Result<Self> {
        let tuples = model.subspaces_of(tensors)?;
        Self::from_tuples(model, tuples, labels)
    }

    pub(crate) fn from_tuples(model: &UktlModel, tuples: Vec<SubspaceTuple>, labels: &[usize]) -> Result<Self> {
        if tuples.len() != labels.len() {
            return Err(UktlError::DimensionMismatch(format!(
                "{} samples but {} labels",
                tuples.len(),
                labels.len()
            )));
        }
        let targets = labels
            .iter()
            .map(|&l| model.class_index(l))
            .collect::<Result<Vec<_>>>()?;
        let mut cache = Self {
            samples: Vec::with_capacity(tuples.len()),
            tuples,
            pivot_self: Vec::new(),
            targets,
        };
        cache.samples = cache
            .tuples
            .par_iter()
            .map(|t| {
                let features = t.iter().map(|s| msn_features(model.msn.input, s)).collect();
                let gram_sq = t
                    .iter()
                    .map(|s| {
                        let g = s.basis().t_matmul(s.basis())?;
                        Ok(Matrix::from_fn(g.rows(), g.cols(), |k, l| g.get(k, l) * g.get(k, l)))
                    })
                    .collect::<Result<_>>()?;
                Ok(SampleCache {
                    features,
                    gram_sq,
                    cross: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        cache.refresh_pivots(model)?;
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub(crate) fn tuples(&self) -> &[SubspaceTuple] {
        &self.tuples
    }

    /// Recomputes pivot-dependent terms after the model's map changed.
    pub fn refresh_pivots(&mut self, model: &UktlModel) -> Result<()> {
        let pivots = &model.map.pivot_bases;
        self.pivot_self = pivots
            .iter()
            .map(|pb| pb.iter().map(|v| v.t_matmul(v).map(|g| g.frobenius_norm_sq())).collect())
            .collect::<Result<_>>()?;
        let cross = self
            .tuples
            .par_iter()
            .map(|t| cross_terms(t, pivots))
            .collect::<Result<Vec<_>>>()?;
        for (s, c) in self.samples.iter_mut().zip(cross) {
            s.cross = c;
        }
        Ok(())
    }

    fn forward(&self, model: &UktlModel, i: usize) -> Result<SampleState> {
        let sc = &self.samples[i];
        let msn = &model.msn;
        let cfg = model.kernel_config();
        let modes = sc.features.len();
        let mut logistic_vals = Vec::with_capacity(modes);
        let mut sigma = Vec::with_capacity(modes);
        let mut self_term = Vec::with_capacity(modes);
        for m in 0..modes {
            let z = msn.pre_activation(m, &sc.features[m])?;
            let s: Vec<f64> = z.iter().map(|&v| logistic(v)).collect();
            let sig: Vec<f64> = z.iter().map(|&v| msn.scaled_sigmoid(v)).collect();
            let a: Vec<f64> = sig.iter().map(|v| 1.0 / v).collect();
            let gsq = &sc.gram_sq[m];
            let mut t = 0.0;
            for k in 0..a.len() {
                for l in 0..a.len() {
                    t += a[k] * a[l] * gsq.get(k, l);
                }
            }
            self_term.push(t);
            logistic_vals.push(s);
            sigma.push(sig);
        }
        let c = self.pivot_self.len();
        let mut dist = Vec::with_capacity(c);
        let mut factors = Vec::with_capacity(c);
        let mut kvals = Vec::with_capacity(c);
        for j in 0..c {
            let mut dj = Vec::with_capacity(modes);
            let mut fj = Vec::with_capacity(modes);
            for m in 0..modes {
                let cross = sc.cross[m].row(j);
                let lin: f64 = sigma[m].iter().zip(cross).map(|(s, c)| c / s).sum();
                let d = self_term[m] + self.pivot_self[j][m] - 2.0 * lin;
                fj.push(rbf(d.max(0.0), cfg.bandwidth));
                dj.push(d);
            }
            kvals.push(combine_factors(&fj, &cfg));
            dist.push(dj);
            factors.push(fj);
        }
        let mean = model
            .map
            .feature_mean
            .as_ref()
            .ok_or_else(|| UktlError::NotFitted("Nyström feature mean not estimated".into()))?;
        let p_inv = &model.map.p_inv;
        let g: Vec<f64> = (0..c)
            .map(|col| (0..c).map(|j| kvals[j] * p_inv.get(j, col)).sum::<f64>() - mean[col])
            .collect();
        let logits = model.classifier.logits(&g);
        Ok(SampleState {
            logistic: logistic_vals,
            sigma,
            dist,
            factors,
            g,
            logits,
        })
    }

    /// Logits of cached sample `i` under the current parameters.
    pub fn logits(&self, model: &UktlModel, i: usize) -> Result<Vec<f64>> {
        Ok(self.forward(model, i)?.logits)
    }

    pub fn accuracy(&self, model: &UktlModel) -> Result<f64> {
        let hits = (0..self.len())
            .into_par_iter()
            .map(|i| Ok((super::argmax(&self.logits(model, i)?) == self.targets[i]) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / self.len() as f64)
    }

    /// Loss of the batch and its gradient in [`UktlModel::params`] layout.
    pub fn loss_and_grad(&self, model: &UktlModel, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(UktlError::Empty("empty batch".into()));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.len()) {
            return Err(UktlError::InvalidArgument(format!("sample index {bad} out of range")));
        }
        let states = batch
            .par_iter()
            .map(|&i| self.forward(model, i))
            .collect::<Result<Vec<_>>>()?;
        let n = batch.len() as f64;
        let sigmas: Vec<Vec<Vec<f64>>> = states.iter().map(|s| s.sigma.clone()).collect();
        let beta = model.config.beta;
        let penalty = uncertainty_penalty(&sigmas, beta)?;
        let pen_grad = uncertainty_penalty_grad(&sigmas, beta)?;
        let ce: f64 = states
            .iter()
            .zip(batch)
            .map(|(s, &i)| cross_entropy(&s.logits, self.targets[i]))
            .sum::<f64>()
            / n;

        let per_sample = states
            .par_iter()
            .zip(batch.par_iter())
            .zip(pen_grad.par_iter())
            .map(|((state, &i), pg)| self.sample_grad(model, i, state, pg, n))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; per_sample[0].len()];
        for g in &per_sample {
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        Ok((ce + penalty, grad))
    }

    fn sample_grad(
        &self,
        model: &UktlModel,
        i: usize,
        state: &SampleState,
        pen_grad: &[Vec<f64>],
        n: f64,
    ) -> Result<Vec<f64>> {
        let sc = &self.samples[i];
        let cfg = model.kernel_config();
        let s2 = cfg.bandwidth * cfg.bandwidth;
        let w = &model.classifier.weights;
        let (k_classes, c) = (w.rows(), w.cols());
        let modes = sc.features.len();

        let mut delta = softmax(&state.logits);
        delta[self.targets[i]] -= 1.0;
        delta.iter_mut().for_each(|d| *d /= n);

        let dg: Vec<f64> = (0..c)
            .map(|j| (0..k_classes).map(|cl| w.get(cl, j) * delta[cl]).sum())
            .collect();
        let p_inv = &model.map.p_inv;
        let dk: Vec<f64> = (0..c)
            .map(|j| (0..c).map(|col| p_inv.get(j, col) * dg[col]).sum())
            .collect();

        let a: Vec<Vec<f64>> = state
            .sigma
            .iter()
            .map(|sig| sig.iter().map(|v| 1.0 / v).collect())
            .collect();
        // 2 sum_l a_l G_kl², independent of the pivot.
        let h: Vec<Vec<f64>> = (0..modes)
            .map(|m| {
                let gsq = &sc.gram_sq[m];
                (0..a[m].len())
                    .map(|k| 2.0 * (0..a[m].len()).map(|l| a[m][l] * gsq.get(k, l)).sum::<f64>())
                    .collect()
            })
            .collect();

        let mut da: Vec<Vec<f64>> = a.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut dmu = 0.0;
        let mut dlog_bw = 0.0;
        for j in 0..c {
            let f = &state.factors[j];
            let mut prefix = vec![1.0; modes + 1];
            for m in 0..modes {
                prefix[m + 1] = prefix[m] * f[m];
            }
            let mut suffix = vec![1.0; modes + 1];
            for m in (0..modes).rev() {
                suffix[m] = suffix[m + 1] * f[m];
            }
            if cfg.combine == Combine::SumProduct {
                dmu += dk[j] * (f.iter().sum::<f64>() - prefix[modes]);
            }
            for m in 0..modes {
                let others = prefix[m] * suffix[m + 1];
                let dkdf = match cfg.combine {
                    Combine::Sum => 1.0,
                    Combine::Product => others,
                    Combine::SumProduct => cfg.mu + (1.0 - cfg.mu) * others,
                };
                let df = dk[j] * dkdf;
                let d = state.dist[j][m];
                if d < 0.0 {
                    continue;
                }
                dlog_bw += df * f[m] * d / s2;
                let dd = -df * f[m] / (2.0 * s2);
                let cross = sc.cross[m].row(j);
                for k in 0..a[m].len() {
                    da[m][k] += dd * (h[m][k] - 2.0 * cross[k]);
                }
            }
        }

        let mut grad = Vec::new();
        for (group, _) in model.layout() {
            match group {
                ParamGroup::Classifier => {
                    for d in &delta {
                        grad.extend(state.g.iter().map(|g| d * g));
                    }
                    grad.extend_from_slice(&delta);
                }
                ParamGroup::Msn => {
                    let span = model.msn.sigma_max - model.msn.sigma_min;
                    for m in 0..modes {
                        let dz: Vec<f64> = (0..a[m].len())
                            .map(|k| {
                                let sig = state.sigma[m][k];
                                let s = state.logistic[m][k];
                                let dsigma = -da[m][k] / (sig * sig) + pen_grad[m][k];
                                dsigma * span * s * (1.0 - s)
                            })
                            .collect();
                        let feats = &sc.features[m];
                        for dzk in &dz {
                            grad.extend(feats.iter().map(|x| dzk * x));
                        }
                        grad.extend_from_slice(&dz);
                    }
                }
                ParamGroup::Mu => {
                    let mu = cfg.mu;
                    grad.push(dmu * mu * (1.0 - mu));
                }
                ParamGroup::Bandwidth => grad.push(dlog_bw),
            }
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per parameter group.
    pub groups: Vec<(ParamGroup, f64)>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative errors below this magnitude are measured against it instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central finite differences of [`UktlModel::loss`] against the analytic gradient.
pub fn grad_check(model: &UktlModel, tensors: &[Tensor], labels: &[usize], step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(UktlError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let cache = TrainingCache::new(model, tensors, labels)?;
    let batch: Vec<usize> = (0..tensors.len()).collect();
    let (_, analytic) = cache.loss_and_grad(model, &batch)?;
    let base = model.params();
    let numeric = (0..base.len())
        .into_par_iter()
        .map(|idx| {
            let mut probe = model.clone();
            let mut p = base.clone();
            p[idx] = base[idx] + step;
            probe.set_params(&p)?;
            let up = probe.loss(tensors, labels)?;
            p[idx] = base[idx] - step;
            probe.set_params(&p)?;
            let down = probe.loss(tensors, labels)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    let groups: Vec<(ParamGroup, f64)> = model
        .param_groups()
        .into_iter()
        .map(|(g, range)| {
            let worst = range
                .map(|i| relative_error(analytic[i], numeric[i]))
                .fold(0.0, f64::max);
            (g, worst)
        })
        .collect();
    let max_rel_err = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        groups,
        analytic,
        numeric,
    })
}
