//! End-to-end classifier: mode subspaces, MSN reweighting, Nyström features
//! and a linear softmax head.
//!
//! The learnable parameters are the classifier, the MSN branches, the
//! sum-product weight `mu` (through a logistic) and optionally the log
//! bandwidth. Subspaces, pivots, `p_inv` and the feature mean are piecewise
//! constant: they are recomputed at refreshes, never differentiated.

mod checkpoint;
mod grad;
mod train;

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UktlError};
use crate::kernel::{BasisTuple, Combine, KernelConfig};
use crate::linalg::{dot, Matrix};
use crate::nystrom::{fit_nystrom, NystromMap, DEFAULT_CLAMP_EPS};
use crate::subspace::{tensor_subspaces, SubspaceTuple};
use crate::tensor::Tensor;
use crate::uncertainty::{logistic, logit, msn_forward, uncertainty_penalty, weight_subspace, MsnInput, MsnParams};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use grad::{grad_check, GradCheckReport, TrainingCache};
pub use train::{train, train_with_log, EpochStats, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (0-based) from which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Pivot kernel and feature mean are recomputed every this many epochs.
    pub refresh_every: usize,
    pub seed: u64,
    pub beta: f64,
    pub bandwidth: f64,
    pub mu: f64,
    pub combine: Combine,
    pub learn_mu: bool,
    pub learn_bandwidth: bool,
    pub freeze_msn: bool,
    pub pivots: usize,
    pub temperature: f64,
    pub kmeans_max_iter: usize,
    /// Subspace order used for every mode.
    pub p: usize,
    pub clamp_eps: f64,
    pub msn_input: MsnInput,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub msn_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 60,
            lr_decay_epochs: vec![40, 50],
            lr_decay_factor: 0.1,
            refresh_every: 5,
            seed: 0,
            beta: 0.01,
            bandwidth: 1.0,
            mu: 0.5,
            combine: Combine::SumProduct,
            learn_mu: true,
            learn_bandwidth: false,
            freeze_msn: false,
            pivots: 16,
            temperature: 1.0,
            kmeans_max_iter: 100,
            p: 4,
            clamp_eps: DEFAULT_CLAMP_EPS,
            msn_input: MsnInput::SingularValues,
            sigma_min: 0.1,
            sigma_max: 10.0,
            msn_init_scale: 0.1,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(UktlError::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("learning_rate", self.learning_rate)?;
        positive("lr_decay_factor", self.lr_decay_factor)?;
        positive("bandwidth", self.bandwidth)?;
        positive("temperature", self.temperature)?;
        positive("sigma_min", self.sigma_min)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(UktlError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
            ("clamp_eps", self.clamp_eps),
            ("msn_init_scale", self.msn_init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(UktlError::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("refresh_every", self.refresh_every),
            ("pivots", self.pivots),
            ("kmeans_max_iter", self.kmeans_max_iter),
            ("p", self.p),
        ] {
            if v == 0 {
                return Err(UktlError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(UktlError::InvalidArgument(format!(
                "sigma_max ({}) must exceed sigma_min ({})",
                self.sigma_max, self.sigma_min
            )));
        }
        let open = self.learn_mu && self.combine == Combine::SumProduct;
        if open && !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(UktlError::InvalidArgument(format!(
                "a learnable mu must start strictly inside (0, 1), got {}",
                self.mu
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(UktlError::InvalidArgument(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(steps as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// `num_classes x C`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn zeros(num_classes: usize, features: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, features),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn logits(&self, g: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|c| dot(self.weights.row(c), g) + self.bias[c])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Classifier,
    Msn,
    Mu,
    Bandwidth,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Classifier => "classifier",
            ParamGroup::Msn => "msn",
            ParamGroup::Mu => "mu",
            ParamGroup::Bandwidth => "bandwidth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UktlModel {
    pub config: TrainConfig,
    pub dims: Vec<usize>,
    pub orders: Vec<usize>,
    /// Class index to dataset label.
    pub labels: Vec<usize>,
    pub msn: MsnParams,
    pub mu_raw: f64,
    pub log_bandwidth: f64,
    pub pivots: Vec<Tensor>,
    /// `[pivot][mode][k]`, frozen at the last refresh.
    pub pivot_sigmas: Vec<Vec<Vec<f64>>>,
    pub map: NystromMap,
    pub classifier: Classifier,
}

pub(crate) fn weighted_tuple(msn: &MsnParams, tuple: &SubspaceTuple) -> Result<(BasisTuple, Vec<Vec<f64>>)> {
    let mut bases = Vec::with_capacity(tuple.len());
    let mut sigmas = Vec::with_capacity(tuple.len());
    for (m, s) in tuple.iter().enumerate() {
        let sigma = msn_forward(msn, s, m)?;
        bases.push(weight_subspace(s, &sigma)?);
        sigmas.push(sigma);
    }
    Ok((bases, sigmas))
}

pub(crate) fn apply_sigmas(tuple: &SubspaceTuple, sigmas: &[Vec<f64>]) -> Result<BasisTuple> {
    tuple.iter().zip(sigmas).map(|(s, sig)| weight_subspace(s, sig)).collect()
}

impl UktlModel {
    /// Builds a model around fixed pivots with fresh MSN weights and a zero
    /// classifier, then fits the Nyström map on `train`.
    pub fn initialize<R: Rng + ?Sized>(
        config: TrainConfig,
        train: &[Tensor],
        labels: &[usize],
        pivots: Vec<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let first = train
            .first()
            .ok_or_else(|| UktlError::Empty("training set is empty".into()))?;
        let dims = first.dims().to_vec();
        let orders = vec![config.p; dims.len()];
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(UktlError::InvalidArgument(format!(
                "training needs at least two classes, found {}",
                classes.len()
            )));
        }
        let msn = MsnParams::init(
            &dims,
            &orders,
            config.msn_input,
            config.sigma_min,
            config.sigma_max,
            config.msn_init_scale,
            rng,
        )?;
        let mu_raw = if config.mu > 0.0 && config.mu < 1.0 { logit(config.mu) } else { 0.0 };
        let log_bandwidth = config.bandwidth.ln();
        let cfg = KernelConfig {
            bandwidth: config.bandwidth,
            mu: config.mu,
            combine: config.combine,
        };
        let c = pivots.len();
        let placeholder = NystromMap {
            pivot_bases: Vec::new(),
            cfg,
            p_inv: Matrix::identity(c.max(1)),
            feature_mean: None,
            clamp_eps: config.clamp_eps,
        };
        let mut model = Self {
            dims,
            orders,
            labels: classes.clone(),
            msn,
            mu_raw,
            log_bandwidth,
            pivots,
            pivot_sigmas: Vec::new(),
            map: placeholder,
            classifier: Classifier::zeros(classes.len(), c),
            config,
        };
        let tuples = model.subspaces_of(train)?;
        let pivot_tuples = model.subspaces_of(&model.pivots)?;
        model.refresh(&pivot_tuples, &tuples)?;
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_pivots(&self) -> usize {
        self.pivots.len()
    }

    pub fn mu(&self) -> f64 {
        if self.mu_learnable() {
            logistic(self.mu_raw)
        } else {
            self.config.mu
        }
    }

    pub fn bandwidth(&self) -> f64 {
        if self.config.learn_bandwidth {
            self.log_bandwidth.exp()
        } else {
            self.config.bandwidth
        }
    }

    pub(crate) fn mu_learnable(&self) -> bool {
        self.config.learn_mu && self.config.combine == Combine::SumProduct
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            bandwidth: self.bandwidth(),
            mu: self.mu(),
            combine: self.config.combine,
        }
    }

    fn sync_kernel(&mut self) {
        self.map.cfg = self.kernel_config();
    }

    pub fn class_index(&self, label: usize) -> Result<usize> {
        self.labels
            .binary_search(&label)
            .map_err(|_| UktlError::UnknownLabel(label))
    }

    fn check_dims(&self, t: &Tensor) -> Result<()> {
        if t.dims() != self.dims.as_slice() {
            return Err(UktlError::DimensionMismatch(format!(
                "model expects dims {:?}, got {:?}",
                self.dims,
                t.dims()
            )));
        }
        Ok(())
    }

    pub fn subspaces_of(&self, tensors: &[Tensor]) -> Result<Vec<SubspaceTuple>> {
        tensors
            .par_iter()
            .map(|t| {
                self.check_dims(t)?;
                tensor_subspaces(t, &self.orders)
            })
            .collect()
    }

    /// Recomputes pivot uncertainties, `p_inv` and the training feature mean
    /// under the current parameters.
    pub(crate) fn refresh(&mut self, pivot_tuples: &[SubspaceTuple], train_tuples: &[SubspaceTuple]) -> Result<()> {
        let (pivot_bases, pivot_sigmas): (Vec<_>, Vec<_>) = pivot_tuples
            .iter()
            .map(|t| weighted_tuple(&self.msn, t))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let mut map = fit_nystrom(pivot_bases, self.kernel_config(), self.config.clamp_eps)?;
        let train_bases = train_tuples
            .par_iter()
            .map(|t| weighted_tuple(&self.msn, t).map(|(b, _)| b))
            .collect::<Result<Vec<_>>>()?;
        map.embed_fit(&train_bases)?;
        self.map = map;
        self.pivot_sigmas = pivot_sigmas;
        Ok(())
    }

    /// Uncertainty vectors `[mode][k]` for one tensor.
    pub fn sigmas(&self, t: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_dims(t)?;
        let tuple = tensor_subspaces(t, &self.orders)?;
        Ok(weighted_tuple(&self.msn, &tuple)?.1)
    }

    /// Centred Nyström features, one row per tensor.
    pub fn features(&self, tensors: &[Tensor]) -> Result<Matrix> {
        let bases = tensors
            .par_iter()
            .map(|t| {
                self.check_dims(t)?;
                let tuple = tensor_subspaces(t, &self.orders)?;
                weighted_tuple(&self.msn, &tuple).map(|(b, _)| b)
            })
            .collect::<Result<Vec<_>>>()?;
        self.map.embed_apply(&bases)
    }

    /// Logits, one row per tensor.
    pub fn logits(&self, tensors: &[Tensor]) -> Result<Matrix> {
        let g = self.features(tensors)?;
        let k = self.num_classes();
        let mut out = Matrix::zeros(tensors.len(), k);
        for i in 0..tensors.len() {
            for (c, v) in self.classifier.logits(g.row(i)).into_iter().enumerate() {
                out.set(i, c, v);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, t: &Tensor) -> Result<Vec<f64>> {
        Ok(self.logits(std::slice::from_ref(t))?.row(0).to_vec())
    }

    pub fn predict(&self, tensors: &[Tensor]) -> Result<Vec<Prediction>> {
        if tensors.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(tensors)?;
        Ok((0..tensors.len())
            .map(|i| {
                let row = logits.row(i);
                let c = argmax(row);
                Prediction {
                    label: self.labels[c],
                    confidence: softmax(row)[c],
                }
            })
            .collect())
    }

    pub fn evaluate(&self, tensors: &[Tensor], labels: &[usize]) -> Result<f64> {
        check_batch(tensors, labels)?;
        let preds = self.predict(tensors)?;
        let hits = preds.iter().zip(labels).filter(|(p, &l)| p.label == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy plus the batch uncertainty penalty.
    pub fn loss(&self, tensors: &[Tensor], labels: &[usize]) -> Result<f64> {
        check_batch(tensors, labels)?;
        let targets = labels
            .iter()
            .map(|&l| self.class_index(l))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.logits(tensors)?;
        let ce: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &c)| cross_entropy(logits.row(i), c))
            .sum::<f64>()
            / tensors.len() as f64;
        let sigmas = tensors.iter().map(|t| self.sigmas(t)).collect::<Result<Vec<_>>>()?;
        Ok(ce + uncertainty_penalty(&sigmas, self.config.beta)?)
    }

    fn layout(&self) -> Vec<(ParamGroup, usize)> {
        let mut out = vec![(
            ParamGroup::Classifier,
            self.classifier.weights.as_slice().len() + self.classifier.bias.len(),
        )];
        if !self.config.freeze_msn {
            let n = self
                .msn
                .branches
                .iter()
                .map(|b| b.weights.as_slice().len() + b.bias.len())
                .sum();
            out.push((ParamGroup::Msn, n));
        }
        if self.mu_learnable() {
            out.push((ParamGroup::Mu, 1));
        }
        if self.config.learn_bandwidth {
            out.push((ParamGroup::Bandwidth, 1));
        }
        out
    }

    /// Index ranges of each trainable group inside [`UktlModel::params`].
    pub fn param_groups(&self) -> Vec<(ParamGroup, Range<usize>)> {
        let mut start = 0;
        self.layout()
            .into_iter()
            .map(|(g, n)| {
                start += n;
                (g, start - n..start)
            })
            .collect()
    }

    /// Flat vector of trainable parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (group, _) in self.layout() {
            match group {
                ParamGroup::Classifier => {
                    out.extend_from_slice(self.classifier.weights.as_slice());
                    out.extend_from_slice(&self.classifier.bias);
                }
                ParamGroup::Msn => {
                    for b in &self.msn.branches {
                        out.extend_from_slice(b.weights.as_slice());
                        out.extend_from_slice(&b.bias);
                    }
                }
                ParamGroup::Mu => out.push(self.mu_raw),
                ParamGroup::Bandwidth => out.push(self.log_bandwidth),
            }
        }
        out
    }

    /// Mask of parameters subject to weight decay (matrix weights only).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for (group, _) in self.layout() {
            match group {
                ParamGroup::Classifier => {
                    out.extend(std::iter::repeat_n(true, self.classifier.weights.as_slice().len()));
                    out.extend(std::iter::repeat_n(false, self.classifier.bias.len()));
                }
                ParamGroup::Msn => {
                    for b in &self.msn.branches {
                        out.extend(std::iter::repeat_n(true, b.weights.as_slice().len()));
                        out.extend(std::iter::repeat_n(false, b.bias.len()));
                    }
                }
                ParamGroup::Mu | ParamGroup::Bandwidth => out.push(false),
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let expected: usize = self.layout().iter().map(|(_, n)| n).sum();
        if params.len() != expected {
            return Err(UktlError::DimensionMismatch(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if let Some(bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(UktlError::NonFinite(format!("parameter value {bad}")));
        }
        let mut rest = params;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for (group, _) in self.layout() {
            match group {
                ParamGroup::Classifier => {
                    take(self.classifier.weights.as_mut_slice());
                    take(&mut self.classifier.bias);
                }
                ParamGroup::Msn => {
                    for b in &mut self.msn.branches {
                        take(b.weights.as_mut_slice());
                        take(&mut b.bias);
                    }
                }
                ParamGroup::Mu => take(std::slice::from_mut(&mut self.mu_raw)),
                ParamGroup::Bandwidth => take(std::slice::from_mut(&mut self.log_bandwidth)),
            }
        }
        self.sync_kernel();
        Ok(())
    }
}

fn check_batch(tensors: &[Tensor], labels: &[usize]) -> Result<()> {
    if tensors.is_empty() {
        return Err(UktlError::Empty("no samples".into()));
    }
    if tensors.len() != labels.len() {
        return Err(UktlError::DimensionMismatch(format!(
            "{} tensors but {} labels",
            tensors.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

#[cfg(test)]
mod tests;
