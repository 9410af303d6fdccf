//! Multi-mode SigmaNet: one affine branch per mode followed by a scaled
//! sigmoid, producing a per-direction uncertainty vector for each mode
//! subspace. Bases are reweighted column-wise by `1/sqrt(sigma_k)`, and the
//! batch log-ratio penalty keeps the uncertainties from drifting upward together.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UktlError};
use crate::linalg::{dot, Matrix};
use crate::subspace::Subspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsnInput {
    /// Flattened projector `UUᵀ` (`I_m^2` features).
    ProjectionFlat,
    /// Unit-normalized singular values (`p` features).
    SingularValues,
}

impl fmt::Display for MsnInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MsnInput::ProjectionFlat => "projection_flat",
            MsnInput::SingularValues => "singular_values",
        })
    }
}

impl FromStr for MsnInput {
    type Err = UktlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection_flat" => Ok(MsnInput::ProjectionFlat),
            "singular_values" => Ok(MsnInput::SingularValues),
            other => Err(UktlError::InvalidArgument(format!(
                "unknown MSN input `{other}` (expected projection_flat or singular_values)"
            ))),
        }
    }
}

impl MsnInput {
    pub fn feature_dim(self, ambient: usize, p: usize) -> usize {
        match self {
            MsnInput::ProjectionFlat => ambient * ambient,
            MsnInput::SingularValues => p,
        }
    }
}

pub fn msn_features(input: MsnInput, s: &Subspace) -> Vec<f64> {
    match input {
        MsnInput::ProjectionFlat => s.projector().into_vec(),
        MsnInput::SingularValues => {
            let sv = s.singular_values();
            let norm = dot(sv, sv).sqrt();
            if norm > 0.0 {
                sv.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; sv.len()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsnBranch {
    /// `p x feature_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsnParams {
    pub branches: Vec<MsnBranch>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub input: MsnInput,
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl MsnParams {
    /// Random small weights; biases start where every output equals 1 (or the
    /// midpoint of the bounds when 1 lies outside them).
    pub fn init<R: Rng + ?Sized>(
        ambient_dims: &[usize],
        orders: &[usize],
        input: MsnInput,
        sigma_min: f64,
        sigma_max: f64,
        weight_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(UktlError::InvalidArgument(format!(
                "MSN bounds must satisfy 0 < min < max, got ({sigma_min}, {sigma_max})"
            )));
        }
        if ambient_dims.len() != orders.len() {
            return Err(UktlError::DimensionMismatch(
                "one subspace order per mode is required".into(),
            ));
        }
        let target = if sigma_min < 1.0 && 1.0 < sigma_max {
            (1.0 - sigma_min) / (sigma_max - sigma_min)
        } else {
            0.5
        };
        let b0 = logit(target);
        let branches = ambient_dims
            .iter()
            .zip(orders)
            .map(|(&ambient, &p)| {
                let f = input.feature_dim(ambient, p);
                let scale = weight_scale / (f as f64).sqrt();
                let weights =
                    Matrix::from_fn(p, f, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
                MsnBranch {
                    weights,
                    bias: vec![b0; p],
                }
            })
            .collect();
        Ok(Self {
            branches,
            sigma_min,
            sigma_max,
            input,
        })
    }

    pub fn modes(&self) -> usize {
        self.branches.len()
    }

    #[inline]
    pub fn scaled_sigmoid(&self, z: f64) -> f64 {
        self.sigma_min + (self.sigma_max - self.sigma_min) * logistic(z)
    }

    fn branch(&self, mode: usize) -> Result<&MsnBranch> {
        self.branches.get(mode).ok_or(UktlError::ModeOutOfRange {
            mode,
            order: self.branches.len(),
        })
    }

    /// Pre-activations `W·feat + b` for the given feature vector.
    pub fn pre_activation(&self, mode: usize, features: &[f64]) -> Result<Vec<f64>> {
        let br = self.branch(mode)?;
        if features.len() != br.weights.cols() {
            return Err(UktlError::DimensionMismatch(format!(
                "MSN branch {mode} expects {} features, got {}",
                br.weights.cols(),
                features.len()
            )));
        }
        Ok((0..br.weights.rows())
            .map(|k| dot(br.weights.row(k), features) + br.bias[k])
            .collect())
    }
}

/// Uncertainty vector for one mode subspace, each entry in `(sigma_min, sigma_max)`.
pub fn msn_forward(params: &MsnParams, s: &Subspace, mode: usize) -> Result<Vec<f64>> {
    let br = params.branch(mode)?;
    if br.weights.rows() != s.order() {
        return Err(UktlError::DimensionMismatch(format!(
            "MSN branch {mode} produces {} outputs but the subspace has order {}",
            br.weights.rows(),
            s.order()
        )));
    }
    let feats = msn_features(params.input, s);
    Ok(params
        .pre_activation(mode, &feats)?
        .into_iter()
        .map(|z| params.scaled_sigmoid(z))
        .collect())
}

/// `Ũ = U · diag(1/sqrt(sigma))`.
pub fn weight_subspace(s: &Subspace, sigma: &[f64]) -> Result<Matrix> {
    if sigma.len() != s.order() {
        return Err(UktlError::DimensionMismatch(format!(
            "{} uncertainty values for a subspace of order {}",
            sigma.len(),
            s.order()
        )));
    }
    if let Some(bad) = sigma.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(UktlError::InvalidArgument(format!(
            "uncertainty values must be positive and finite, got {bad}"
        )));
    }
    let roots: Vec<f64> = sigma.iter().map(|v| v.sqrt()).collect();
    let b = s.basis();
    Ok(Matrix::from_fn(b.rows(), b.cols(), |i, k| b.get(i, k) / roots[k]))
}

/// Per-sample, per-mode uncertainty vectors: `sigmas[i][m][k]`.
pub type BatchSigmas = [Vec<Vec<f64>>];

fn check_batch(sigmas: &BatchSigmas) -> Result<()> {
    let first = sigmas
        .first()
        .ok_or_else(|| UktlError::Empty("uncertainty penalty needs a nonempty batch".into()))?;
    for s in sigmas {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.len() != b.len()) {
            return Err(UktlError::DimensionMismatch(
                "uncertainty vectors differ in shape across the batch".into(),
            ));
        }
        if s.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(UktlError::InvalidArgument("uncertainty values must be positive".into()));
        }
    }
    Ok(())
}

fn batch_totals(sigmas: &BatchSigmas) -> Vec<Vec<f64>> {
    let mut totals: Vec<Vec<f64>> = sigmas[0].iter().map(|v| vec![0.0; v.len()]).collect();
    for s in sigmas {
        for (tm, sm) in totals.iter_mut().zip(s) {
            for (t, v) in tm.iter_mut().zip(sm) {
                *t += v + 1.0;
            }
        }
    }
    totals
}

/// `beta · sum_i sum_m sum_k log((sigma_imk + 1) / sum_j (sigma_jmk + 1))`.
///
/// The inner sum runs over the batch. Always `<= 0`, and exactly 0 for a
/// single-sample batch.
pub fn uncertainty_penalty(sigmas: &BatchSigmas, beta: f64) -> Result<f64> {
    check_batch(sigmas)?;
    let totals = batch_totals(sigmas);
    let mut acc = 0.0;
    for s in sigmas {
        for (sm, tm) in s.iter().zip(&totals) {
            for (v, t) in sm.iter().zip(tm) {
                acc += ((v + 1.0) / t).ln();
            }
        }
    }
    Ok(beta * acc)
}

/// Gradient of [`uncertainty_penalty`] with respect to every `sigma_imk`.
pub fn uncertainty_penalty_grad(sigmas: &BatchSigmas, beta: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    check_batch(sigmas)?;
    let totals = batch_totals(sigmas);
    let n = sigmas.len() as f64;
    Ok(sigmas
        .iter()
        .map(|s| {
            s.iter()
                .zip(&totals)
                .map(|(sm, tm)| {
                    sm.iter()
                        .zip(tm)
                        .map(|(v, t)| beta * (1.0 / (v + 1.0) - n / t))
                        .collect()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subspace(seed: u64, ambient: usize, p: usize) -> Subspace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(ambient, 3 * ambient, |_, _| rng.sample(StandardNormal));
        crate::subspace::truncated_subspace(&x, p).unwrap()
    }

    fn zero_params(ambient: usize, p: usize, input: MsnInput) -> MsnParams {
        let f = input.feature_dim(ambient, p);
        MsnParams {
            branches: vec![MsnBranch {
                weights: Matrix::zeros(p, f),
                bias: vec![0.0; p],
            }],
            sigma_min: 0.1,
            sigma_max: 10.0,
            input,
        }
    }

    #[test]
    fn zero_params_give_midpoint() {
        let s = subspace(1, 5, 3);
        for input in [MsnInput::SingularValues, MsnInput::ProjectionFlat] {
            let sigma = msn_forward(&zero_params(5, 3, input), &s, 0).unwrap();
            for v in sigma {
                assert!((v - 5.05).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturating_bias_approaches_upper_bound() {
        let s = subspace(2, 4, 2);
        let mut params = zero_params(4, 2, MsnInput::SingularValues);
        params.branches[0].bias = vec![20.0; 2];
        for v in msn_forward(&params, &s, 0).unwrap() {
            assert!((10.0 - v).abs() < 1e-6 && v < 10.0);
        }
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = subspace(4, 6, 3);
        for input in [MsnInput::SingularValues, MsnInput::ProjectionFlat] {
            let params =
                MsnParams::init(&[6], &[3], input, 0.1, 10.0, 2.0, &mut rng).unwrap();
            let got = msn_forward(&params, &s, 0).unwrap();

            let feats: Vec<f64> = match input {
                MsnInput::SingularValues => {
                    let sv = s.singular_values();
                    let n = (sv.iter().map(|x| x * x).sum::<f64>()).sqrt();
                    sv.iter().map(|x| x / n).collect()
                }
                MsnInput::ProjectionFlat => {
                    let u = s.basis();
                    let mut out = vec![];
                    for i in 0..6 {
                        for j in 0..6 {
                            let mut acc = 0.0;
                            for k in 0..3 {
                                acc += u.get(i, k) * u.get(j, k);
                            }
                            out.push(acc);
                        }
                    }
                    out
                }
            };
            let br = &params.branches[0];
            for k in 0..3 {
                let mut z = br.bias[k];
                for (f, x) in feats.iter().enumerate() {
                    z += br.weights.get(k, f) * x;
                }
                let expected = 0.1 + 9.9 / (1.0 + (-z).exp());
                assert!((got[k] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn init_centres_output_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params =
            MsnParams::init(&[5, 6], &[2, 2], MsnInput::SingularValues, 0.1, 10.0, 0.0, &mut rng)
                .unwrap();
        let s = subspace(7, 6, 2);
        for v in msn_forward(&params, &s, 1).unwrap() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert!(MsnParams::init(&[5], &[2], MsnInput::SingularValues, 1.0, 0.5, 0.1, &mut rng)
            .is_err());
    }

    #[test]
    fn feature_dim_mismatch() {
        let params = zero_params(4, 2, MsnInput::SingularValues);
        let s = subspace(5, 4, 3);
        assert!(msn_forward(&params, &s, 0).is_err());
        assert!(msn_forward(&params, &subspace(5, 4, 2), 1).is_err());
        assert!(params.pre_activation(0, &[1.0; 5]).is_err());
    }

    #[test]
    fn weighting_examples() {
        let s = subspace(6, 5, 2);
        assert_eq!(&weight_subspace(&s, &[1.0, 1.0]).unwrap(), s.basis());
        let w = weight_subspace(&s, &[4.0, 4.0]).unwrap();
        for k in 0..2 {
            let norm = dot(&w.column(k), &w.column(k)).sqrt();
            assert!((norm - 0.5).abs() < 1e-15);
        }
        let w = weight_subspace(&s, &[1.0, 4.0]).unwrap();
        let norms: Vec<f64> = (0..2).map(|k| dot(&w.column(k), &w.column(k)).sqrt()).collect();
        assert!((norms[0] - 1.0).abs() < 1e-15 && (norms[1] - 0.5).abs() < 1e-15);
        assert!(weight_subspace(&s, &[1.0, 0.0]).is_err());
        assert!(weight_subspace(&s, &[1.0]).is_err());
    }

    fn random_batch(n: usize, modes: usize, p: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..modes).map(|_| (0..p).map(|_| rng.random_range(0.1..10.0)).collect()).collect())
            .collect()
    }

    #[test]
    fn penalty_spot_values() {
        let single = random_batch(1, 3, 4, 1);
        assert_eq!(uncertainty_penalty(&single, 0.3).unwrap(), 0.0);

        let n = 5;
        let same: Vec<_> = (0..n).map(|_| single[0].clone()).collect();
        let beta = 0.01;
        let expected = beta * (n * 3 * 4) as f64 * (1.0 / n as f64).ln();
        assert!((uncertainty_penalty(&same, beta).unwrap() - expected).abs() <= 1e-12);
        assert!(uncertainty_penalty(&[], beta).is_err());
    }

    #[test]
    fn penalty_matches_scalar_loop_and_is_nonpositive() {
        let batch = random_batch(6, 3, 4, 2);
        let beta = 0.7;
        let mut expected = 0.0;
        for i in 0..6 {
            for m in 0..3 {
                for k in 0..4 {
                    let mut denom = 0.0;
                    for j in 0..6 {
                        denom += batch[j][m][k] + 1.0;
                    }
                    expected += ((batch[i][m][k] + 1.0) / denom).ln();
                }
            }
        }
        let got = uncertainty_penalty(&batch, beta).unwrap();
        assert!((got - beta * expected).abs() <= 1e-12);
        assert!(got < 0.0);

        let mut permuted = batch.clone();
        permuted.reverse();
        assert!((uncertainty_penalty(&permuted, beta).unwrap() - got).abs() <= 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let batch = random_batch(4, 2, 3, 3);
        let beta = 0.5;
        let grad = uncertainty_penalty_grad(&batch, beta).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for m in 0..2 {
                for k in 0..3 {
                    let mut plus = batch.clone();
                    plus[i][m][k] += h;
                    let mut minus = batch.clone();
                    minus[i][m][k] -= h;
                    let fd = (uncertainty_penalty(&plus, beta).unwrap()
                        - uncertainty_penalty(&minus, beta).unwrap())
                        / (2.0 * h);
                    let rel = (fd - grad[i][m][k]).abs() / grad[i][m][k].abs().max(1e-8);
                    assert!(rel < 1e-4, "rel {rel}");
                }
            }
        }
    }
}
