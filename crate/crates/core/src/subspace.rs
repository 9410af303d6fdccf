//! Per-mode subspaces (the leading left singular vectors of each unfolding)
//! and projection-metric geometry on the Grassmann manifold.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, UktlError};
use crate::linalg::{dot, symmetric_eigen, Matrix};
use crate::tensor::Tensor;

/// Orthonormal basis of a `p`-dimensional subspace of `R^{I_m}`, with the
/// singular values that ranked its directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: Matrix,
    singular_values: Vec<f64>,
}

/// One subspace per tensor mode.
pub type SubspaceTuple = Vec<Subspace>;

impl Subspace {
    /// Wraps a basis that is already orthonormal. Singular values default to ones.
    pub fn from_orthonormal(basis: Matrix) -> Result<Self> {
        let p = basis.cols();
        let gram = basis.t_matmul(&basis)?;
        let drift = gram.max_abs_diff(&Matrix::identity(p));
        if drift > 1e-10 {
            return Err(UktlError::InvalidArgument(format!(
                "basis columns are not orthonormal (max |BᵀB - I| = {drift:e})"
            )));
        }
        Ok(Self {
            basis,
            singular_values: vec![1.0; p],
        })
    }

    /// Uniformly random point of G(p, ambient), via Gram-Schmidt on a Gaussian matrix.
    pub fn random<R: Rng + ?Sized>(ambient: usize, p: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || p > ambient {
            return Err(UktlError::InvalidArgument(format!(
                "cannot draw a {p}-dimensional subspace of R^{ambient}"
            )));
        }
        let g = Matrix::from_fn(ambient, p, |_, _| rng.sample(StandardNormal));
        Self::from_orthonormal(orthonormalize_columns(&g)?)
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn order(&self) -> usize {
        self.basis.cols()
    }

    /// Same subspace expressed in the rotated basis `B·Q`.
    pub fn rotated(&self, q: &Matrix) -> Result<Self> {
        let basis = self.basis.matmul(q)?;
        Ok(Self {
            basis,
            singular_values: self.singular_values.clone(),
        })
    }

    pub fn projector(&self) -> Matrix {
        self.basis.gram_rows()
    }
}

/// Modified Gram-Schmidt (two passes) on the columns of `a`.
pub fn orthonormalize_columns(a: &Matrix) -> Result<Matrix> {
    let (n, p) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| a.column(j)).collect();
    for j in 0..p {
        for _ in 0..2 {
            for k in 0..j {
                let proj = dot(&cols[j], &cols[k]);
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[k]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if norm < 1e-12 {
            return Err(UktlError::Degenerate("columns are linearly dependent".into()));
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(Matrix::from_fn(n, p, |i, j| cols[j][i]))
}

/// Flips each column so its largest-magnitude entry is positive; ties go to
/// the lowest row index.
fn canonicalize_signs(basis: &mut Matrix) {
    for j in 0..basis.cols() {
        let mut best = 0;
        for i in 1..basis.rows() {
            if basis.get(i, j).abs() > basis.get(best, j).abs() {
                best = i;
            }
        }
        if basis.get(best, j) < 0.0 {
            for i in 0..basis.rows() {
                basis.set(i, j, -basis.get(i, j));
            }
        }
    }
}

/// Top-`p` left singular subspace of `x`.
///
/// Computed from the eigendecomposition of the `rows x rows` Gram matrix
/// `x·xᵀ`, which is small whenever the unfolding is wide.
pub fn truncated_subspace(x: &Matrix, p: usize) -> Result<Subspace> {
    let budget = x.rows().min(x.cols());
    if p == 0 || p > budget {
        return Err(UktlError::InvalidArgument(format!(
            "subspace order {p} must be in 1..={budget} for a {}x{} matrix",
            x.rows(),
            x.cols()
        )));
    }
    if !x.is_finite() {
        return Err(UktlError::NonFinite("matrix passed to truncated_subspace".into()));
    }
    let eig = symmetric_eigen(&x.gram_rows())?;
    let mut basis = Matrix::from_fn(x.rows(), p, |i, k| eig.vectors.get(i, k));
    canonicalize_signs(&mut basis);
    let singular_values = eig.values[..p].iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(Subspace {
        basis,
        singular_values,
    })
}

/// Mode subspaces of `t`, one per mode, with per-mode orders.
pub fn tensor_subspaces(t: &Tensor, orders: &[usize]) -> Result<SubspaceTuple> {
    if orders.len() != t.order() {
        return Err(UktlError::DimensionMismatch(format!(
            "{} subspace orders given for an order-{} tensor",
            orders.len(),
            t.order()
        )));
    }
    orders
        .iter()
        .enumerate()
        .map(|(mode, &p)| truncated_subspace(&t.matricize(mode)?, p))
        .collect()
}

fn check_pair(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.ambient_dim() != b.ambient_dim() || a.order() != b.order() {
        return Err(UktlError::DimensionMismatch(format!(
            "subspaces of G({}, {}) and G({}, {})",
            a.order(),
            a.ambient_dim(),
            b.order(),
            b.ambient_dim()
        )));
    }
    Ok(())
}

/// `||AᵀB||_F^2`, the projection kernel.
pub fn cross_gram_norm_sq(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.t_matmul(b)?.frobenius_norm_sq())
}

/// Principal angles in nondecreasing order, each in `[0, pi/2]`.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let m = a.basis.t_matmul(&b.basis)?;
    // Singular values of AᵀB are the square roots of the eigenvalues of MᵀM.
    let eig = symmetric_eigen(&m.t_matmul(&m)?)?;
    Ok(eig
        .values
        .iter()
        .map(|&l| l.max(0.0).sqrt().clamp(0.0, 1.0).acos())
        .collect())
}

/// `||AAᵀ - BBᵀ||_F^2 = 2p - 2||AᵀB||_F^2` for orthonormal bases.
pub fn projection_distance_sq(a: &Subspace, b: &Subspace) -> Result<f64> {
    check_pair(a, b)?;
    let p = a.order() as f64;
    Ok((2.0 * p - 2.0 * cross_gram_norm_sq(&a.basis, &b.basis)?).max(0.0))
}
