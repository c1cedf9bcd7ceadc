//! Data-free first-order linearization of a residual MLP projection head
//!
//! ```text
//! x ← x + W2·φ(W1·LN(x) + b1) + b2
//! ```
//!
//! into an affine map `[I + ½·W2·W̃1 | ½·W2·b̃1 + b2]` acting on `[x; 1]`,
//! where `W̃1 = W1·Diag(γ)` and `b̃1 = W1·β + b1` absorb the LayerNorm affine
//! parameters and GELU is replaced by its average slope `z/2`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHeadParams {
    /// `m × n`
    pub w1: Matrix,
    pub b1: Vector,
    /// `n × m`
    pub w2: Matrix,
    pub b2: Vector,
    pub gamma: Vector,
    pub beta: Vector,
    pub eps: f64,
}

#[derive(Serialize, Deserialize)]
struct HeadSidecar {
    eps: f64,
}

pub const HEAD_FILES: [&str; 6] = [
    "w1.iso",
    "b1.iso",
    "w2.iso",
    "b2.iso",
    "gamma.iso",
    "beta.iso",
];
pub const HEAD_SIDECAR: &str = "head.json";

impl MlpHeadParams {
    pub fn new(
        w1: Matrix,
        b1: Vector,
        w2: Matrix,
        b2: Vector,
        gamma: Vector,
        beta: Vector,
        eps: f64,
    ) -> Result<Self> {
        let (m, n) = w1.shape();
        let ok = b1.len() == m
            && w2.shape() == (n, m)
            && b2.len() == n
            && gamma.len() == n
            && beta.len() == n;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent MLP head: W1 {:?}, b1 {}, W2 {:?}, b2 {}, gamma {}, beta {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len(),
                gamma.len(),
                beta.len()
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "LayerNorm eps {eps} must be positive"
            )));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            gamma,
            beta,
            eps,
        })
    }

    /// Input/output width `n`.
    pub fn width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    /// Loads `w1.iso … beta.iso` and `head.json` (`{"eps": …}`) from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read_vec = |name: &str| -> Result<Vector> {
            let t = tensorio::read_tensor(dir.join(name))?;
            if t.dims().len() != 1 {
                return Err(Error::ShapeMismatch(format!("{name} must be 1-D")));
            }
            Ok(Vector::from_vec(t.to_f64_vec()))
        };
        let read_mat = |name: &str| -> Result<Matrix> {
            let t = tensorio::read_tensor(dir.join(name))?;
            if t.dims().len() != 2 {
                return Err(Error::ShapeMismatch(format!("{name} must be 2-D")));
            }
            Ok(t.to_matrix())
        };
        let path = dir.join(HEAD_SIDECAR);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: HeadSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        Self::new(
            read_mat("w1.iso")?,
            read_vec("b1.iso")?,
            read_mat("w2.iso")?,
            read_vec("b2.iso")?,
            read_vec("gamma.iso")?,
            read_vec("beta.iso")?,
            side.eps,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>, dtype: tensorio::DType) -> Result<()> {
        use tensorio::{write_matrix, write_tensor, Tensor};
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(dir.join("w1.iso"), &self.w1, dtype)?;
        write_tensor(
            dir.join("b1.iso"),
            &Tensor::from_vector(self.b1.as_slice(), dtype)?,
        )?;
        write_matrix(dir.join("w2.iso"), &self.w2, dtype)?;
        write_tensor(
            dir.join("b2.iso"),
            &Tensor::from_vector(self.b2.as_slice(), dtype)?,
        )?;
        write_tensor(
            dir.join("gamma.iso"),
            &Tensor::from_vector(self.gamma.as_slice(), dtype)?,
        )?;
        write_tensor(
            dir.join("beta.iso"),
            &Tensor::from_vector(self.beta.as_slice(), dtype)?,
        )?;
        let path = dir.join(HEAD_SIDECAR);
        let text =
            serde_json::to_string_pretty(&HeadSidecar { eps: self.eps }).map_err(|source| {
                Error::Json {
                    context: path.display().to_string(),
                    source,
                }
            })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Affine map `n × (n + 1)` applied to homogeneous inputs `[x; 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveProjector {
    pub w_eff: Matrix,
}

impl EffectiveProjector {
    pub fn linear_block(&self) -> Matrix {
        let n = self.w_eff.nrows();
        self.w_eff.columns(0, n).into_owned()
    }

    pub fn bias(&self) -> Vector {
        self.w_eff.column(self.w_eff.nrows()).into_owned()
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.w_eff * homogeneous(x)
    }
}

pub fn homogeneous(x: &Vector) -> Vector {
    x.clone().insert_row(x.len(), 1.0)
}

/// Appends a constant-1 column so features match an [`EffectiveProjector`].
pub fn homogeneous_features(features: &Matrix) -> Matrix {
    features.clone().insert_column(features.ncols(), 1.0)
}

/// `(W1·Diag(γ), W1·β + b1)`.
pub fn absorb_layernorm(params: &MlpHeadParams) -> (Matrix, Vector) {
    let mut w1_tilde = params.w1.clone();
    for (j, g) in params.gamma.iter().enumerate() {
        w1_tilde.column_mut(j).scale_mut(*g);
    }
    let b1_tilde = &params.w1 * &params.beta + &params.b1;
    (w1_tilde, b1_tilde)
}

pub fn linearize_head(params: &MlpHeadParams) -> EffectiveProjector {
    let n = params.width();
    let (w1_tilde, b1_tilde) = absorb_layernorm(params);
    let linear = Matrix::identity(n, n) + (&params.w2 * &w1_tilde) * 0.5;
    let bias = (&params.w2 * &b1_tilde) * 0.5 + &params.b2;
    let mut w_eff = Matrix::zeros(n, n + 1);
    w_eff.columns_mut(0, n).copy_from(&linear);
    w_eff.column_mut(n).copy_from(&bias);
    EffectiveProjector { w_eff }
}

pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact `z·Φ(z)`.
    Gelu,
    /// Average slope `z/2`.
    HalfSlope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `γ ⊙ (x − μ)/√(σ² + ε) + β`, population variance.
    LayerNorm,
    /// `γ ⊙ x + β`: LayerNorm with the standardization step treated as identity.
    AffineOnly,
}

pub fn layer_norm(x: &Vector, gamma: &Vector, beta: &Vector, eps: f64) -> Vector {
    let n = x.len() as f64;
    let mu = x.sum() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Vector::from_fn(x.len(), |i, _| gamma[i] * (x[i] - mu) * inv + beta[i])
}

/// The head's forward pass with a choice of activation and normalization.
pub fn mlp_forward(
    params: &MlpHeadParams,
    x: &Vector,
    activation: Activation,
    norm: Normalization,
) -> Vector {
    let normed = match norm {
        Normalization::LayerNorm => layer_norm(x, &params.gamma, &params.beta, params.eps),
        Normalization::AffineOnly => params.gamma.component_mul(x) + &params.beta,
    };
    let pre = &params.w1 * normed + &params.b1;
    let act = pre.map(|z| match activation {
        Activation::Gelu => gelu(z),
        Activation::HalfSlope => 0.5 * z,
    });
    x + &params.w2 * act + &params.b2
}

/// Exact non-linear forward: true LayerNorm and erf-based GELU.
pub fn mlp_forward_reference(params: &MlpHeadParams, x: &Vector) -> Vector {
    mlp_forward(params, x, Activation::Gelu, Normalization::LayerNorm)
}
