//! Planted-spectrum fixtures: projector pairs whose inter-modal operator has a
//! known SVD, and labelled embeddings whose class signal lives only in the
//! middle band while nuisance energy sits in the top and bottom directions.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha 0.9)
//! with normals drawn through `rand_distr::StandardNormal` (rand_distr 0.5).
//! Both crate versions are pinned so fixtures stay reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::ProjectorPair;
use crate::error::{Error, Result};
use crate::retrieval::EmbeddingDataset;
use crate::spectral;
use crate::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub d_i: usize,
    pub d_t: usize,
    /// Shared (projected) dimension; also the rank of the planted operator.
    pub d: usize,
    /// `d` positive, non-increasing singular values of `Ψ`.
    pub spectrum: Vec<f64>,
    pub n_top: usize,
    pub n_bottom: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic per-entry feature noise.
    pub noise_sigma: f64,
    /// Expected nuisance energy divided by the (unit) class-signal energy.
    pub nuisance_ratio: f64,
    pub seed: u64,
}

impl PlantedSpec {
    /// Spiky top, gently decaying middle and small bottom, with the given band
    /// sizes.
    pub fn shaped_spectrum(d: usize, n_top: usize, n_bottom: usize) -> Vec<f64> {
        let mid = d - n_top - n_bottom;
        let top = (0..n_top).map(|k| 20.0 * 0.85f64.powi(k as i32));
        let middle = (0..mid).map(|k| 1.0 - 0.1 * k as f64 / mid.max(1) as f64);
        let bottom = (0..n_bottom).map(|k| 0.4 * 0.8f64.powi(k as i32));
        top.chain(middle).chain(bottom).collect()
    }

    /// d = 64, dᵢ = 96, dₜ = 80, ten classes, nuisance energy 3× the signal.
    pub fn acceptance(seed: u64) -> Self {
        let (d, n_top, n_bottom) = (64, 8, 8);
        Self {
            d_i: 96,
            d_t: 80,
            d,
            spectrum: Self::shaped_spectrum(d, n_top, n_bottom),
            n_top,
            n_bottom,
            classes: 10,
            per_class: 20,
            noise_sigma: 0.18,
            nuisance_ratio: 3.0,
            seed,
        }
    }

    pub fn middle(&self) -> std::ops::Range<usize> {
        self.n_top..self.d - self.n_bottom
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.d == 0 || self.d > self.d_i || self.d > self.d_t {
            return bad(format!(
                "need 0 < d <= min(d_i, d_t), got d={} d_i={} d_t={}",
                self.d, self.d_i, self.d_t
            ));
        }
        if self.spectrum.len() != self.d {
            return bad(format!(
                "spectrum has {} values, d = {}",
                self.spectrum.len(),
                self.d
            ));
        }
        if self.spectrum.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.spectrum.windows(2).any(|w| w[0] < w[1])
        {
            return bad("spectrum must be positive and non-increasing".into());
        }
        if self.n_top + self.n_bottom >= self.d {
            return bad(format!(
                "n_top ({}) + n_bottom ({}) must be below d ({})",
                self.n_top, self.n_bottom, self.d
            ));
        }
        if self.noise_sigma < 0.0 || self.nuisance_ratio < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Generated projectors with the planted factorization `Ψ = U·Σ·Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedProjectors {
    pub pair: ProjectorPair,
    /// `d_i × d`
    pub u: Matrix,
    /// `d_t × d`
    pub v: Matrix,
    pub sigma: Vec<f64>,
    /// Band boundaries that fall inside a run of equal singular values.
    pub warnings: Vec<String>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    // Column-major fill order is part of the fixture definition.
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    gaussian(rows, cols, rng).qr().q()
}

/// `Wᵢ = O·Σ^½·Uᵀ`, `Wₜ = O·Σ^½·Vᵀ` with random orthonormal `U`, `V`, `O`,
/// so that `Wᵢᵀ·Wₜ = U·Σ·Vᵀ`.
pub fn make_projectors(spec: &PlantedSpec) -> Result<PlantedProjectors> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = orthonormal(spec.d_i, spec.d, &mut rng);
    let v = orthonormal(spec.d_t, spec.d, &mut rng);
    let o = orthonormal(spec.d, spec.d, &mut rng);

    let mut o_root = o;
    for (j, s) in spec.spectrum.iter().enumerate() {
        o_root.column_mut(j).scale_mut(s.sqrt());
    }
    let wi = &o_root * u.transpose();
    let wt = &o_root * v.transpose();

    let mut warnings = Vec::new();
    for (name, k) in [("top", spec.n_top), ("bottom", spec.d - spec.n_bottom)] {
        if k > 0 && k < spec.d && spec.spectrum[k - 1] == spec.spectrum[k] {
            warnings.push(format!(
                "{name} band boundary at {k} splits equal singular values; subspace not identifiable"
            ));
        }
    }
    Ok(PlantedProjectors {
        pair: ProjectorPair::new(wi, wt)?,
        u,
        v,
        sigma: spec.spectrum.clone(),
        warnings,
    })
}

/// Class-structured features for both modalities.
///
/// Each class gets a unit-norm code in the middle band shared by both
/// modalities. A sample is `B_mid·code + B_top·η_top + B_bot·η_bot + ε`, with
/// `B = U` for images and `B = V` for text, nuisance `η` of total expected
/// energy `nuisance_ratio`, and `ε ~ N(0, noise_sigma²·I)`. Samples are
/// ordered class by class.
pub fn make_embeddings(
    spec: &PlantedSpec,
    truth: &PlantedProjectors,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    spec.validate()?;
    if truth.u.shape() != (spec.d_i, spec.d) || truth.v.shape() != (spec.d_t, spec.d) {
        return Err(Error::ShapeMismatch(
            "ground truth does not match spec".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
    let mid = spec.middle();
    let m = mid.len();
    let n_nuisance = spec.n_top + spec.n_bottom;
    let nuisance_std = if n_nuisance > 0 {
        (spec.nuisance_ratio / n_nuisance as f64).sqrt()
    } else {
        0.0
    };

    let mut codes = gaussian(m, spec.classes, &mut rng);
    for mut c in codes.column_iter_mut() {
        let norm = c.norm();
        c /= norm;
    }

    let n = spec.classes * spec.per_class;
    let labels: Vec<i64> = (0..n).map(|i| (i / spec.per_class) as i64).collect();
    let build = |basis: &Matrix, rng: &mut ChaCha8Rng| {
        // Coefficients in the planted basis, one column per sample.
        let mut coeffs = Matrix::zeros(spec.d, n);
        for (s, &label) in labels.iter().enumerate() {
            coeffs
                .view_mut((mid.start, s), (m, 1))
                .copy_from(&codes.column(label as usize));
            for k in (0..spec.n_top).chain(mid.end..spec.d) {
                let eta: f64 = StandardNormal.sample(rng);
                coeffs[(k, s)] = nuisance_std * eta;
            }
        }
        let noise = gaussian(basis.nrows(), n, rng) * spec.noise_sigma;
        (basis * coeffs + noise).transpose()
    };
    let image = build(&truth.u, &mut rng);
    let text = build(&truth.v, &mut rng);
    Ok((
        EmbeddingDataset::all_vs_all("planted-image", image, labels.clone())?,
        EmbeddingDataset::all_vs_all("planted-text", text, labels)?,
    ))
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormal bases, via `asin ‖(I − A·Aᵀ)·B‖₂`; stays accurate for tiny
/// angles.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(
            "bases live in different spaces".into(),
        ));
    }
    let residual = b - a * (a.transpose() * b);
    let dec = spectral::svd(&residual)?;
    let sin = dec.full_spectrum.first().copied().unwrap_or(0.0).min(1.0);
    // Same-dimension subspaces: the angle is symmetric, so also check B → A.
    let back = a - b * (b.transpose() * a);
    let sin_back = spectral::svd(&back)?
        .full_spectrum
        .first()
        .copied()
        .unwrap_or(0.0)
        .min(1.0);
    Ok(sin.max(sin_back).asin())
}
