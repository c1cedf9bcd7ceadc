//! Projector alignment to the middle band of the inter-modal operator
//! `Ψ = Wᵢᵀ·Wₜ`.
//!
//! `Ψ` is decomposed as `U·Σ·Vᵀ`; the retained band of singular directions
//! `[k_t, r − k_b)` defines orthogonal projectors `U_S·U_Sᵀ` and `V_S·V_Sᵀ`
//! that are applied on the input side of each projector.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{self, SpectralDecomposition};
use crate::tensorio::{self, DType};
use crate::Matrix;

/// Image and text projection heads sharing an output dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorPair {
    /// `d × d_i`
    pub wi: Matrix,
    /// `d × d_t`
    pub wt: Matrix,
}

impl ProjectorPair {
    pub fn new(wi: Matrix, wt: Matrix) -> Result<Self> {
        if wi.nrows() != wt.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "image projector has {} rows, text projector {}",
                wi.nrows(),
                wt.nrows()
            )));
        }
        if wi.nrows() == 0 || wi.ncols() == 0 || wt.ncols() == 0 {
            return Err(Error::ShapeMismatch(
                "projector dimensions must be positive".into(),
            ));
        }
        Ok(Self { wi, wt })
    }

    pub fn load(wi_path: impl AsRef<Path>, wt_path: impl AsRef<Path>) -> Result<Self> {
        Self::new(
            tensorio::read_matrix(wi_path)?,
            tensorio::read_matrix(wt_path)?,
        )
    }

    pub fn d(&self) -> usize {
        self.wi.nrows()
    }

    pub fn d_i(&self) -> usize {
        self.wi.ncols()
    }

    pub fn d_t(&self) -> usize {
        self.wt.ncols()
    }

    pub fn projector(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.wi,
            Modality::Text => &self.wt,
        }
    }

    /// Swaps the roles of the two modalities (`Ψ ↔ Ψᵀ`).
    pub fn swapped(&self) -> Self {
        Self {
            wi: self.wt.clone(),
            wt: self.wi.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterModalOperator {
    /// `Ψ = Wᵢᵀ·Wₜ`, `d_i × d_t`.
    pub psi: Matrix,
    pub decomposition: SpectralDecomposition,
}

impl InterModalOperator {
    pub fn rank(&self) -> usize {
        self.decomposition.rank()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.decomposition.s
    }

    /// `U_S·Σ_S·V_Sᵀ`: `Ψ` restricted to the retained band.
    pub fn truncated(&self, band: &BandSelection) -> Matrix {
        let range = band.retained();
        let dec = &self.decomposition;
        let mut us = dec.u.columns(range.start, range.len()).into_owned();
        for (j, sigma) in dec.s[range.clone()].iter().enumerate() {
            us.column_mut(j).scale_mut(*sigma);
        }
        us * dec.v.columns(range.start, range.len()).transpose()
    }
}

pub fn inter_modal_operator(pair: &ProjectorPair) -> Result<InterModalOperator> {
    let psi = pair.wi.transpose() * &pair.wt;
    let decomposition = spectral::svd(&psi)?;
    Ok(InterModalOperator { psi, decomposition })
}

/// Retained singular directions `[k_t, rank − k_b)` (0-based, half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSelection {
    pub k_t: usize,
    pub k_b: usize,
    pub rank: usize,
}

impl BandSelection {
    pub fn new(rank: usize, k_t: usize, k_b: usize) -> Result<Self> {
        if k_t.checked_add(k_b).is_none_or(|s| s >= rank) {
            return Err(Error::BandEmpty { k_t, k_b, rank });
        }
        Ok(Self { k_t, k_b, rank })
    }

    /// Band covering `start..end`.
    pub fn from_range(rank: usize, range: Range<usize>) -> Result<Self> {
        if range.end > rank || range.start >= range.end {
            return Err(Error::InvalidParameter(format!(
                "range {range:?} is not a non-empty subrange of 0..{rank}"
            )));
        }
        Self::new(rank, range.start, rank - range.end)
    }

    pub fn retained(&self) -> Range<usize> {
        self.k_t..self.rank - self.k_b
    }

    pub fn len(&self) -> usize {
        self.rank - self.k_t - self.k_b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grows the band by `top` directions towards the head of the spectrum
    /// and `bottom` directions towards its tail.
    pub fn extended(&self, top: usize, bottom: usize) -> Result<Self> {
        if top > self.k_t || bottom > self.k_b {
            return Err(Error::InvalidParameter(format!(
                "cannot extend band [{}, {}) by ({top}, {bottom})",
                self.k_t,
                self.rank - self.k_b
            )));
        }
        Self::new(self.rank, self.k_t - top, self.k_b - bottom)
    }
}

pub fn select_band(op: &InterModalOperator, k_t: usize, k_b: usize) -> Result<BandSelection> {
    BandSelection::new(op.rank(), k_t, k_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedProjectors {
    /// `Wᵢ·U_S·U_Sᵀ`
    pub wi_hat: Matrix,
    /// `Wₜ·V_S·V_Sᵀ`
    pub wt_hat: Matrix,
    pub band: BandSelection,
    /// `d_i × |band|`
    pub u_s: Matrix,
    /// `d_t × |band|`
    pub v_s: Matrix,
}

impl AlignedProjectors {
    pub fn pair(&self) -> ProjectorPair {
        ProjectorPair {
            wi: self.wi_hat.clone(),
            wt: self.wt_hat.clone(),
        }
    }

    pub fn projector(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.wi_hat,
            Modality::Text => &self.wt_hat,
        }
    }

    /// Writes `wi_hat.iso`, `wt_hat.iso` and `band.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        tensorio::write_matrix(dir.join(ALIGNED_WI), &self.wi_hat, dtype)?;
        tensorio::write_matrix(dir.join(ALIGNED_WT), &self.wt_hat, dtype)?;
        let sidecar = BandSidecar::from(self.band);
        let path = dir.join(BAND_SIDECAR);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub const ALIGNED_WI: &str = "wi_hat.iso";
pub const ALIGNED_WT: &str = "wt_hat.iso";
pub const BAND_SIDECAR: &str = "band.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSidecar {
    pub k_t: usize,
    pub k_b: usize,
    pub r: usize,
}

impl From<BandSelection> for BandSidecar {
    fn from(b: BandSelection) -> Self {
        Self {
            k_t: b.k_t,
            k_b: b.k_b,
            r: b.rank,
        }
    }
}

/// Reads a directory written by [`AlignedProjectors::save`].
pub fn load_aligned(dir: impl AsRef<Path>) -> Result<(ProjectorPair, BandSelection)> {
    let dir = dir.as_ref();
    let pair = ProjectorPair::load(dir.join(ALIGNED_WI), dir.join(ALIGNED_WT))?;
    let path = dir.join(BAND_SIDECAR);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: BandSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    Ok((pair, BandSelection::new(side.r, side.k_t, side.k_b)?))
}

/// `(Wᵢ·U·Uᵀ, Wₜ·V·Vᵀ)` for orthonormal bases `u`, `v`.
pub fn project_onto_subspaces(pair: &ProjectorPair, u: &Matrix, v: &Matrix) -> ProjectorPair {
    ProjectorPair {
        wi: (&pair.wi * u) * u.transpose(),
        wt: (&pair.wt * v) * v.transpose(),
    }
}

pub fn align_projectors(
    pair: &ProjectorPair,
    op: &InterModalOperator,
    band: &BandSelection,
) -> Result<AlignedProjectors> {
    if band.rank != op.rank() {
        return Err(Error::StaleBand {
            band_rank: band.rank,
            op_rank: op.rank(),
        });
    }
    if op.psi.shape() != (pair.d_i(), pair.d_t()) {
        return Err(Error::ShapeMismatch(format!(
            "operator is {:?}, pair needs ({}, {})",
            op.psi.shape(),
            pair.d_i(),
            pair.d_t()
        )));
    }
    let range = band.retained();
    let u_s = op
        .decomposition
        .u
        .columns(range.start, range.len())
        .into_owned();
    let v_s = op
        .decomposition
        .v
        .columns(range.start, range.len())
        .into_owned();
    let aligned = project_onto_subspaces(pair, &u_s, &v_s);
    Ok(AlignedProjectors {
        wi_hat: aligned.wi,
        wt_hat: aligned.wt,
        band: *band,
        u_s,
        v_s,
    })
}

/// Builds `Ψ`, selects `[k_t, r − k_b)` and aligns both projectors.
pub fn isoclip(pair: &ProjectorPair, k_t: usize, k_b: usize) -> Result<AlignedProjectors> {
    let op = inter_modal_operator(pair)?;
    let band = select_band(&op, k_t, k_b)?;
    align_projectors(pair, &op, &band)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandVariants {
    pub top: BandSelection,
    pub middle: BandSelection,
    pub bottom: BandSelection,
}

/// Top, middle and bottom bands of `width` directions. The middle band is
/// `[⌊r/2 − w/2⌋, ⌊r/2 + w/2⌋)`.
pub fn band_variants(op: &InterModalOperator, width: usize) -> Result<BandVariants> {
    let r = op.rank();
    if width == 0 || width > r {
        return Err(Error::InvalidWidth { width, rank: r });
    }
    let mid_start = (r - width) / 2;
    Ok(BandVariants {
        top: BandSelection::from_range(r, 0..width)?,
        middle: BandSelection::from_range(r, mid_start..mid_start + width)?,
        bottom: BandSelection::from_range(r, r - width..r)?,
    })
}

/// Eigenvalues of the intra-modal operator `WᵀW` (the squared singular values
/// of `W`) and their share of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraSpectrum {
    pub eigenvalues: Vec<f64>,
    pub normalized: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl IntraSpectrum {
    /// Eigenvalues whose singular value clears the numerical-rank threshold.
    pub fn rank(&self, rows: usize, cols: usize) -> usize {
        spectral::numerical_rank(&self.singular_values, rows, cols)
    }
}

pub fn intra_operator_spectrum(w: &Matrix) -> Result<IntraSpectrum> {
    let singular_values = spectral::svd(w)?.full_spectrum;
    let eigenvalues: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
    let total: f64 = eigenvalues.iter().sum();
    let normalized = if total > 0.0 {
        eigenvalues.iter().map(|e| e / total).collect()
    } else {
        vec![0.0; eigenvalues.len()]
    };
    Ok(IntraSpectrum {
        eigenvalues,
        normalized,
        singular_values,
    })
}
