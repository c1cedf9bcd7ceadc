//! Training-free alignment of vision-language projection heads.
//!
//! Contrastive image–text models compare modalities through the product of
//! their projectors, `Ψ = Wᵢᵀ·Wₜ`, which is what training optimizes. Image–image
//! (or text–text) similarity instead goes through `Wᵢᵀ·Wᵢ`, which training
//! never shapes. This crate decomposes `Ψ`, keeps the flat middle band of its
//! spectrum, and projects both heads onto the matching singular subspaces;
//! the aligned heads are then evaluated on intra-modal retrieval and
//! nearest-class-mean classification.
//!
//! Modules:
//! - [`tensorio`]: `ISO1` tensor files and dataset manifests
//! - [`spectral`]: deterministic SVD, numerical rank, whitening
//! - [`align`]: `Ψ`, band selection, aligned projectors, spectrum diagnostics
//! - [`retrieval`]: similarity, mAP / P@K, overlap histograms, band sweeps
//! - [`ncm`]: nearest-class-mean classification
//! - [`gradcheck`]: contrastive loss gradients and finite-difference checks
//! - [`linearize`]: linearization of residual MLP heads
//! - [`synthdata`]: planted-spectrum fixtures

pub mod align;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod linearize;
pub mod ncm;
pub mod retrieval;
pub mod spectral;
pub mod synthdata;
pub mod tensorio;

pub use error::{Error, Result};
pub use exec::Execution;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
