//! CLIP image–text similarity, the image→text contrastive loss and their
//! gradients with respect to the pre-projection image feature, split into
//! the inter-modal (`Ψ·g`) and intra-modal (`Ψᵢ·f`) contributions.
//!
//! The text→image direction is the same computation on
//! [`ProjectorPair::swapped`] with the roles of `f` and `g` exchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::ProjectorPair;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::retrieval::DEGENERATE_NORM;
use crate::{Matrix, Vector};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossContext {
    /// Pre-projection image feature (`d_i`).
    pub f: Vector,
    /// Positive text feature (`d_t`).
    pub g_pos: Vector,
    pub g_neg: Vec<Vector>,
    pub tau: f64,
    pub pair: ProjectorPair,
}

impl LossContext {
    pub fn new(
        f: Vector,
        g_pos: Vector,
        g_neg: Vec<Vector>,
        tau: f64,
        pair: ProjectorPair,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature {tau} must be positive"
            )));
        }
        if f.len() != pair.d_i() {
            return Err(Error::ShapeMismatch(format!(
                "image feature has {} entries, projector expects {}",
                f.len(),
                pair.d_i()
            )));
        }
        for g in std::iter::once(&g_pos).chain(&g_neg) {
            if g.len() != pair.d_t() {
                return Err(Error::ShapeMismatch(format!(
                    "text feature has {} entries, projector expects {}",
                    g.len(),
                    pair.d_t()
                )));
            }
        }
        let ctx = Self {
            f,
            g_pos,
            g_neg,
            tau,
            pair,
        };
        if !ctx
            .texts()
            .chain(std::iter::once(&ctx.f))
            .all(|v| v.iter().all(|x| x.is_finite()))
        {
            return Err(Error::Degenerate("non-finite feature".into()));
        }
        projected_norm(&ctx.pair.wi, &ctx.f)?;
        for g in ctx.texts() {
            projected_norm(&ctx.pair.wt, g)?;
        }
        Ok(ctx)
    }

    /// Positive first, then the negatives.
    pub fn texts(&self) -> impl Iterator<Item = &Vector> {
        std::iter::once(&self.g_pos).chain(&self.g_neg)
    }

    pub fn with_f(&self, f: Vector) -> Self {
        Self { f, ..self.clone() }
    }
}

fn projected_norm(w: &Matrix, x: &Vector) -> Result<f64> {
    let n = (w * x).norm();
    if n < DEGENERATE_NORM {
        return Err(Error::Degenerate("feature projects to zero".into()));
    }
    Ok(n)
}

/// Cosine similarity of the projected features `Wᵢf` and `Wₜg`.
pub fn similarity(f: &Vector, g: &Vector, pair: &ProjectorPair) -> Result<f64> {
    let a = &pair.wi * f;
    let b = &pair.wt * g;
    let (na, nb) = (a.norm(), b.norm());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Err(Error::Degenerate("feature projects to zero".into()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// The same similarity written through the inter-modal operator:
/// `fᵀ·Ψ·g / (‖Wᵢf‖·‖Wₜg‖)`.
pub fn similarity_via_operator(f: &Vector, g: &Vector, pair: &ProjectorPair) -> Result<f64> {
    let psi = pair.wi.transpose() * &pair.wt;
    let alpha = 1.0 / (projected_norm(&pair.wi, f)? * projected_norm(&pair.wt, g)?);
    Ok(alpha * f.dot(&(psi * g)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrad {
    /// `α·Ψ·g`
    pub inter: Vector,
    /// `−s·Ψᵢ·f / ‖Wᵢf‖²`
    pub intra: Vector,
    pub total: Vector,
    pub similarity: f64,
    /// `1 / (‖Wᵢf‖·‖Wₜg‖)`
    pub alpha: f64,
}

/// `∂s/∂f = α·Ψ·g − s·Ψᵢ·f / ‖Wᵢf‖²`.
pub fn similarity_grad_f(f: &Vector, g: &Vector, pair: &ProjectorPair) -> Result<SimilarityGrad> {
    let wf = &pair.wi * f;
    let wg = &pair.wt * g;
    let (nf, ng) = (wf.norm(), wg.norm());
    if nf < DEGENERATE_NORM || ng < DEGENERATE_NORM {
        return Err(Error::Degenerate("feature projects to zero".into()));
    }
    let alpha = 1.0 / (nf * ng);
    let s = alpha * wf.dot(&wg);
    let psi_g = pair.wi.tr_mul(&wg);
    let psi_i_f = pair.wi.tr_mul(&wf);
    let inter = psi_g * alpha;
    let intra = psi_i_f * (-s / (nf * nf));
    Ok(SimilarityGrad {
        total: &inter + &intra,
        inter,
        intra,
        similarity: s,
        alpha,
    })
}

fn logits(ctx: &LossContext) -> Result<Vec<f64>> {
    ctx.texts()
        .map(|g| similarity(&ctx.f, g, &ctx.pair).map(|s| s / ctx.tau))
        .collect()
}

/// `−log softmax` of the positive text's logit `s/τ`.
pub fn loss_i2t(ctx: &LossContext) -> Result<f64> {
    let z = logits(ctx)?;
    let (argmax, &m) =
        z.iter().enumerate().fold(
            (0, &z[0]),
            |best, (i, x)| if *x > *best.1 { (i, x) } else { best },
        );
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &x)| (x - m).exp())
        .sum();
    // log Σ exp(z) − z_pos, written so a dominant positive keeps full precision.
    Ok((m - z[0]) + rest.ln_1p())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTerm {
    pub probability: f64,
    /// `(p − y) / τ`
    pub weight: f64,
    pub similarity: f64,
    /// Weighted inter-modal part `weight·α·Ψ·g`.
    pub inter: Vector,
    /// Weighted intra-modal part `−weight·s·Ψᵢ·f / ‖Wᵢf‖²`.
    pub intra: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub total: Vector,
    /// Positive first, then negatives.
    pub terms: Vec<TextTerm>,
}

/// `∂L/∂f = (1/τ)·Σ_t' (p_t' − y_t')·[α_t'·Ψ·g_t' − s_t'·Ψᵢ·f / ‖Wᵢf‖²]`.
pub fn loss_grad_f(ctx: &LossContext) -> Result<LossGrad> {
    let grads: Vec<SimilarityGrad> = ctx
        .texts()
        .map(|g| similarity_grad_f(&ctx.f, g, &ctx.pair))
        .collect::<Result<_>>()?;
    let z: Vec<f64> = grads.iter().map(|g| g.similarity / ctx.tau).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let denom: f64 = e.iter().sum();

    let mut total = Vector::zeros(ctx.f.len());
    let terms = grads
        .into_iter()
        .zip(e)
        .enumerate()
        .map(|(i, (g, ei))| {
            let probability = ei / denom;
            let y = if i == 0 { 1.0 } else { 0.0 };
            let weight = (probability - y) / ctx.tau;
            let inter = g.inter * weight;
            let intra = g.intra * weight;
            total += &inter;
            total += &intra;
            TextTerm {
                probability,
                weight,
                similarity: g.similarity,
                inter,
                intra,
            }
        })
        .collect();
    Ok(LossGrad { total, terms })
}

/// Central differences `(φ(x + h·e_k) − φ(x − h·e_k)) / 2h`.
pub fn central_difference<F>(x: &Vector, h: f64, mut phi: F) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<f64>,
{
    let mut out = Vector::zeros(x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = phi(&probe)?;
        probe[k] = x[k] - h;
        let down = phi(&probe)?;
        probe[k] = x[k];
        out[k] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `‖analytic − numeric‖ / max(‖analytic‖, 1e−12)`.
pub fn relative_error(analytic: &Vector, numeric: &Vector) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(1e-12)
}

/// Random instance with square `dim × dim` projectors and `negatives` texts.
pub fn random_context(rng: &mut impl Rng, dim: usize, negatives: usize) -> Result<LossContext> {
    let mut gauss = |n: usize| Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let wi = Matrix::from_column_slice(dim, dim, gauss(dim * dim).as_slice());
    let wt = Matrix::from_column_slice(dim, dim, gauss(dim * dim).as_slice());
    let f = gauss(dim);
    let g_pos = gauss(dim);
    let g_neg = (0..negatives).map(|_| gauss(dim)).collect();
    // Log-uniform temperature in [0.05, 1].
    let tau = (rng.random_range(0.05f64.ln()..0.0)).exp();
    LossContext::new(f, g_pos, g_neg, tau, ProjectorPair::new(wi, wt)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub index: usize,
    pub tau: f64,
    pub similarity_rel_error: f64,
    pub loss_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub dim: usize,
    pub negatives: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_similarity_rel_error: f64,
    pub max_loss_rel_error: f64,
    pub passed: bool,
    pub instances: Vec<InstanceCheck>,
}

/// Checks the analytic similarity and loss gradients against central
/// differences on a single instance.
pub fn check_instance(ctx: &LossContext, h: f64) -> Result<(f64, f64)> {
    let analytic = similarity_grad_f(&ctx.f, &ctx.g_pos, &ctx.pair)?.total;
    let numeric = central_difference(&ctx.f, h, |x| similarity(x, &ctx.g_pos, &ctx.pair))?;
    let sim_err = relative_error(&analytic, &numeric);

    let analytic = loss_grad_f(ctx)?.total;
    let numeric = central_difference(&ctx.f, h, |x| loss_i2t(&ctx.with_f(x.clone())))?;
    Ok((sim_err, relative_error(&analytic, &numeric)))
}

/// Finite-difference verification over `instances` seeded random contexts.
/// Instance `k` draws from `ChaCha8Rng::seed_from_u64(seed + k)`.
pub fn run_gradcheck(
    instances: usize,
    dim: usize,
    negatives: usize,
    seed: u64,
    exec: Execution,
) -> Result<GradcheckReport> {
    let checks = exec.try_map(instances, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let ctx = random_context(&mut rng, dim, negatives)?;
        let (similarity_rel_error, loss_rel_error) = check_instance(&ctx, FD_STEP)?;
        Ok::<_, Error>(InstanceCheck {
            index: k,
            tau: ctx.tau,
            similarity_rel_error,
            loss_rel_error,
        })
    })?;
    let max_sim = checks
        .iter()
        .map(|c| c.similarity_rel_error)
        .fold(0.0, f64::max);
    let max_loss = checks.iter().map(|c| c.loss_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        dim,
        negatives,
        step: FD_STEP,
        tolerance: FD_TOLERANCE,
        max_similarity_rel_error: max_sim,
        max_loss_rel_error: max_loss,
        passed: max_sim <= FD_TOLERANCE && max_loss <= FD_TOLERANCE,
        instances: checks,
    })
}
