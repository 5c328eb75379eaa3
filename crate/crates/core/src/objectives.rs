//! Contrastive objectives over cosine similarity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

/// Which similarities form the negatives of the equivariant loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqDenominator {
    /// `sim(z_i, z_j)` over targets, `j ≠ i`.
    #[default]
    Targets,
    /// `sim(ẑ_i, z_j)`, `j ≠ i`.
    Predictions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub eq_denominator: EqDenominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.2,
            lambda: 1.0,
            eq_denominator: EqDenominator::Targets,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Cosine similarity. `degenerate` is set when either vector is zero, in
/// which case `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Cosine {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

fn off_diagonal(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}

fn check_pairs<S: Real>(g: &Graph<S>, z: Var, op: &'static str) -> Result<usize> {
    let (n, _) = match g.shape(z) {
        [n, d] => (*n, *d),
        other => return Err(Error::shape(op, format!("expected [2B, d], got {other:?}"))),
    };
    if n % 2 != 0 {
        return Err(Error::shape(op, format!("{n} rows cannot be split into two views")));
    }
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "{op} needs B >= 2 images per batch for negatives, got B = {}",
            n / 2
        )));
    }
    Ok(n)
}

/// Cosine similarity matrix `norm(a) · norm(b)ᵀ / τ`.
fn scaled_sims<S: Real>(g: &mut Graph<S>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let bt = g.transpose(b)?;
    let s = g.matmul(a, bt)?;
    g.scalar_mul(s, 1.0 / tau)
}

/// NT-Xent over `2B` embeddings where rows `i` and `i + B` are positives.
pub fn info_nce_invariant<S: Real>(g: &mut Graph<S>, z: Var, tau: f64) -> Result<Var> {
    let n = check_pairs(g, z, "info_nce_invariant")?;
    let b = n / 2;
    let zn = g.l2_normalize_rows(z)?;
    let s = scaled_sims(g, zn, zn, tau)?;
    let lse = g.logsumexp_rows(s, Some(&off_diagonal(n)))?;
    let partner: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let pos = g.gather_cols(s, &partner)?;
    let per_anchor = g.sub(lse, pos)?;
    g.mean_all(per_anchor)
}

/// `−(1/2B) Σ_i log[exp(sim(z_i, ẑ_i)/τ) / Σ_{j≠i} exp(sim(·, z_j)/τ)]`, with
/// the denominator's left argument chosen by `denom`.
pub fn info_nce_equivariant<S: Real>(
    g: &mut Graph<S>,
    z_eq: Var,
    z_hat: Var,
    tau: f64,
    denom: EqDenominator,
) -> Result<Var> {
    let n = check_pairs(g, z_eq, "info_nce_equivariant")?;
    if g.shape(z_hat) != g.shape(z_eq) {
        return Err(Error::shape(
            "info_nce_equivariant",
            format!("predictions {:?} vs targets {:?}", g.shape(z_hat), g.shape(z_eq)),
        ));
    }
    let zn = g.l2_normalize_rows(z_eq)?;
    let hn = g.l2_normalize_rows(z_hat)?;
    let prod = g.mul(zn, hn)?;
    let pos_sim = g.sum_rows(prod)?;
    let pos = g.scalar_mul(pos_sim, 1.0 / tau)?;
    let left = match denom {
        EqDenominator::Targets => zn,
        EqDenominator::Predictions => hn,
    };
    let s = scaled_sims(g, left, zn, tau)?;
    let lse = g.logsumexp_rows(s, Some(&off_diagonal(n)))?;
    let per_anchor = g.sub(lse, pos)?;
    g.mean_all(per_anchor)
}

/// `l_inv + λ·l_eq`; `λ = 0` returns `l_inv` itself.
pub fn total_loss<S: Real>(g: &mut Graph<S>, l_inv: Var, l_eq: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(l_inv);
    }
    let weighted = g.scalar_mul(l_eq, lambda)?;
    g.add(l_inv, weighted)
}

/// Scalar form of [`total_loss`].
pub fn combine(l_inv: f64, l_eq: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        l_inv
    } else {
        l_inv + lambda * l_eq
    }
}
