//! Cosine similarity between the encoder gradients of the two task losses.

use super::par_map;
use crate::autodiff::Graph;
use crate::data::ParamStats;
use crate::error::{Error, Result};
use crate::models::{Mode, Model};
use crate::objectives::LossConfig;
use crate::trainer::{batch_inputs, joint_loss, TrainBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    /// `L_inv`.
    Inv,
    /// `λ·L_eq`.
    Eq,
}

/// Flattened gradient of `term` with respect to every encoder parameter.
fn encoder_gradient(
    model: &Model<f32>,
    batch: &TrainBatch,
    stats: &ParamStats,
    loss: &LossConfig,
    term: LossTerm,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (views, originals, a_norm) = batch_inputs(&mut g, batch, stats)?;
    let mut ctx = model.bind(&mut g, Mode::Train, true);
    let l = joint_loss(model, &mut ctx, views, originals, a_norm, loss)?;
    let target = match term {
        LossTerm::Inv => l.inv,
        LossTerm::Eq => ctx.graph.scalar_mul(l.eq, loss.lambda)?,
    };
    ctx.graph.backward(target)?;
    let mut out = Vec::new();
    for i in model.store.indices_with_prefix("encoder.") {
        let v = ctx.var(i);
        let grad = ctx
            .graph
            .grad(v)
            .ok_or_else(|| Error::Contract("encoder parameter without gradient".into()))?;
        out.extend(grad.iter().map(|&x| x as f64));
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64], what: &str) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(format!("zero encoder gradient ({what})")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine between the encoder gradients of terms `a` and `b` on one batch.
/// Batchnorm uses batch statistics, as in training; the model is not
/// modified.
pub fn task_gradient_cosine(
    model: &Model<f32>,
    batch: &TrainBatch,
    stats: &ParamStats,
    loss: &LossConfig,
    a: LossTerm,
    b: LossTerm,
) -> Result<f64> {
    let ga = encoder_gradient(model, batch, stats, loss, a)?;
    let gb = if a == b {
        ga.clone()
    } else {
        encoder_gradient(model, batch, stats, loss, b)?
    };
    cosine(&ga, &gb, "one task loss does not reach the encoder")
}

/// Mean over `batches` of the cosine between the encoder gradients of
/// `L_inv` and `λ·L_eq`.
pub fn grad_alignment(
    model: &Model<f32>,
    batches: &[TrainBatch],
    stats: &ParamStats,
    loss: &LossConfig,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::InsufficientData(
            "grad_alignment needs at least one batch".into(),
        ));
    }
    let per_batch = par_map(batches, |b| {
        task_gradient_cosine(model, b, stats, loss, LossTerm::Inv, LossTerm::Eq)
    });
    let mut total = 0.0;
    for c in per_batch {
        total += c?;
    }
    Ok(total / batches.len() as f64)
}
