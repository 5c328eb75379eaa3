//! Average routing weights per expert and task.

use super::{par_map, EMBED_BATCH};
use crate::autodiff::Graph;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::models::{image_batch, Mode, Model, Task};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRouting {
    pub expert: usize,
    pub mean_inv: f64,
    pub mean_eq: f64,
    /// `min(mean_inv, mean_eq) / max(mean_inv, mean_eq)`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    /// Sorted by descending ratio, then by expert index: shared experts
    /// first, task-specialized ones last.
    pub experts: Vec<ExpertRouting>,
}

impl RoutingReport {
    pub fn ratio_spread(&self) -> f64 {
        let r = self.experts.iter().map(|e| e.ratio);
        r.clone().fold(f64::NEG_INFINITY, f64::max) - r.fold(f64::INFINITY, f64::min)
    }
}

/// Eval-mode routing weights averaged over `images`.
pub fn routing_stats(model: &Model<f32>, images: &[Image]) -> Result<RoutingReport> {
    if !model.has_routers() {
        return Err(Error::Variant(format!(
            "routing statistics need mmoe, not {}",
            model.cfg.variant
        )));
    }
    if images.is_empty() {
        return Err(Error::InsufficientData("no images to route".into()));
    }
    let n = model.n_experts();
    let chunks: Vec<&[Image]> = images.chunks(EMBED_BATCH).collect();
    let sums = par_map(&chunks, |chunk| -> Result<[Vec<f64>; 2]> {
        let mut g = Graph::new();
        let mut ctx = model.bind(&mut g, Mode::Eval, false);
        let x = ctx.graph.constant(image_batch(&chunk.iter().collect::<Vec<_>>())?);
        let y = model.encode(&mut ctx, x)?;
        let mut out = [vec![0.0; n], vec![0.0; n]];
        for (t, task) in [Task::Inv, Task::Eq].into_iter().enumerate() {
            let s = model.route(&mut ctx, y, task)?;
            let w = ctx.graph.value(s);
            for i in 0..chunk.len() {
                w.row(i).iter().zip(&mut out[t]).for_each(|(&v, acc)| *acc += v as f64);
            }
        }
        Ok(out)
    });
    let mut total = [vec![0.0; n], vec![0.0; n]];
    for s in sums {
        let s = s?;
        for t in 0..2 {
            total[t].iter_mut().zip(&s[t]).for_each(|(a, b)| *a += b);
        }
    }
    let m = images.len() as f64;
    let mut experts: Vec<ExpertRouting> = (0..n)
        .map(|k| {
            let (a, b) = (total[0][k] / m, total[1][k] / m);
            ExpertRouting {
                expert: k,
                mean_inv: a,
                mean_eq: b,
                ratio: a.min(b) / a.max(b),
            }
        })
        .collect();
    experts.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then(a.expert.cmp(&b.expert)));
    Ok(RoutingReport { experts })
}
