//! Two-view batch construction, the joint training step, and the epoch loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, grad_check_at, CheckResult, Graph, Real, Sgd, Tensor, Var};
use crate::data::{
    apply_aug, generate_dataset, keyed_rng, param_stats, sample_aug_params, AugConfig, AugParams, Dataset, DatasetSpec,
    Image, ParamStats, AUG_DIM,
};
use crate::error::{Error, Result};
use crate::models::{image_batch, Ctx, Mode, Model, ModelConfig, ParamStore};
use crate::objectives::{info_nce_equivariant, info_nce_invariant, total_loss, LossConfig};

/// Monte Carlo draws used to estimate augmentation-parameter statistics.
pub const PARAM_STATS_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// `dataset.seed` is overwritten by `seed` at run time.
    pub dataset: DatasetSpec,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            epochs: 30,
            batch_size: 64,
            lr0: 0.03,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            dataset: DatasetSpec::default(),
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.dataset_spec().validate()?;
        if self.dataset.n_images < self.batch_size {
            return Err(Error::Config(format!(
                "dataset.n_images ({}) is smaller than one batch ({})",
                self.dataset.n_images, self.batch_size
            )));
        }
        Sgd::<f32>::new(self.lr0, self.momentum, self.weight_decay, self.epochs)?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    pub fn aug_config(&self) -> AugConfig {
        AugConfig::with_image_size(self.dataset.image_size)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.n_images / self.batch_size
    }
}

/// `2B` views of `B` originals. Views `i` and `i + B` share original `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub originals: Vec<Image>,
    pub views: Vec<Image>,
    pub params: Vec<AugParams>,
}

impl TrainBatch {
    pub fn size(&self) -> usize {
        self.originals.len()
    }

    /// The other view of the same original.
    pub fn partner(&self, i: usize) -> usize {
        let b = self.size();
        (i + b) % (2 * b)
    }

    pub fn original_of(&self, view: usize) -> usize {
        view % self.size()
    }
}

/// Augments each original twice. View `v` of sample `i` draws from the
/// stream `(seed, epoch, batch_index·B + i, v + 1)`.
pub fn build_batch(
    images: &[&Image],
    epoch: usize,
    batch_index: usize,
    seed: u64,
    aug: &AugConfig,
) -> Result<TrainBatch> {
    let b = images.len();
    let mut views = Vec::with_capacity(2 * b);
    let mut params = Vec::with_capacity(2 * b);
    for v in 0..2u64 {
        for (i, x) in images.iter().enumerate() {
            let key = (batch_index * b + i) as u64;
            let a = sample_aug_params(&mut keyed_rng(seed, epoch as u64, key, v + 1), aug);
            views.push(apply_aug(x, &a)?);
            params.push(a);
        }
    }
    Ok(TrainBatch {
        originals: images.iter().map(|&x| x.clone()).collect(),
        views,
        params,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub inv: f64,
    pub eq: f64,
    pub total: f64,
}

/// Loss nodes of one joint forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub inv: Var,
    pub eq: Var,
    pub total: Var,
}

/// Builds the joint objective on an already bound context.
pub fn joint_loss<S: Real>(
    model: &Model<S>,
    ctx: &mut Ctx<S>,
    views: Var,
    originals: Var,
    a_norm: Var,
    loss: &LossConfig,
) -> Result<LossVars> {
    let fwd = model.forward_train(ctx, views, originals, a_norm)?;
    let inv = info_nce_invariant(ctx.graph, fwd.z_inv, loss.tau)?;
    let eq = info_nce_equivariant(ctx.graph, fwd.z_eq, fwd.z_hat, loss.tau, loss.eq_denominator)?;
    let total = total_loss(ctx.graph, inv, eq, loss.lambda)?;
    Ok(LossVars { inv, eq, total })
}

/// Graph constants for a batch: views, originals, normalized parameters.
pub fn batch_inputs<S: Real>(g: &mut Graph<S>, batch: &TrainBatch, stats: &ParamStats) -> Result<(Var, Var, Var)> {
    let views = g.constant(image_batch(&batch.views.iter().collect::<Vec<_>>())?);
    let originals = g.constant(image_batch(&batch.originals.iter().collect::<Vec<_>>())?);
    let a_norm = g.constant(normalized_params(&batch.params, stats)?);
    Ok((views, originals, a_norm))
}

/// Forward and backward of the joint objective; leaves gradients in
/// `model.store` and applies the batchnorm running-stat updates. Does not
/// touch the optimizer.
pub fn compute_gradients<S: Real>(
    model: &mut Model<S>,
    batch: &TrainBatch,
    stats: &ParamStats,
    loss: &LossConfig,
) -> Result<StepLosses> {
    let mut g = Graph::<S>::new();
    let (views, originals, a_norm) = batch_inputs(&mut g, batch, stats)?;
    let mut ctx = model.bind(&mut g, Mode::Train, true);
    let l = joint_loss(model, &mut ctx, views, originals, a_norm, loss)?;
    let scalar = |g: &Graph<S>, v| g.value(v).data()[0].as_f64();
    let losses = StepLosses {
        inv: scalar(ctx.graph, l.inv),
        eq: scalar(ctx.graph, l.eq),
        total: scalar(ctx.graph, l.total),
    };
    ctx.graph.backward(l.total)?;
    ctx.collect_grads(&mut model.store)?;
    let updates = ctx.take_bn_updates();
    model.apply_bn_updates(&updates);
    if model
        .store
        .params()
        .iter()
        .any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(losses)
}

/// Step for [`star_loss_grad_check`]. Roughly 10⁵ ReLU inputs sit in the
/// graph, so larger steps straddle kinks.
pub const STAR_CHECK_STEP: f64 = 1e-5;
/// Denominator floor for [`star_loss_grad_check`]. Batchnorm cancels any
/// input that is constant across the batch, so some gradients are exactly
/// zero and their difference quotients are pure rounding noise near 1e-10.
pub const STAR_CHECK_FLOOR: f64 = 1e-6;

/// Finite-difference check of the full joint objective on a two-image
/// batch, in `f64`. Every parameter tensor is checked at up to
/// `coords_per_tensor` random coordinates, and the views at as many.
pub fn star_loss_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    coords_per_tensor: usize,
    step: f64,
    floor: f64,
) -> Result<Vec<CheckResult>> {
    let spec = DatasetSpec {
        n_images: 6,
        n_classes: 6,
        image_size: 16,
        seed,
    };
    let ds = generate_dataset(&spec)?;
    let aug = AugConfig::with_image_size(16);
    let stats = param_stats(&aug, 1000, seed)?;
    let batch = build_batch(&[&ds.images[0], &ds.images[1]], 0, 0, seed, &aug)?;
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let loss = LossConfig::default();
    let mut rng = keyed_rng(seed, 0, 0, 0x6C);
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, coords_per_tensor).into_vec()
        }
    };
    let mut out = Vec::new();
    let views_t: Tensor<f64> = image_batch(&batch.views.iter().collect::<Vec<_>>())?;
    let coords = pick(views_t.len());
    let err = grad_check_at(
        |g, v| {
            let originals = g.constant(image_batch(&batch.originals.iter().collect::<Vec<_>>())?);
            let a_norm = g.constant(normalized_params(&batch.params, &stats)?);
            let mut ctx = model.bind(g, Mode::Train, false);
            Ok(joint_loss(&model, &mut ctx, v, originals, a_norm, &loss)?.total)
        },
        &views_t,
        step,
        floor,
        &coords,
    )?;
    out.push(CheckResult {
        name: "views".into(),
        max_rel_error: err,
    });
    for (i, name) in model.store.names().iter().enumerate() {
        let x = model.store.params()[i].clone();
        let coords = pick(x.len());
        let err = grad_check_at(
            |g, v| {
                let (views, originals, a_norm) = batch_inputs(g, &batch, &stats)?;
                let mut ctx = model.bind(g, Mode::Train, false);
                ctx.rebind(i, v);
                Ok(joint_loss(&model, &mut ctx, views, originals, a_norm, &loss)?.total)
            },
            &x,
            step,
            floor,
            &coords,
        )?;
        out.push(CheckResult {
            name: name.clone(),
            max_rel_error: err,
        });
    }
    Ok(out)
}

/// `[n, 12]` tensor of normalized parameter vectors.
pub fn normalized_params<S: Real>(params: &[AugParams], stats: &ParamStats) -> Result<Tensor<S>> {
    let data = params
        .iter()
        .flat_map(|a| stats.normalize(a))
        .map(|v| S::of(v as f64))
        .collect();
    Tensor::new(&[params.len(), AUG_DIM], data)
}

/// One optimizer step at learning rate `lr`.
pub fn train_step(
    model: &mut Model<f32>,
    batch: &TrainBatch,
    stats: &ParamStats,
    loss: &LossConfig,
    opt: &mut Sgd<f32>,
    lr: f64,
) -> Result<StepLosses> {
    let losses = compute_gradients(model, batch, stats, loss)?;
    if !(losses.inv.is_finite() && losses.eq.is_finite() && losses.total.is_finite()) {
        return Err(Error::NonFinite("loss"));
    }
    opt.step_with_lr(model.store.params_mut(), lr)?;
    Ok(losses)
}

/// Per-expert Frobenius norm of the parameter change between two states.
pub fn expert_update_norm<S: Real>(prev: &ParamStore<S>, next: &ParamStore<S>) -> Result<Vec<f64>> {
    if !prev.same_layout(next) {
        return Err(Error::Contract("checkpoints do not share an architecture".into()));
    }
    let mut norms = Vec::new();
    for k in 0.. {
        let idx = prev.indices_with_prefix(&Model::<S>::expert_prefix(k));
        if idx.is_empty() {
            break;
        }
        let sq: f64 = idx
            .iter()
            .flat_map(|&i| prev.params()[i].data().iter().zip(next.params()[i].data()))
            .map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2))
            .sum();
        norms.push(sq.sqrt());
    }
    Ok(norms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss_inv: f64,
    pub loss_eq: f64,
    pub loss_total: f64,
    pub expert_norms: Vec<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let n = rows.first().map_or(0, |r| r.expert_norms.len());
    let mut s = String::from("epoch,lr,loss_inv,loss_eq,loss_total");
    for k in 0..n {
        let _ = write!(s, ",expnorm_{k}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{},{}", r.epoch, r.lr, r.loss_inv, r.loss_eq, r.loss_total);
        for v in &r.expert_norms {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub stats: ParamStats,
    pub dataset: Dataset,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from scratch. Checkpoints are written to `ckpt_dir` when given and
/// `checkpoint_every > 0`.
pub fn train_run(cfg: &TrainConfig, ckpt_dir: Option<&Path>) -> Result<RunOutput> {
    train_run_with(cfg, ckpt_dir, |_| {})
}

/// [`train_run`] with a callback after each epoch.
pub fn train_run_with(
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset_spec())?;
    let aug = cfg.aug_config();
    let stats = param_stats(&aug, PARAM_STATS_SAMPLES, cfg.seed)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Sgd::<f32>::new(cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs)?;
    let b = cfg.batch_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        opt.set_epoch(epoch);
        order.sort_unstable();
        order.shuffle(&mut keyed_rng(cfg.seed, epoch as u64, u64::MAX, 0));
        let before = model.store.clone();
        let (mut inv, mut eq, mut total) = (0.0, 0.0, 0.0);
        let n_batches = cfg.batches_per_epoch();
        for bi in 0..n_batches {
            let images: Vec<&Image> = order[bi * b..(bi + 1) * b]
                .iter()
                .map(|&i| &dataset.images[i])
                .collect();
            let batch = build_batch(&images, epoch, bi, cfg.seed, &aug)?;
            let l = train_step(&mut model, &batch, &stats, &cfg.loss, &mut opt, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi,
                    lr,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;
            inv += l.inv;
            eq += l.eq;
            total += l.total;
        }
        let n = n_batches as f64;
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss_inv: inv / n,
            loss_eq: eq / n,
            loss_total: total / n,
            expert_norms: expert_update_norm(&before, &model.store)?,
        };
        on_epoch(&row);
        metrics.push(row);
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                crate::io::save_checkpoint(&path, &model.store)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(RunOutput {
        model,
        metrics,
        stats,
        dataset,
        checkpoints,
    })
}
