//! Encoder, expert projections, task routers and the equivariant predictor.

mod layers;
mod store;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{BatchNorm, Conv, Linear, Mlp};
pub use store::{apply_bn_updates, BnUpdate, Ctx, Mode, ParamStore, BN_EPS, BN_MOMENTUM};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::data::{Image, AUG_DIM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One expert per task.
    Separate,
    /// Task experts plus a shared expert whose output is added to both.
    SingleShared,
    /// `N` experts mixed by per-task softmax routers.
    Mmoe,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Separate => "separate",
            Variant::SingleShared => "single_shared",
            Variant::Mmoe => "mmoe",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(Variant::Separate),
            "single_shared" => Ok(Variant::SingleShared),
            "mmoe" => Ok(Variant::Mmoe),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected separate, single_shared or mmoe)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Inv,
    Eq,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Inv => "inv",
            Task::Eq => "eq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Expert count for `mmoe`; the other variants fix their own.
    pub n_experts: usize,
    /// Encoder block widths; the last is the representation size.
    pub widths: [usize; 3],
    pub d_h: usize,
    pub d_z: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Mmoe,
            n_experts: 4,
            widths: [16, 32, 64],
            d_h: 128,
            d_z: 32,
        }
    }
}

impl ModelConfig {
    pub fn d_y(&self) -> usize {
        self.widths[2]
    }

    pub fn expert_count(&self) -> usize {
        match self.variant {
            Variant::Separate => 2,
            Variant::SingleShared => 3,
            Variant::Mmoe => self.n_experts,
        }
    }

    /// Human-readable expert names, in parameter order.
    pub fn expert_labels(&self) -> Vec<String> {
        match self.variant {
            Variant::Separate => vec!["inv".into(), "eq".into()],
            Variant::SingleShared => vec!["inv".into(), "eq".into(), "shared".into()],
            Variant::Mmoe => (0..self.n_experts).map(|k| k.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Mmoe && self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if self.widths.contains(&0) || self.d_h == 0 || self.d_z == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    blocks: Vec<(Conv, BatchNorm)>,
}

/// Graph handles for one training forward pass over `B` images.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub batch: usize,
    /// Representations of the `2B` views followed by the `B` originals.
    pub y: Var,
    /// Expert outputs over the same `3B` rows.
    pub expert_outputs: Vec<Var>,
    pub z_inv: Var,
    pub z_eq: Var,
    /// `z°` for the originals, `B` rows.
    pub z_orig: Var,
    /// Predictions for both views, `2B` rows.
    pub z_hat: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Real = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    encoder: Encoder,
    experts: Vec<Mlp>,
    routers: Option<[Linear; 2]>,
    psi: Linear,
    phi: Mlp,
}

/// Stacks images into a `[n, 3, h, w]` tensor.
pub fn image_batch<S: Real>(images: &[&Image]) -> Result<Tensor<S>> {
    let first = images.first().ok_or_else(|| Error::shape("image_batch", "no images"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::shape("image_batch", "images differ in size"));
        }
        data.extend(im.data.iter().map(|&v| S::of(v as f64)));
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

impl<S: Real> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut c_in = 3;
        let mut blocks = Vec::new();
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let conv = Conv::new(&mut store, &mut rng, &format!("encoder.conv{i}"), c_in, c_out);
            let bn = BatchNorm::new(&mut store, &format!("encoder.bn{i}"), c_out);
            blocks.push((conv, bn));
            c_in = c_out;
        }
        let d_y = cfg.d_y();
        let experts = (0..cfg.expert_count())
            .map(|k| Mlp::new(&mut store, &mut rng, &format!("expert.{k}"), d_y, cfg.d_h, cfg.d_z))
            .collect();
        let routers = (cfg.variant == Variant::Mmoe).then(|| {
            [Task::Inv, Task::Eq].map(|t| {
                Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("router.{}", t.as_str()),
                    d_y,
                    cfg.n_experts,
                )
            })
        });
        let psi = Linear::without_bias(&mut store, &mut rng, "psi", AUG_DIM, cfg.d_z);
        let phi = Mlp::new(&mut store, &mut rng, "phi", 2 * cfg.d_z, cfg.d_h, cfg.d_z);
        Ok(Model {
            cfg,
            store,
            encoder: Encoder { blocks },
            experts,
            routers,
            psi,
            phi,
        })
    }

    /// The same model with parameters converted to another precision.
    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            experts: self.experts.clone(),
            routers: self.routers.clone(),
            psi: self.psi.clone(),
            phi: self.phi.clone(),
        }
    }

    pub fn bind<'g>(&self, graph: &'g mut Graph<S>, mode: Mode, track_grads: bool) -> Ctx<'g, S> {
        Ctx::new(graph, &self.store, mode, track_grads)
    }

    /// `f`: `[n, 3, h, w]` images to `[n, d_y]` representations.
    pub fn encode(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.encoder.blocks {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, &self.store, h)?;
            h = ctx.graph.relu(h)?;
            h = ctx.graph.avg_pool2(h)?;
        }
        ctx.graph.global_avg_pool(h)
    }

    pub fn expert_outputs(&self, ctx: &mut Ctx<S>, y: Var) -> Result<Vec<Var>> {
        self.experts.iter().map(|e| e.forward(ctx, &self.store, y)).collect()
    }

    /// Softmax routing weights `[n, N]` for `task`; `mmoe` only.
    pub fn route(&self, ctx: &mut Ctx<S>, y: Var, task: Task) -> Result<Var> {
        let routers = self
            .routers
            .as_ref()
            .ok_or_else(|| Error::Variant(format!("routing requested on the {} variant", self.cfg.variant)))?;
        let r = match task {
            Task::Inv => &routers[0],
            Task::Eq => &routers[1],
        };
        let logits = r.forward(ctx, y)?;
        ctx.graph.softmax_rows(logits)
    }

    /// Combines precomputed expert outputs into the embedding for `task`.
    pub fn mix(&self, ctx: &mut Ctx<S>, y: Var, outs: &[Var], task: Task) -> Result<Var> {
        if outs.len() != self.experts.len() {
            return Err(Error::shape(
                "mix",
                format!("{} expert outputs for {} experts", outs.len(), self.experts.len()),
            ));
        }
        let t = match task {
            Task::Inv => 0,
            Task::Eq => 1,
        };
        match self.cfg.variant {
            Variant::Separate => Ok(outs[t]),
            Variant::SingleShared => ctx.graph.add(outs[t], outs[2]),
            Variant::Mmoe => {
                let s = self.route(ctx, y, task)?;
                let mut z: Option<Var> = None;
                for (k, &o) in outs.iter().enumerate() {
                    let w = ctx.graph.slice_cols(s, k, 1)?;
                    let term = ctx.graph.mul(o, w)?;
                    z = Some(match z {
                        Some(acc) => ctx.graph.add(acc, term)?,
                        None => term,
                    });
                }
                Ok(z.expect("at least one expert"))
            }
        }
    }

    pub fn project(&self, ctx: &mut Ctx<S>, y: Var, task: Task) -> Result<Var> {
        let d_y = self.cfg.d_y();
        match ctx.graph.shape(y) {
            [_, d] if *d == d_y => {}
            other => return Err(Error::shape("project", format!("expected [n, {d_y}], got {other:?}"))),
        }
        let outs = self.expert_outputs(ctx, y)?;
        self.mix(ctx, y, &outs, task)
    }

    /// `z°`: the equivariant projection of the unaugmented image.
    pub fn project_original(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = self.encode(ctx, x)?;
        self.project(ctx, y, Task::Eq)
    }

    /// `ẑ = z° + φ_T([z°, ψ(a)])`.
    pub fn predict(&self, ctx: &mut Ctx<S>, z_orig: Var, a_norm: Var) -> Result<Var> {
        let (n, d) = (ctx.graph.shape(z_orig)[0], self.cfg.d_z);
        if ctx.graph.shape(z_orig) != [n, d] || ctx.graph.shape(a_norm) != [n, AUG_DIM] {
            return Err(Error::shape(
                "predict",
                format!(
                    "z° {:?} and parameters {:?} must be [{n}, {d}] and [{n}, {AUG_DIM}]",
                    ctx.graph.shape(z_orig),
                    ctx.graph.shape(a_norm)
                ),
            ));
        }
        let pa = self.psi.forward(ctx, a_norm)?;
        let joint = ctx.graph.concat_cols(&[z_orig, pa])?;
        let delta = self.phi.forward(ctx, &self.store, joint)?;
        ctx.graph.add(z_orig, delta)
    }

    /// One encoder pass over `[views; originals]`, then both projections,
    /// `z°` and the per-view predictions. `views` holds `2B` images where
    /// rows `i` and `i + B` come from original `i`.
    pub fn forward_train(&self, ctx: &mut Ctx<S>, views: Var, originals: Var, a_norm: Var) -> Result<TrainForward> {
        let b = ctx.graph.shape(originals)[0];
        if ctx.graph.shape(views)[0] != 2 * b {
            return Err(Error::shape("forward_train", "need exactly two views per original"));
        }
        let x = ctx.graph.concat_rows(&[views, originals])?;
        let y = self.encode(ctx, x)?;
        let outs = self.expert_outputs(ctx, y)?;
        let z_inv_all = self.mix(ctx, y, &outs, Task::Inv)?;
        let z_eq_all = self.mix(ctx, y, &outs, Task::Eq)?;
        let z_inv = ctx.graph.slice_rows(z_inv_all, 0, 2 * b)?;
        let z_eq = ctx.graph.slice_rows(z_eq_all, 0, 2 * b)?;
        let z_orig = ctx.graph.slice_rows(z_eq_all, 2 * b, b)?;
        let z_orig2 = ctx.graph.concat_rows(&[z_orig, z_orig])?;
        let z_hat = self.predict(ctx, z_orig2, a_norm)?;
        Ok(TrainForward {
            batch: b,
            y,
            expert_outputs: outs,
            z_inv,
            z_eq,
            z_orig,
            z_hat,
        })
    }

    pub fn expert_prefix(k: usize) -> String {
        format!("expert.{k}.")
    }

    /// Parameter indices of expert `k`.
    pub fn expert_params(&self, k: usize) -> Vec<usize> {
        self.store.indices_with_prefix(&Self::expert_prefix(k))
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn has_routers(&self) -> bool {
        self.routers.is_some()
    }

    /// Zeroes both routers, making every routing row uniform.
    pub fn zero_routers(&mut self) {
        for name in [
            "router.inv.weight",
            "router.inv.bias",
            "router.eq.weight",
            "router.eq.bias",
        ] {
            if let Ok(t) = self.store.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = S::zero());
            }
        }
    }

    /// Zeroes the last layer of `φ_T`, so predictions equal `z°`.
    pub fn zero_predictor_output(&mut self) {
        for i in [Some(self.phi.l3.w), self.phi.l3.b].into_iter().flatten() {
            self.store.params[i].data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        apply_bn_updates(&mut self.store, updates, BN_MOMENTUM);
    }
}
