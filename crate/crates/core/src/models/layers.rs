use rand::Rng;

use super::store::{uniform, BnUpdate, Ctx, Mode, ParamStore, BN_EPS};
use crate::autodiff::{BnMode, Real, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/√d_in`, zero bias.
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut l = Self::without_bias(store, rng, name, d_in, d_out);
        l.b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        l
    }

    /// For layers feeding a batchnorm, whose shift makes a bias redundant.
    pub fn without_bias<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound));
        Linear {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let h = ctx.graph.matmul(x, ctx.var(self.w))?;
        match self.b {
            Some(b) => ctx.graph.add(h, ctx.var(b)),
            None => Ok(h),
        }
    }
}

/// 3×3 convolution without bias; it always feeds a batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new<S: Real, R: Rng>(store: &mut ParamStore<S>, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Self {
        let fan_in = (c_in * 9) as f64;
        let w = store.add(
            format!("{name}.weight"),
            uniform(rng, &[c_out, c_in, 3, 3], (1.0 / fan_in).sqrt()),
        );
        Conv { w, c_out }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let zero = ctx.graph.constant(Tensor::zeros(&[self.c_out]));
        ctx.graph.conv2d(x, ctx.var(self.w), zero)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    /// Running mean at `buffer`, running variance at `buffer + 1`.
    pub buffer: usize,
}

impl BatchNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::from_fn(&[c], |_| S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        let buffer = store.add_buffer(format!("{name}.running_mean"), vec![0.0; c]);
        store.add_buffer(format!("{name}.running_var"), vec![1.0; c]);
        BatchNorm { gamma, beta, buffer }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let out = ctx.graph.batchnorm(x, g, b, &BnMode::Train { eps: BN_EPS })?;
                let (mean, var) = ctx.graph.batch_stats(out).expect("train-mode batchnorm records stats");
                let update = BnUpdate {
                    buffer: self.buffer,
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                };
                ctx.bn_updates.push(update);
                Ok(out)
            }
            Mode::Eval => {
                let mode = BnMode::Eval {
                    mean: store.buffers[self.buffer].clone(),
                    var: store.buffers[self.buffer + 1].clone(),
                    eps: BN_EPS,
                };
                ctx.graph.batchnorm(x, g, b, &mode)
            }
        }
    }
}

/// `d_in → d_h → d_h → d_out` with batchnorm and ReLU after the two hidden
/// layers and a plain linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub bn1: BatchNorm,
    pub l2: Linear,
    pub bn2: BatchNorm,
    pub l3: Linear,
}

impl Mlp {
    pub fn new<S: Real, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_h: usize,
        d_out: usize,
    ) -> Self {
        let l1 = Linear::without_bias(store, rng, &format!("{name}.fc1"), d_in, d_h);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), d_h);
        let l2 = Linear::without_bias(store, rng, &format!("{name}.fc2"), d_h, d_h);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), d_h);
        let l3 = Linear::new(store, rng, &format!("{name}.fc3"), d_h, d_out);
        Mlp { l1, bn1, l2, bn2, l3 }
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = self.l1.forward(ctx, x)?;
        h = self.bn1.forward(ctx, store, h)?;
        h = ctx.graph.relu(h)?;
        h = self.l2.forward(ctx, h)?;
        h = self.bn2.forward(ctx, store, h)?;
        h = ctx.graph.relu(h)?;
        self.l3.forward(ctx, h)
    }
}
