use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors plus non-trainable buffers (batchnorm running
/// statistics). Registration order is the canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Real = f32> {
    names: Vec<String>,
    pub(crate) params: Vec<Tensor<S>>,
    buffer_names: Vec<String>,
    pub(crate) buffers: Vec<Vec<f64>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            params: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<S: Real> ParamStore<S> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.params.push(t.with_requires_grad(true));
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, v: Vec<f64>) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(v);
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        Ok(&mut self.params[i])
    }

    /// Indices of parameters whose name starts with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.names.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.indices_with_prefix(prefix)
            .iter()
            .map(|&i| self.params[i].len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.clone(),
        }
    }

    /// Same names, shapes and buffer layout.
    pub fn same_layout(&self, other: &ParamStore<S>) -> bool {
        self.names == other.names
            && self.buffer_names == other.buffer_names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.shape() == b.shape())
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| a.len() == b.len())
    }

    /// Replaces values from `names`/`tensors` pairs, checking that the
    /// layout matches exactly.
    pub fn load(&mut self, other: ParamStore<S>) -> Result<()> {
        if !self.same_layout(&other) {
            return Err(Error::Contract(
                "parameter layout differs from the model architecture".into(),
            ));
        }
        *self = other;
        Ok(())
    }

    pub(crate) fn from_parts(
        names: Vec<String>,
        params: Vec<Tensor<S>>,
        buffer_names: Vec<String>,
        buffers: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if names.len() != params.len() || buffer_names.len() != buffers.len() {
            return Err(Error::Format("name and value counts differ".into()));
        }
        Ok(ParamStore {
            names,
            params: params.into_iter().map(|t| t.with_requires_grad(true)).collect(),
            buffer_names,
            buffers,
        })
    }
}

/// Uniform initialization in `±bound`.
pub(crate) fn uniform<S: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound)))
}

/// Whether batchnorm uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update emitted by a train-mode batchnorm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub buffer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A forward pass in progress: the graph, one graph variable per parameter,
/// and the batchnorm updates to apply once the step completes.
pub struct Ctx<'g, S: Real = f32> {
    pub graph: &'g mut Graph<S>,
    vars: Vec<Var>,
    pub mode: Mode,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

impl<'g, S: Real> Ctx<'g, S> {
    /// Adds every parameter to `graph`. With `track_grads` false they enter
    /// as constants and no parameter gradients are computed.
    pub fn new(graph: &'g mut Graph<S>, store: &ParamStore<S>, mode: Mode, track_grads: bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| graph.leaf(p.clone().with_requires_grad(track_grads)))
            .collect();
        Ctx {
            graph,
            vars,
            mode,
            bn_updates: Vec::new(),
        }
    }

    #[inline]
    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Routes parameter `param` through `var` for subsequent ops.
    pub fn rebind(&mut self, param: usize, var: Var) {
        self.vars[param] = var;
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Moves the computed parameter gradients into `store`. Call after
    /// `graph.backward`.
    pub fn collect_grads(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        for (p, &v) in store.params.iter_mut().zip(&self.vars) {
            let g = self.graph.take_grad(v).ok_or_else(|| {
                Error::Contract("parameter has no gradient; was backward run with tracking on?".into())
            })?;
            p.set_grad(g)?;
        }
        Ok(())
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// `running ← (1 − m)·running + m·batch` for every update. Results are
/// rounded to `f32` so checkpoints hold them exactly.
pub fn apply_bn_updates<S: Real>(store: &mut ParamStore<S>, updates: &[BnUpdate], momentum: f64) {
    let blend = |r: &mut f64, b: f64| *r = ((1.0 - momentum) * *r + momentum * b) as f32 as f64;
    for u in updates {
        for (r, &b) in store.buffers[u.buffer].iter_mut().zip(&u.mean) {
            blend(r, b);
        }
        for (r, &b) in store.buffers[u.buffer + 1].iter_mut().zip(&u.var) {
            blend(r, b);
        }
    }
}
