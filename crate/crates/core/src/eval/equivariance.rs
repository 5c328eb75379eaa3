//! Equivariance and invariance measures over (original, augmented,
//! parameters) triples.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EmbeddingSet;
use crate::autodiff::{Graph, Sgd, Tensor};
use crate::data::{apply_aug, keyed_rng, sample_aug_params, AugConfig, AugParams, Image, ParamStats, AUG_DIM};
use crate::error::{Error, Result};
use crate::objectives::cosine_sim;

pub const MIN_TRAIN_TRIPLES: usize = 100;
/// Width of the learned parameter projection in the R-equivariance probe.
pub const R_EQUIV_DIM: usize = 32;
pub const R_EQUIV_STEPS: usize = 2000;
pub const R_EQUIV_LR: f64 = 0.01;
const R_EQUIV_MOMENTUM: f64 = 0.9;

/// Aligned rows: `aug[i]` embeds `T(x_i; a_i)`, `orig[i]` embeds `x_i`, and
/// `params[i]` is `a_i` normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Triples {
    pub orig: EmbeddingSet,
    pub aug: EmbeddingSet,
    pub params: Vec<[f64; AUG_DIM]>,
}

impl Triples {
    pub fn new(orig: EmbeddingSet, aug: EmbeddingSet, params: Vec<[f64; AUG_DIM]>) -> Result<Self> {
        if orig.rows != aug.rows || orig.rows != params.len() {
            return Err(Error::Contract(format!(
                "triples need aligned rows: {} originals, {} views, {} parameter vectors",
                orig.rows,
                aug.rows,
                params.len()
            )));
        }
        Ok(Triples { orig, aug, params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Views, their raw parameters and their normalized parameters.
pub type ViewSet = (Vec<Image>, Vec<AugParams>, Vec<[f64; AUG_DIM]>);

/// One augmented view per image from the stream `(seed, 0, i, tag)`, with
/// its parameters normalized by `stats`.
pub fn view_triples(images: &[Image], aug: &AugConfig, stats: &ParamStats, seed: u64, tag: u64) -> Result<ViewSet> {
    let mut views = Vec::with_capacity(images.len());
    let mut params = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        let a = sample_aug_params(&mut keyed_rng(seed, 0, i as u64, tag), aug);
        views.push(apply_aug(x, &a)?);
        params.push(a);
    }
    let norm = params.iter().map(|a| stats.normalize(a).map(f64::from)).collect();
    Ok((views, params, norm))
}

fn check_train(train: &Triples, test: &Triples) -> Result<()> {
    if train.len() < MIN_TRAIN_TRIPLES {
        return Err(Error::InsufficientData(format!(
            "{} training triples, need at least {MIN_TRAIN_TRIPLES}",
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::InsufficientData("no held-out triples".into()));
    }
    if train.orig.cols != test.orig.cols || train.aug.cols != test.aug.cols {
        return Err(Error::shape(
            "equivariance",
            "train and test embeddings differ in width",
        ));
    }
    Ok(())
}

fn params_tensor(p: &[[f64; AUG_DIM]]) -> Tensor<f64> {
    Tensor::from_fn(&[p.len(), AUG_DIM], |k| p[k / AUG_DIM][k % AUG_DIM])
}

fn scaled(set: &EmbeddingSet, s: f64) -> Tensor<f64> {
    Tensor::from_fn(&[set.rows, set.cols], |k| set.data[k] / s)
}

/// Learns `z(T(x; a)) ≈ [z(x), ψ(a)]·W + b`, where `ψ` is a linear map to
/// 32 dims, by full-batch momentum SGD on the squared error. Returns the
/// mean cosine similarity between predicted and actual augmented embeddings
/// on `test`. Embeddings are divided by the RMS of the training originals
/// so the fixed learning rate suits any scale; cosine scores are unaffected.
pub fn r_equivariance(train: &Triples, test: &Triples, seed: u64) -> Result<f64> {
    check_train(train, test)?;
    let (d_in, d_out) = (train.orig.cols, train.aug.cols);
    let rms = (train.orig.data.iter().map(|v| v * v).sum::<f64>() / train.orig.data.len() as f64).sqrt();
    let s = if rms > 0.0 { rms } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (1.0 / AUG_DIM as f64).sqrt();
    let mut params = vec![
        Tensor::from_fn(&[AUG_DIM, R_EQUIV_DIM], |_| rng.gen_range(-bound..=bound)),
        Tensor::zeros(&[R_EQUIV_DIM]),
        Tensor::zeros(&[d_in + R_EQUIV_DIM, d_out]),
        Tensor::zeros(&[d_out]),
    ];
    let predict = |g: &mut Graph<f64>, p: &[Tensor<f64>], t: &Triples, track: bool| -> Result<_> {
        let vars: Vec<_> = p.iter().map(|x| g.leaf(x.clone().with_requires_grad(track))).collect();
        let z = g.constant(scaled(&t.orig, s));
        let a = g.constant(params_tensor(&t.params));
        let pa = g.matmul(a, vars[0])?;
        let pa = g.add(pa, vars[1])?;
        let h = g.concat_cols(&[z, pa])?;
        let out = g.matmul(h, vars[2])?;
        Ok((g.add(out, vars[3])?, vars))
    };
    let target = scaled(&train.aug, s);
    let mut opt = Sgd::<f64>::new(R_EQUIV_LR, R_EQUIV_MOMENTUM, 0.0, 1)?;
    for _ in 0..R_EQUIV_STEPS {
        let mut g = Graph::new();
        let (pred, vars) = predict(&mut g, &params, train, true)?;
        let t = g.constant(target.clone());
        let diff = g.sub(pred, t)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum_all(sq)?;
        let loss = g.scalar_mul(total, 1.0 / train.len() as f64)?;
        g.backward(loss)?;
        for (p, v) in params.iter_mut().zip(vars) {
            p.set_grad(g.take_grad(v).expect("tracked leaf"))?;
        }
        opt.step_with_lr(&mut params, R_EQUIV_LR)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("R-equivariance predictor"));
        }
    }
    let mut g = Graph::new();
    let (pred, _) = predict(&mut g, &params, test, false)?;
    let pred = g.value(pred);
    let total: f64 = (0..test.len())
        .map(|i| cosine_sim(pred.row(i), test.aug.row(i)).value)
        .sum();
    Ok(total / test.len() as f64)
}

/// Ridge least-squares readout of the normalized parameters from
/// `[z(x), z(T(x; a))]`; returns the held-out mean squared error.
pub fn p_equivariance(train: &Triples, test: &Triples) -> Result<f64> {
    check_train(train, test)?;
    let features = |t: &Triples| -> DMatrix<f64> {
        let (p, q) = (t.orig.cols, t.aug.cols);
        DMatrix::from_fn(t.len(), p + q, |i, j| {
            if j < p {
                t.orig.row(i)[j]
            } else {
                t.aug.row(i)[j - p]
            }
        })
    };
    let targets = |t: &Triples| DMatrix::from_fn(t.len(), AUG_DIM, |i, j| t.params[i][j]);
    let (mut x, mut y) = (features(train), targets(train));
    let x_mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let y_mean: Vec<f64> = y.column_iter().map(|c| c.mean()).collect();
    for (mut c, m) in x.column_iter_mut().zip(&x_mean) {
        c.add_scalar_mut(-m);
    }
    for (mut c, m) in y.column_iter_mut().zip(&y_mean) {
        c.add_scalar_mut(-m);
    }
    let mut gram = x.transpose() * &x;
    let p = gram.nrows();
    let ridge = 1e-6 * (gram.trace() / p as f64).max(1e-12);
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let rhs = x.transpose() * &y;
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("P-equivariance normal equations".into()))?
        .solve(&rhs);
    let xt = features(test);
    let yt = targets(test);
    let mut sq = 0.0;
    for i in 0..test.len() {
        let row = DVector::from_iterator(xt.ncols(), xt.row(i).iter().zip(&x_mean).map(|(v, m)| v - m));
        let pred = beta.transpose() * row;
        for j in 0..AUG_DIM {
            sq += (pred[j] + y_mean[j] - yt[(i, j)]).powi(2);
        }
    }
    Ok(sq / (test.len() * AUG_DIM) as f64)
}

/// Mean cosine similarity between paired rows.
pub fn invariance_score(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Contract(format!(
            "paired sets differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok((0..a.rows).map(|i| cosine_sim(a.row(i), b.row(i)).value).sum::<f64>() / a.rows as f64)
}
