//! Central-difference gradient checking.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{BnMode, Graph, OpKind, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Default lower bound on the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Largest relative disagreement between the backward-pass gradient of `f`
/// at `x` and its central-difference estimate:
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, DENOM_FLOOR, &all)
}

/// [`grad_check`] restricted to the flat coordinates in `coords`, with an
/// explicit denominator floor. Raise the floor above the rounding noise of
/// the difference quotient, `≈ ε·|f|/step`, when some gradients are exactly
/// zero.
pub fn grad_check_at<F>(mut f: F, x: &Tensor<f64>, step: f64, floor: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.len()) {
        return Err(Error::Range(format!(
            "coordinate {bad} outside a tensor of {} values",
            x.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Range(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).expect("leaf grad populated").to_vec();

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(x.shape(), data)?);
        let out = f(&mut g, xv)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        let s = v.data()[0];
        if !s.is_finite() {
            return Err(Error::domain("grad_check", "function value is not finite"));
        }
        Ok(s)
    };

    let mut worst: f64 = 0.0;
    for &i in coords {
        let a = analytic[i];
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// One named entry of a gradient-check sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so the relu kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any tensor to a scalar through a fixed random weighting, so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Gradient checks for every differentiable graph operation, at each
/// supported rank, plus a small MLP and a softmax log-likelihood.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, err: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
        })
    };
    let h = DEFAULT_STEP;

    // Unary ops on their first input; other operands are fixed constants.
    let unary: Vec<(&str, OpKind, Vec<usize>)> = vec![
        ("scalar_mul", OpKind::ScalarMul(-1.7), vec![3, 4]),
        ("scalar_mul/rank1", OpKind::ScalarMul(0.3), vec![5]),
        ("exp", OpKind::Exp, vec![3, 4]),
        ("exp/rank4", OpKind::Exp, vec![2, 2, 2, 2]),
        ("softmax_rows", OpKind::SoftmaxRows, vec![4, 5]),
        ("softmax_rows/rank1", OpKind::SoftmaxRows, vec![6]),
        ("l2_normalize_rows", OpKind::L2NormalizeRows, vec![4, 3]),
        ("slice_rows", OpKind::SliceRows { start: 1, len: 2 }, vec![4, 3]),
        (
            "slice_rows/rank4",
            OpKind::SliceRows { start: 1, len: 1 },
            vec![3, 2, 2, 2],
        ),
        ("slice_cols", OpKind::SliceCols { start: 2, len: 2 }, vec![3, 5]),
        ("transpose", OpKind::Transpose, vec![3, 4]),
        ("mean_all", OpKind::MeanAll, vec![3, 4]),
        ("sum_all", OpKind::SumAll, vec![2, 3, 2, 2]),
        ("sum_rows", OpKind::SumRows, vec![3, 4]),
        ("avg_pool2", OpKind::AvgPool2, vec![2, 2, 4, 4]),
        ("global_avg_pool", OpKind::GlobalAvgPool, vec![2, 3, 2, 2]),
        ("logsumexp_rows", OpKind::LogSumExpRows(None), vec![3, 4]),
        (
            "logsumexp_rows/masked",
            OpKind::LogSumExpRows(Some(Rc::from(
                (0..12).map(|i| i % 4 != i / 4).collect::<Vec<_>>().into_boxed_slice(),
            ))),
            vec![3, 4],
        ),
        ("gather_cols", OpKind::GatherCols(vec![2, 0, 3]), vec![3, 4]),
    ];
    for (i, (name, kind, shape)) in unary.into_iter().enumerate() {
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let y = g.forward_op(&kind, &[x])?;
                weighted_sum(g, y, seed ^ (100 + i as u64))
            },
            &x,
            h,
        )?;
        record(name, err);
    }

    for (name, shape) in [("relu", vec![3, 4]), ("relu/rank4", vec![2, 2, 2, 2])] {
        let x = away_from_zero(&mut rng, &shape);
        let err = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                weighted_sum(g, y, seed ^ 7)
            },
            &x,
            h,
        )?;
        record(name, err);
    }

    let x = uniform(&mut rng, &[3, 4], 0.5, 2.0);
    record(
        "log",
        grad_check(
            |g, x| {
                let y = g.log(x)?;
                weighted_sum(g, y, seed ^ 8)
            },
            &x,
            h,
        )?,
    );

    // Binary ops: check each operand, for each broadcast form.
    let binaries = [("add", OpKind::Add), ("sub", OpKind::Sub), ("mul", OpKind::Mul)];
    let forms: [(&str, Vec<usize>); 4] = [
        ("same", vec![3, 4]),
        ("row", vec![1, 4]),
        ("col", vec![3, 1]),
        ("scalar", vec![1]),
    ];
    for (bname, kind) in &binaries {
        for (fname, rshape) in &forms {
            let lhs = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let rhs = uniform(&mut rng, rshape, -1.0, 1.0);
            let rc = rhs.clone();
            let e1 = grad_check(
                |g, x| {
                    let r = g.constant(rc.clone());
                    let y = g.forward_op(kind, &[x, r])?;
                    weighted_sum(g, y, seed ^ 9)
                },
                &lhs,
                h,
            )?;
            let lc = lhs.clone();
            let e2 = grad_check(
                |g, x| {
                    let l = g.constant(lc.clone());
                    let y = g.forward_op(kind, &[l, x])?;
                    weighted_sum(g, y, seed ^ 10)
                },
                &rhs,
                h,
            )?;
            record(&format!("{bname}/{fname}"), e1.max(e2));
        }
    }

    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let (ac, bc) = (a.clone(), b.clone());
    let e1 = grad_check(
        |g, x| {
            let bv = g.constant(bc.clone());
            let y = g.matmul(x, bv)?;
            weighted_sum(g, y, seed ^ 11)
        },
        &a,
        h,
    )?;
    let e2 = grad_check(
        |g, x| {
            let av = g.constant(ac.clone());
            let y = g.matmul(av, x)?;
            weighted_sum(g, y, seed ^ 11)
        },
        &b,
        h,
    )?;
    record("matmul", e1.max(e2));

    let parts = [
        uniform(&mut rng, &[3, 2], -1.0, 1.0),
        uniform(&mut rng, &[3, 3], -1.0, 1.0),
    ];
    let p1 = parts[1].clone();
    record(
        "concat_cols",
        grad_check(
            |g, x| {
                let o = g.constant(p1.clone());
                let y = g.concat_cols(&[x, o, x])?;
                weighted_sum(g, y, seed ^ 12)
            },
            &parts[0],
            h,
        )?,
    );
    let rows4 = uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
    let other4 = uniform(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
    record(
        "concat_rows/rank4",
        grad_check(
            |g, x| {
                let o = g.constant(other4.clone());
                let y = g.concat_rows(&[o, x])?;
                weighted_sum(g, y, seed ^ 13)
            },
            &rows4,
            h,
        )?,
    );
    let r2 = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    record(
        "concat_rows",
        grad_check(
            |g, x| {
                let y = g.concat_rows(&[x, x])?;
                weighted_sum(g, y, seed ^ 14)
            },
            &r2,
            h,
        )?,
    );

    // Batchnorm: input, scale and shift, in both modes and layouts.
    for (layout, shape) in [("rank2", vec![5, 3]), ("rank4", vec![3, 2, 2, 2])] {
        let c = shape[1];
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        let gamma = uniform(&mut rng, &[c], 0.5, 1.5);
        let beta = uniform(&mut rng, &[c], -0.5, 0.5);
        let eval = BnMode::Eval {
            mean: (0..c).map(|i| 0.1 * i as f64).collect(),
            var: (0..c).map(|i| 0.5 + 0.2 * i as f64).collect(),
            eps: 1e-5,
        };
        for (mode_name, mode) in [("train", BnMode::Train { eps: 1e-5 }), ("eval", eval)] {
            let (gc, bc, xc) = (gamma.clone(), beta.clone(), x.clone());
            let ex = grad_check(
                |g, x| {
                    let gm = g.constant(gc.clone());
                    let bt = g.constant(bc.clone());
                    let y = g.batchnorm(x, gm, bt, &mode)?;
                    weighted_sum(g, y, seed ^ 15)
                },
                &x,
                h,
            )?;
            let eg = grad_check(
                |g, gm| {
                    let xv = g.constant(xc.clone());
                    let bt = g.constant(bc.clone());
                    let y = g.batchnorm(xv, gm, bt, &mode)?;
                    weighted_sum(g, y, seed ^ 15)
                },
                &gamma,
                h,
            )?;
            let eb = grad_check(
                |g, bt| {
                    let xv = g.constant(xc.clone());
                    let gm = g.constant(gc.clone());
                    let y = g.batchnorm(xv, gm, bt, &mode)?;
                    weighted_sum(g, y, seed ^ 15)
                },
                &beta,
                h,
            )?;
            record(&format!("batchnorm/{mode_name}/{layout}"), ex.max(eg).max(eb));
        }
    }

    let x = uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.5, 0.5);
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    let ex = grad_check(
        |g, x| {
            let wv = g.constant(wc.clone());
            let bv = g.constant(bc.clone());
            let y = g.conv2d(x, wv, bv)?;
            weighted_sum(g, y, seed ^ 16)
        },
        &x,
        h,
    )?;
    let ew = grad_check(
        |g, wv| {
            let xv = g.constant(xc.clone());
            let bv = g.constant(bc.clone());
            let y = g.conv2d(xv, wv, bv)?;
            weighted_sum(g, y, seed ^ 16)
        },
        &w,
        h,
    )?;
    let eb = grad_check(
        |g, bv| {
            let xv = g.constant(xc.clone());
            let wv = g.constant(wc.clone());
            let y = g.conv2d(xv, wv, bv)?;
            weighted_sum(g, y, seed ^ 16)
        },
        &b,
        h,
    )?;
    record("conv2d", ex.max(ew).max(eb));

    // Three-layer relu MLP, checked against its first weight matrix and input.
    let x = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let ws = [
        uniform(&mut rng, &[5, 6], -0.6, 0.6),
        uniform(&mut rng, &[6, 6], -0.6, 0.6),
        uniform(&mut rng, &[6, 1], -0.6, 0.6),
    ];
    let mlp = |g: &mut Graph<f64>, x: Var, w0: Var| -> Result<Var> {
        let w1 = g.constant(ws[1].clone());
        let w2 = g.constant(ws[2].clone());
        let h0 = g.matmul(x, w0)?;
        let h0 = g.relu(h0)?;
        let h1 = g.matmul(h0, w1)?;
        let h1 = g.relu(h1)?;
        let o = g.matmul(h1, w2)?;
        g.mean_all(o)
    };
    let w0 = ws[0].clone();
    let e_in = grad_check(
        |g, xv| {
            let w = g.constant(w0.clone());
            mlp(g, xv, w)
        },
        &x,
        h,
    )?;
    let e_w = grad_check(
        |g, wv| {
            let xv = g.constant(x.clone());
            mlp(g, xv, wv)
        },
        &ws[0],
        h,
    )?;
    record("mlp3", e_in.max(e_w));

    // Softmax followed by log-likelihood of fixed labels.
    let logits = uniform(&mut rng, &[1, 8], -2.0, 2.0);
    record(
        "softmax_log_likelihood",
        grad_check(
            |g, x| {
                let p = g.softmax_rows(x)?;
                let lp = g.log(p)?;
                let picked = g.gather_cols(lp, &[3])?;
                let s = g.sum_all(picked)?;
                g.scalar_mul(s, -1.0)
            },
            &logits,
            h,
        )?,
    );

    Ok(out)
}
