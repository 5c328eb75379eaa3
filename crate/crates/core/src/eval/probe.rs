//! L2-regularized multinomial logistic regression on frozen features,
//! swept over a log-spaced penalty grid.

use std::collections::VecDeque;

use super::EmbeddingSet;
use crate::error::{Error, Result};

pub const PROBE_GRID_SIZE: usize = 45;
pub const PROBE_REG_RANGE: (f64, f64) = (1e-6, 1e5);
/// Gradient-norm tolerance of the inner solver.
pub const PROBE_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITER: usize = 5000;
const HISTORY: usize = 10;

/// `n` values evenly spaced in log10 between `lo` and `hi`, ascending.
pub fn reg_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub best_reg: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// `(reg, val_acc)` for every grid value, ascending in `reg`.
    pub sweep: Vec<(f64, f64)>,
    /// Grid values whose solve hit the iteration cap.
    pub unconverged: usize,
}

/// Standardized features, `n × d`, with a class label per row.
struct Problem {
    x: Vec<f64>,
    y: Vec<usize>,
    n: usize,
    d: usize,
    c: usize,
}

impl Problem {
    /// Penalized mean cross-entropy and its gradient. `theta` holds the
    /// `c × d` weights row by row, then `c` unpenalized biases.
    fn eval(&self, theta: &[f64], reg: f64, grad: &mut [f64]) -> f64 {
        let (d, c) = (self.d, self.c);
        let (w, b) = theta.split_at(c * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (gw, gb) = grad.split_at_mut(c * d);
        let mut logits = vec![0.0; c];
        let mut loss = 0.0;
        for i in 0..self.n {
            let xi = &self.x[i * d..(i + 1) * d];
            for k in 0..c {
                logits[k] = b[k] + xi.iter().zip(&w[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            loss += m + z.ln() - logits[self.y[i]];
            for k in 0..c {
                let p = (logits[k] - m).exp() / z - if k == self.y[i] { 1.0 } else { 0.0 };
                gb[k] += p;
                for (g, x) in gw[k * d..(k + 1) * d].iter_mut().zip(xi) {
                    *g += p * x;
                }
            }
        }
        let inv_n = 1.0 / self.n as f64;
        grad.iter_mut().for_each(|g| *g *= inv_n);
        let (gw, _) = grad.split_at_mut(c * d);
        let mut penalty = 0.0;
        for (g, wv) in gw.iter_mut().zip(w) {
            *g += reg * wv;
            penalty += wv * wv;
        }
        loss * inv_n + 0.5 * reg * penalty
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> usize {
        let (d, c) = (self.d, self.c);
        let (w, b) = theta.split_at(c * d);
        let score = |k: usize| b[k] + x.iter().zip(&w[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
        // first maximum wins
        (0..c)
            .fold((0, f64::NEG_INFINITY), |best, k| {
                let s = score(k);
                if s > best.1 {
                    (k, s)
                } else {
                    best
                }
            })
            .0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with a backtracking Armijo line search. Returns
/// whether the gradient norm fell below the tolerance.
fn lbfgs(p: &Problem, reg: f64, theta: &mut [f64]) -> bool {
    let n = theta.len();
    let mut g = vec![0.0; n];
    let mut f = p.eval(theta, reg, &mut g);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let mut g_new = vec![0.0; n];
    let mut trial = vec![0.0; n];
    for _ in 0..PROBE_MAX_ITER {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < PROBE_TOL {
            return true;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .back()
            .map_or(1.0 / gnorm.max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            hist.clear();
        }
        let mut step = 1.0;
        let mut f_new;
        loop {
            trial
                .iter_mut()
                .zip(theta.iter().zip(&dir))
                .for_each(|(t, (x, d))| *t = x + step * d);
            f_new = p.eval(&trial, reg, &mut g_new);
            if f_new <= f + 1e-4 * step * slope || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        if step < 1e-20 {
            return false;
        }
        let s: Vec<f64> = trial.iter().zip(theta.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if hist.len() == HISTORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        theta.copy_from_slice(&trial);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
    }
    dot(&g, &g).sqrt() < PROBE_TOL
}

fn check_labels(set: &EmbeddingSet, labels: &[usize], what: &str) -> Result<()> {
    if set.rows != labels.len() {
        return Err(Error::shape(
            "linear_probe",
            format!("{what}: {} rows but {} labels", set.rows, labels.len()),
        ));
    }
    Ok(())
}

/// Fits one classifier per value of `grid`, sweeping from the strongest
/// penalty down and warm-starting each fit from the previous one. Picks the
/// penalty with the best validation accuracy (the larger penalty on ties)
/// and reports its test accuracy. Features are standardized with training
/// statistics.
pub fn linear_probe(
    train: (&EmbeddingSet, &[usize]),
    val: (&EmbeddingSet, &[usize]),
    test: (&EmbeddingSet, &[usize]),
    grid: &[f64],
) -> Result<ProbeResult> {
    check_labels(train.0, train.1, "train")?;
    check_labels(val.0, val.1, "val")?;
    check_labels(test.0, test.1, "test")?;
    let d = train.0.cols;
    if val.0.cols != d || test.0.cols != d {
        return Err(Error::shape("linear_probe", "feature widths differ between splits"));
    }
    if grid.is_empty() || grid.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(Error::Range(
            "regularization grid must be non-empty and non-negative".into(),
        ));
    }
    let c = train.1.iter().chain(val.1).chain(test.1).max().map_or(0, |m| m + 1);
    let mut present = vec![false; c];
    train.1.iter().for_each(|&y| present[y] = true);
    if let Some(k) = present.iter().position(|&p| !p) {
        return Err(Error::Contract(format!("class {k} has no training examples")));
    }

    let n = train.0.rows;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in 0..n {
        train.0.row(i).iter().zip(&mut mean).for_each(|(x, m)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for ((x, m), s) in train.0.row(i).iter().zip(&mean).zip(&mut std) {
            *s += (x - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt().max(1e-6));
    let standardize = |set: &EmbeddingSet| -> Vec<f64> {
        (0..set.rows)
            .flat_map(|i| {
                set.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((x, m), s)| (x - m) / s)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let problem = Problem {
        x: standardize(train.0),
        y: train.1.to_vec(),
        n,
        d,
        c,
    };
    let accuracy = |theta: &[f64], set: &EmbeddingSet, labels: &[usize]| -> f64 {
        let x = standardize(set);
        let hits = (0..set.rows)
            .filter(|&i| problem.predict(theta, &x[i * d..(i + 1) * d]) == labels[i])
            .count();
        hits as f64 / set.rows as f64
    };

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut theta = vec![0.0; c * d + c];
    let mut fits: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(grid.len());
    let mut unconverged = 0;
    for &gi in &order {
        if !lbfgs(&problem, grid[gi], &mut theta) {
            unconverged += 1;
        }
        fits.push((grid[gi], accuracy(&theta, val.0, val.1), theta.clone()));
    }
    // fits run from the largest penalty down, so the first maximum is the
    // most regularized one
    let best = fits
        .iter()
        .enumerate()
        .fold(0, |best, (i, f)| if f.1 > fits[best].1 { i } else { best });
    let (best_reg, val_acc, ref theta) = fits[best];
    let test_acc = accuracy(theta, test.0, test.1);
    let mut sweep: Vec<(f64, f64)> = fits.iter().map(|f| (f.0, f.1)).collect();
    sweep.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(ProbeResult {
        best_reg,
        val_acc,
        test_acc,
        sweep,
        unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_protocol() {
        let g = reg_grid(PROBE_GRID_SIZE, PROBE_REG_RANGE.0, PROBE_REG_RANGE.1);
        assert_eq!(g.len(), 45);
        assert!((g[0] - 1e-6).abs() < 1e-18);
        assert!((g[44] - 1e5).abs() < 1e-6);
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = Problem {
            x: (0..12).map(|i| ((i * 7) as f64 * 0.31).sin()).collect(),
            y: vec![0, 2, 1, 2],
            n: 4,
            d: 3,
            c: 3,
        };
        let theta: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos() * 0.3).collect();
        let mut g = vec![0.0; 12];
        p.eval(&theta, 0.1, &mut g);
        let mut scratch = vec![0.0; 12];
        for i in 0..12 {
            let (mut a, mut b) = (theta.clone(), theta.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (p.eval(&a, 0.1, &mut scratch) - p.eval(&b, 0.1, &mut scratch)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-7, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn solver_reaches_tolerance() {
        let p = Problem {
            x: (0..200).map(|i| ((i * 13) as f64 * 0.17).sin()).collect(),
            y: (0..50).map(|i| i % 3).collect(),
            n: 50,
            d: 4,
            c: 3,
        };
        let mut theta = vec![0.0; 15];
        assert!(lbfgs(&p, 1e-2, &mut theta));
        let mut g = vec![0.0; 15];
        p.eval(&theta, 1e-2, &mut g);
        assert!(dot(&g, &g).sqrt() < PROBE_TOL);
    }
}
