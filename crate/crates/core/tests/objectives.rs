use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star::autodiff::{grad_check, Graph, Tensor};
use star::objectives::{
    combine, cosine_sim, info_nce_equivariant, info_nce_invariant, total_loss, EqDenominator, LossConfig,
};
use star::Error;

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn sim(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Term-by-term NT-Xent with the positive in the denominator.
fn oracle_inv(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    let b = n / 2;
    let mut total = 0.0;
    for i in 0..n {
        let p = (i + b) % n;
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (sim(&z[i], &z[j]) / tau).exp();
            }
        }
        total += -((sim(&z[i], &z[p]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

fn oracle_eq(z: &[Vec<f64>], zh: &[Vec<f64>], tau: f64, use_pred: bool) -> f64 {
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let left = if use_pred { &zh[i] } else { &z[i] };
        let denom: f64 = z
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, zj)| (sim(left, zj) / tau).exp())
            .sum();
        total += -((sim(&z[i], &zh[i]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

fn inv(z: &Tensor<f64>, tau: f64) -> star::Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = info_nce_invariant(&mut g, zv, tau)?;
    Ok(g.value(l).data()[0])
}

fn eq(z: &Tensor<f64>, zh: &Tensor<f64>, tau: f64, denom: EqDenominator) -> star::Result<f64> {
    let mut g = Graph::new();
    let (zv, hv) = (g.constant(z.clone()), g.constant(zh.clone()));
    let l = info_nce_equivariant(&mut g, zv, hv, tau, denom)?;
    Ok(g.value(l).data()[0])
}

fn random(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0))
}

fn hand_placed() -> (Tensor<f64>, Tensor<f64>) {
    let z = Tensor::new(&[4, 2], vec![1.0, 0.2, -0.3, 1.0, 0.8, 0.5, -1.0, 0.6]).unwrap();
    let zh = Tensor::new(&[4, 2], vec![0.9, -0.1, 0.1, 1.2, 0.4, 0.7, -0.6, -0.2]).unwrap();
    (z, zh)
}

#[test]
fn invariant_matches_brute_force() {
    let (z, _) = hand_placed();
    for tau in [0.2, 0.5, 1.0] {
        assert!((inv(&z, tau).unwrap() - oracle_inv(&rows(&z), tau)).abs() < 1e-6);
    }
    let z = random(8, 5, 1);
    assert!((inv(&z, 0.2).unwrap() - oracle_inv(&rows(&z), 0.2)).abs() < 1e-6);
}

#[test]
fn equivariant_matches_brute_force() {
    let (z, zh) = hand_placed();
    for tau in [0.2, 0.7] {
        let got = eq(&z, &zh, tau, EqDenominator::Targets).unwrap();
        assert!((got - oracle_eq(&rows(&z), &rows(&zh), tau, false)).abs() < 1e-6);
        let got = eq(&z, &zh, tau, EqDenominator::Predictions).unwrap();
        assert!((got - oracle_eq(&rows(&z), &rows(&zh), tau, true)).abs() < 1e-6);
    }
}

#[test]
fn identical_embeddings_give_log_of_negatives() {
    for b in [2usize, 3, 8] {
        let z = Tensor::from_fn(&[2 * b, 4], |i| [0.3, -1.0, 2.0, 0.5][i % 4]);
        let want = ((2 * b - 1) as f64).ln();
        assert!((inv(&z, 0.2).unwrap() - want).abs() < 1e-5);
    }
}

#[test]
fn separated_positives_give_near_zero_loss() {
    // Positives coincide; every negative is antipodal.
    let z = Tensor::new(&[4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let l = inv(&z, 0.2).unwrap();
    let closed = -(5f64.exp() / (5f64.exp() + 2.0 * (-5f64).exp())).ln();
    assert!((l - closed).abs() < 1e-9);
    assert!((l - oracle_inv(&rows(&z), 0.2)).abs() < 1e-9);
    assert!(l < 0.01);
}

#[test]
fn perfect_prediction_with_orthogonal_targets() {
    for b in [2usize, 3] {
        let n = 2 * b;
        let z = Tensor::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 });
        let want = -(5f64.exp() / ((n - 1) as f64)).ln();
        let got = eq(&z, &z, 0.2, EqDenominator::Targets).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!((got - oracle_eq(&rows(&z), &rows(&z), 0.2, false)).abs() < 1e-9);
        assert!(
            got < 0.0,
            "positive excluded from the denominator so the loss can go negative"
        );
    }
}

#[test]
fn losses_ignore_a_common_rescaling() {
    let (z, zh) = (random(6, 8, 2), random(6, 8, 3));
    let scale = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| 3.0 * t.data()[i]);
    assert!((inv(&z, 0.2).unwrap() - inv(&scale(&z), 0.2).unwrap()).abs() < 1e-5);
    let a = eq(&z, &zh, 0.2, EqDenominator::Targets).unwrap();
    let b = eq(&scale(&z), &scale(&zh), 0.2, EqDenominator::Targets).unwrap();
    assert!((a - b).abs() < 1e-5);
}

#[test]
fn swapping_view_blocks_is_symmetric() {
    let z = random(10, 6, 4);
    let swapped = Tensor::from_fn(&[10, 6], |k| z.data()[((k / 6 + 5) % 10) * 6 + k % 6]);
    assert!((inv(&z, 0.2).unwrap() - inv(&swapped, 0.2).unwrap()).abs() < 1e-6);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let z = random(4, 6, 10 + seed);
        let zh = random(4, 6, 20 + seed);
        assert!(grad_check(|g, v| info_nce_invariant(g, v, 0.2), &z, 1e-3).unwrap() < 1e-3);
        for denom in [EqDenominator::Targets, EqDenominator::Predictions] {
            let zh_c = zh.clone();
            let err = grad_check(
                |g, v| {
                    let h = g.constant(zh_c.clone());
                    info_nce_equivariant(g, v, h, 0.2, denom)
                },
                &z,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "targets side {denom:?}: {err}");
            let z_c = z.clone();
            let err = grad_check(
                |g, v| {
                    let t = g.constant(z_c.clone());
                    info_nce_equivariant(g, t, v, 0.2, denom)
                },
                &zh,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "prediction side {denom:?}: {err}");
        }
    }
}

#[test]
fn one_image_batches_are_rejected() {
    let z = random(2, 4, 0);
    assert!(matches!(inv(&z, 0.2), Err(Error::InsufficientData(_))));
    assert!(matches!(
        eq(&z, &z, 0.2, EqDenominator::Targets),
        Err(Error::InsufficientData(_))
    ));
    assert!(matches!(inv(&random(5, 4, 0), 0.2), Err(Error::Shape { .. })));
}

#[test]
fn total_loss_weights_the_equivariant_term() {
    assert_eq!(combine(1.0, 0.5, 2.0), 2.0);
    assert_eq!(combine(0.7, 123.0, 0.0), 0.7);
    assert_eq!(combine(0.25, 0.5, 1.0), 0.75);
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::scalar(1.0));
    let b = g.param(Tensor::scalar(0.5));
    let t = total_loss(&mut g, a, b, 2.0).unwrap();
    assert_eq!(g.value(t).data()[0], 2.0);
    assert_eq!(total_loss(&mut g, a, b, 0.0).unwrap(), a);
}

#[test]
fn cosine_edge_cases() {
    assert!((cosine_sim(&[2.0, 3.0], &[2.0, 3.0]).value - 1.0).abs() < 1e-12);
    assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).value, 0.0);
    assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).value, -1.0);
    let c = cosine_sim(&[0.0, 0.0], &[1.0, 0.0]);
    assert!(c.degenerate && c.value == 0.0);
}

#[test]
fn config_defaults() {
    let c = LossConfig::default();
    assert_eq!((c.tau, c.lambda, c.eq_denominator), (0.2, 1.0, EqDenominator::Targets));
    assert!(LossConfig { tau: 0.0, ..c }.validate().is_err());
    assert!(LossConfig { lambda: -0.1, ..c }.validate().is_err());
}
