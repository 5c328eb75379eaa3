use proptest::prelude::*;
use star::data::{
    apply_aug, generate_dataset, keyed_rng, param_stats, sample_aug_params, AugConfig, AugParams, DatasetSpec,
    ParamStats, AUG_DIM,
};

fn draws(n: usize, seed: u64) -> Vec<AugParams> {
    let cfg = AugConfig::default();
    (0..n)
        .map(|i| sample_aug_params(&mut keyed_rng(seed, 0, i as u64, 1), &cfg))
        .collect()
}

#[test]
fn stage_rates_match_probabilities() {
    let ps = draws(10_000, 11);
    let rate = |f: &dyn Fn(&AugParams) -> bool| ps.iter().filter(|a| f(a)).count() as f64 / ps.len() as f64;
    assert!((rate(&|a| a.flip) - 0.5).abs() < 0.02);
    assert!((rate(&|a| a.grayscale) - 0.2).abs() < 0.02);
    assert!((rate(&|a| a.blur_applied) - 0.5).abs() < 0.02);
    let jitter_on = rate(&|a| a.jitter != [1.0, 1.0, 1.0, 0.0]);
    assert!((jitter_on - 0.8).abs() < 0.02, "{jitter_on}");
}

#[test]
fn unapplied_jitter_is_neutral() {
    let cfg = AugConfig {
        jitter_p: 0.0,
        ..AugConfig::default()
    };
    for i in 0..200 {
        let a = sample_aug_params(&mut keyed_rng(0, 0, i, 0), &cfg);
        assert_eq!(a.jitter, [1.0, 1.0, 1.0, 0.0]);
    }
}

#[test]
fn param_stats_expectations() {
    let stats = param_stats(&AugConfig::default(), 10_000, 5).unwrap();
    assert!((stats.mean[4] - 0.5).abs() < 0.02, "flip mean {}", stats.mean[4]);
    // Uniform on [0.6, 1.4] when applied, 1 otherwise: expectation 1.
    assert!((stats.mean[5] - 1.0).abs() < 0.01, "brightness mean {}", stats.mean[5]);
    assert!(stats.std.iter().all(|&s| s >= 1e-6));
    assert_eq!(stats, param_stats(&AugConfig::default(), 10_000, 5).unwrap());
}

#[test]
fn normalized_params_are_standardized() {
    let stats = param_stats(&AugConfig::default(), 10_000, 5).unwrap();
    let z: Vec<[f32; AUG_DIM]> = draws(10_000, 99).iter().map(|a| stats.normalize(a)).collect();
    for d in 0..AUG_DIM {
        let n = z.len() as f64;
        let mean = z.iter().map(|v| v[d] as f64).sum::<f64>() / n;
        let std = (z.iter().map(|v| (v[d] as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05, "dim {d}: mean {mean}");
        assert!((0.95..=1.05).contains(&std), "dim {d}: std {std}");
    }
}

#[test]
fn normalize_fixed_points() {
    let stats = param_stats(&AugConfig::default(), 2000, 0).unwrap();
    let at_mean: [f32; AUG_DIM] = std::array::from_fn(|i| stats.mean[i] as f32);
    assert!(stats.normalize_array(&at_mean).iter().all(|v| v.abs() < 1e-5));
    let plus_one: [f32; AUG_DIM] = std::array::from_fn(|i| (stats.mean[i] + stats.std[i]) as f32);
    assert!(stats.normalize_array(&plus_one).iter().all(|v| (v - 1.0).abs() < 1e-4));
}

#[test]
fn every_sampled_param_satisfies_invariants() {
    let cfg = AugConfig::default();
    for i in 0..100_000u64 {
        let a = sample_aug_params(&mut keyed_rng(42, i / 1000, i % 1000, i % 2), &cfg);
        a.validate(16, 16).unwrap_or_else(|e| panic!("sample {i}: {e}"));
        if a.jitter[..3].iter().all(|&v| v == 1.0) {
            assert_eq!(a.jitter[3], 0.0);
        }
    }
}

#[test]
fn augmentation_is_deterministic_and_bounded() {
    let ds = generate_dataset(&DatasetSpec {
        n_images: 30,
        ..DatasetSpec::default()
    })
    .unwrap();
    let cfg = AugConfig::default();
    for (i, x) in ds.images.iter().enumerate() {
        let a = sample_aug_params(&mut keyed_rng(1, 0, i as u64, 0), &cfg);
        let y1 = apply_aug(x, &a).unwrap();
        let y2 = apply_aug(x, &a).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((y1.height, y1.width), (16, 16));
    }
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(seed in any::<u64>(), idx in 0u64..1000) {
        let stats = ParamStats::from_samples(&draws(200, 3).iter().map(|a| a.to_array()).collect::<Vec<_>>()).unwrap();
        let a = sample_aug_params(&mut keyed_rng(seed, 0, idx, 0), &AugConfig::default()).to_array();
        let back = stats.denormalize(&stats.normalize_array(&a));
        for (x, y) in a.iter().zip(&back) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn identity_aug_exact_on_random_images(px in proptest::collection::vec(0.0f32..=1.0, 3 * 12 * 12)) {
        let x = star::data::Image::new(12, 12, px).unwrap();
        prop_assert_eq!(apply_aug(&x, &AugParams::identity(12, 12)).unwrap(), x);
    }
}
