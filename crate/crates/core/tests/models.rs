use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star::autodiff::{Graph, Tensor};
use star::data::AUG_DIM;
use star::models::{Mode, Model, ModelConfig, Task, Variant};
use star::Error;

fn cfg(variant: Variant, n: usize) -> ModelConfig {
    ModelConfig {
        variant,
        n_experts: n,
        ..ModelConfig::default()
    }
}

fn images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 16, 16], |_| rng.gen_range(0.0..1.0))
}

fn reps(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, d], |_| rng.gen_range(-2.0..2.0))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn encoder_shape_and_determinism() {
    let m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let mut x = images(8, 0);
    let row = x.data()[..768].to_vec();
    x.data_mut()[768..1536].copy_from_slice(&row);
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Eval, false);
    let xv = ctx.graph.constant(x.clone());
    let y = m.encode(&mut ctx, xv).unwrap();
    let y2 = m.encode(&mut ctx, xv).unwrap();
    let (yt, y2t) = (ctx.graph.value(y).clone(), ctx.graph.value(y2).clone());
    assert_eq!(yt.shape(), &[8, 64]);
    assert!(yt.is_finite());
    assert_eq!(yt.row(0), yt.row(1));
    assert_eq!(yt, y2t);
}

#[test]
fn train_mode_rejects_single_image() {
    let m = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Train, true);
    let xv = ctx.graph.constant(images(1, 0));
    assert!(matches!(m.encode(&mut ctx, xv), Err(Error::DegenerateBatch(_))));
}

#[test]
fn routing_rows_are_distributions() {
    let m = Model::<f32>::new(cfg(Variant::Mmoe, 4), 2).unwrap();
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Eval, false);
    let y = ctx.graph.constant(reps(1000, 64, 9));
    for task in [Task::Inv, Task::Eq] {
        let s = m.route(&mut ctx, y, task).unwrap();
        let t = ctx.graph.value(s);
        for i in 0..1000 {
            let row = t.row(i);
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn zero_routers_are_uniform() {
    let mut m = Model::<f32>::new(cfg(Variant::Mmoe, 4), 2).unwrap();
    m.zero_routers();
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Eval, false);
    let y = ctx.graph.constant(reps(50, 64, 3));
    let s = m.route(&mut ctx, y, Task::Eq).unwrap();
    assert!(ctx.graph.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
}

#[test]
fn router_bias_shift_is_invisible() {
    let mut m = Model::<f32>::new(cfg(Variant::Mmoe, 4), 5).unwrap();
    let y = reps(20, 64, 4);
    let weights = |m: &Model<f32>| {
        let mut g = Graph::new();
        let mut ctx = m.bind(&mut g, Mode::Eval, false);
        let yv = ctx.graph.constant(y.clone());
        let s = m.route(&mut ctx, yv, Task::Inv).unwrap();
        ctx.graph.value(s).data().to_vec()
    };
    let before = weights(&m);
    m.store
        .get_mut("router.inv.bias")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += 7.5);
    assert!(max_abs_diff(&before, &weights(&m)) < 1e-6);
}

#[test]
fn route_on_other_variants_is_variant_error() {
    for v in [Variant::Separate, Variant::SingleShared] {
        let m = Model::<f32>::new(cfg(v, 4), 0).unwrap();
        let mut g = Graph::new();
        let mut ctx = m.bind(&mut g, Mode::Eval, false);
        let y = ctx.graph.constant(reps(4, 64, 0));
        assert!(matches!(m.route(&mut ctx, y, Task::Inv), Err(Error::Variant(_))));
    }
}

fn expert_and_mixed(m: &Model<f32>, y: &Tensor<f32>, task: Task) -> (Vec<Vec<f32>>, Vec<f32>) {
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Eval, false);
    let yv = ctx.graph.constant(y.clone());
    let outs = m.expert_outputs(&mut ctx, yv).unwrap();
    let z = m.project(&mut ctx, yv, task).unwrap();
    let outs = outs.iter().map(|&o| ctx.graph.value(o).data().to_vec()).collect();
    (outs, ctx.graph.value(z).data().to_vec())
}

#[test]
fn uniform_mixture_is_expert_mean() {
    let mut m = Model::<f32>::new(cfg(Variant::Mmoe, 4), 3).unwrap();
    m.zero_routers();
    let y = reps(16, 64, 1);
    let (outs, z) = expert_and_mixed(&m, &y, Task::Inv);
    let mean: Vec<f32> = (0..z.len())
        .map(|i| outs.iter().map(|o| o[i]).sum::<f32>() / 4.0)
        .collect();
    assert!(max_abs_diff(&z, &mean) < 1e-5);
}

#[test]
fn one_hot_mixture_is_single_expert() {
    let mut m = Model::<f32>::new(cfg(Variant::Mmoe, 4), 3).unwrap();
    m.zero_routers();
    m.store.get_mut("router.eq.bias").unwrap().data_mut()[2] = 60.0;
    let y = reps(16, 64, 1);
    let (outs, z) = expert_and_mixed(&m, &y, Task::Eq);
    assert!(max_abs_diff(&z, &outs[2]) < 1e-5);
}

#[test]
fn single_shared_difference_cancels_shared_expert() {
    let m = Model::<f32>::new(cfg(Variant::SingleShared, 0), 4).unwrap();
    let y = reps(16, 64, 2);
    let (outs, z_inv) = expert_and_mixed(&m, &y, Task::Inv);
    let (_, z_eq) = expert_and_mixed(&m, &y, Task::Eq);
    let lhs: Vec<f32> = z_inv.iter().zip(&z_eq).map(|(a, b)| a - b).collect();
    let rhs: Vec<f32> = outs[0].iter().zip(&outs[1]).map(|(a, b)| a - b).collect();
    assert!(max_abs_diff(&lhs, &rhs) < 1e-5);
    let sum: Vec<f32> = outs[0].iter().zip(&outs[2]).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&z_inv, &sum) < 1e-6);
}

#[test]
fn separate_heads_are_plain_experts() {
    let m = Model::<f32>::new(cfg(Variant::Separate, 0), 4).unwrap();
    let y = reps(8, 64, 2);
    let (outs, z_eq) = expert_and_mixed(&m, &y, Task::Eq);
    assert_eq!(z_eq, outs[1]);
}

#[test]
fn zeroed_predictor_is_residual_identity() {
    let mut m = Model::<f32>::new(ModelConfig::default(), 6).unwrap();
    m.zero_predictor_output();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::new();
        let mut ctx = m.bind(&mut g, mode, false);
        let z0 = ctx.graph.constant(reps(10, 32, 7));
        let a = ctx.graph.constant(reps(10, AUG_DIM, 8));
        let zh = m.predict(&mut ctx, z0, a).unwrap();
        assert_eq!(ctx.graph.value(zh), ctx.graph.value(z0));
    }
}

#[test]
fn predictor_rejects_bad_shapes() {
    let m = Model::<f32>::new(ModelConfig::default(), 6).unwrap();
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Eval, false);
    let z0 = ctx.graph.constant(reps(10, 32, 7));
    let a = ctx.graph.constant(reps(10, 11, 8));
    assert!(matches!(m.predict(&mut ctx, z0, a), Err(Error::Shape { .. })));
}

#[test]
fn original_projection_shares_the_eq_path() {
    let m = Model::<f32>::new(ModelConfig::default(), 7).unwrap();
    let x = images(6, 3);
    let mut g = Graph::new();
    let mut ctx = m.bind(&mut g, Mode::Eval, false);
    let xv = ctx.graph.constant(x);
    let zo = m.project_original(&mut ctx, xv).unwrap();
    let y = m.encode(&mut ctx, xv).unwrap();
    let ze = m.project(&mut ctx, y, Task::Eq).unwrap();
    assert_eq!(ctx.graph.value(zo).shape(), &[6, 32]);
    assert_eq!(ctx.graph.value(zo), ctx.graph.value(ze));
}

#[test]
fn parameter_counts() {
    let (d_y, d_h, d_z) = (64, 128, 32);
    let expert = d_y * d_h + 2 * d_h + d_h * d_h + 2 * d_h + d_h * d_z + d_z;
    let count = |v, n| {
        let m = Model::<f32>::new(cfg(v, n), 0).unwrap();
        (0..m.n_experts())
            .map(|k| m.store.count_with_prefix(&Model::<f32>::expert_prefix(k)))
            .sum::<usize>()
            + m.store.count_with_prefix("router.")
    };
    assert_eq!(count(Variant::Separate, 4), 2 * expert);
    assert_eq!(count(Variant::SingleShared, 4), 3 * expert);
    for n in [2, 4, 8] {
        assert_eq!(count(Variant::Mmoe, n), n * expert + 2 * (d_y * n + n));
    }
}

#[test]
fn cast_round_trip_preserves_f32_values() {
    let m = Model::<f32>::new(ModelConfig::default(), 11).unwrap();
    assert_eq!(m.cast::<f64>().cast::<f32>(), m);
}
