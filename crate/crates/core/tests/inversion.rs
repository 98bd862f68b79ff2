//! Objective, optimization-loop, consensus and metric properties.

use gradinv::attack::{
    bn_prior, consensus_image, grad_matching_loss, group_consistency_loss, l2_prior, objective, run_inversion,
    tv_prior, AttackConfig, ConsensusMode, GradLoss, Problem,
};
use gradinv::data::{make_batch, Batch, Source, Synthetic};
use gradinv::metrics::fft2d_distance;
use gradinv::registration::{register_translation, shift};
use gradinv::victim::{compute_bundle, GradientBundle};
use gradinv::{finite_difference_gradient, Graph, Model, ModelSpec, Preset, Tensor};
use proptest::prelude::*;

fn victim(seed: u64, k: usize) -> (Model, Batch, GradientBundle) {
    let model = Model::init(&ModelSpec::preset(Preset::Tinier, [1, 16, 16], 10).unwrap(), seed).unwrap();
    let batch = make_batch(Source::Synthetic(Synthetic::default()), k, true, seed + 900).unwrap();
    let bundle = compute_bundle(&model, &batch, true).unwrap();
    (model, batch, bundle)
}

fn image(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(0.0f64..1.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loss_terms_are_non_negative(
        seed in 0u64..1000,
        x in prop::collection::vec(-2.0f64..2.0, 2 * 256),
        anchor in prop::collection::vec(-2.0f64..2.0, 2 * 256),
    ) {
        let (model, batch, bundle) = victim(seed, 2);
        let stats = bundle.bn_batch_stats.clone().unwrap();
        let problem = Problem::new(&model, &bundle.grads, &batch.labels, stats);
        let anchor = Tensor::new(&[2, 1, 16, 16], anchor).unwrap();
        let g = Graph::new();
        let x = g.variable(Tensor::new(&[2, 1, 16, 16], x).unwrap());
        for kind in [GradLoss::L2, GradLoss::L2Squared, GradLoss::Cosine] {
            let cfg = AttackConfig { grad_loss: kind, ..AttackConfig::default() };
            let terms = objective(x, &problem, &cfg, Some(&anchor)).unwrap();
            for (name, v) in terms.named() {
                prop_assert!(v.item() >= 0.0, "{} = {}", name, v.item());
            }
        }
    }

    #[test]
    fn registration_recovers_integer_shifts(
        img in image(vec![1, 1, 12, 12]),
        dy in -2i32..=2,
        dx in -2i32..=2,
    ) {
        let (moved, _) = shift(&img, dy, dx);
        let r = register_translation(&moved, &img, 2).unwrap();
        prop_assert_eq!((r.dy, r.dx), (dy, dx));
    }

    #[test]
    fn fft_distance_is_a_symmetric_translation_invariant_distance(
        a in image(vec![2, 1, 8, 12]),
        b in image(vec![2, 1, 8, 12]),
        dy in 0usize..8,
        dx in 0usize..12,
    ) {
        prop_assert!(fft2d_distance(&a, &a).unwrap().abs() < 1e-12);
        let ab = fft2d_distance(&a, &b).unwrap();
        prop_assert!((ab - fft2d_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        let rolled = Tensor::from_fn(a.shape(), |i| {
            let (plane, y, x) = (i / 96, (i / 12) % 8, i % 12);
            a.data()[plane * 96 + ((y + dy) % 8) * 12 + (x + dx) % 12]
        });
        prop_assert!(fft2d_distance(&rolled, &a).unwrap().abs() < 1e-6);
        prop_assert!((fft2d_distance(&rolled, &b).unwrap() - ab).abs() < 1e-6);
    }
}

#[test]
fn total_objective_gradient_matches_finite_differences() {
    let (model, batch, bundle) = victim(7, 2);
    let stats = bundle.bn_batch_stats.clone().unwrap();
    let problem = Problem::new(&model, &bundle.grads, &batch.labels, stats);
    let anchor = batch.images.map(|v| 1.0 - v);
    let x0 = gradinv::rng::gaussian(batch.images.shape(), &mut gradinv::rng::stream(7, gradinv::rng::Purpose::Harness, 0));
    for kind in [GradLoss::L2, GradLoss::Cosine] {
        // unit weights so every term is visible at finite-difference scale
        let cfg = AttackConfig {
            alpha_grad: 1.0,
            alpha_tv: 1.0,
            alpha_l2: 1.0,
            alpha_bn: 1.0,
            alpha_group: 1.0,
            grad_loss: kind,
            ..AttackConfig::default()
        };
        let g = Graph::new();
        let x = g.variable(x0.clone());
        let total = objective(x, &problem, &cfg, Some(&anchor)).unwrap().total;
        let analytic = g.grad(total, &[x]).unwrap().remove(0);
        let numeric = finite_difference_gradient(
            |t| {
                let g = Graph::new();
                Ok(objective(g.variable(t.clone()), &problem, &cfg, Some(&anchor))?.total.item())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = analytic.max_abs_diff(&numeric) / scale;
        assert!(err < 1e-3, "{kind:?}: {err:e}");
    }
}

#[test]
fn matching_terms_vanish_at_the_truth() {
    let (model, batch, bundle) = victim(11, 3);
    let groups = Problem::new(&model, &bundle.grads, &batch.labels, Vec::new()).groups;
    let g = Graph::new();
    let x = g.variable(batch.images.clone());
    for kind in [GradLoss::L2, GradLoss::L2Squared, GradLoss::Cosine] {
        let (loss, trace) = grad_matching_loss(x, &batch.labels, &model, &bundle.grads, &groups, kind).unwrap();
        assert!(loss.item().abs() < 1e-12, "{kind:?}: {}", loss.item());
        assert!(bn_prior(&trace, bundle.bn_batch_stats.as_ref().unwrap()).unwrap().item() < 1e-12);
    }
    assert!(group_consistency_loss(x, &batch.images).unwrap().item() < 1e-12);
    assert!(tv_prior(x, 1e-8).unwrap().item() > 0.0 && l2_prior(x).unwrap().item() > 0.0);
}

#[test]
fn runs_are_deterministic() {
    let (model, _, bundle) = victim(5, 2);
    for alpha_noise in [0.0, 0.2] {
        let cfg = AttackConfig {
            iterations: 60,
            warmup: 5,
            group_size: 1,
            alpha_noise,
            ..AttackConfig::desk()
        };
        let a = run_inversion(&cfg, &bundle, &model).unwrap();
        let b = run_inversion(&cfg, &bundle, &model).unwrap();
        assert_eq!(a.candidates, b.candidates);
        assert_eq!(a.traces, b.traces);
    }
    // parallel seeds do not depend on scheduling either
    let cfg = AttackConfig {
        iterations: 60,
        warmup: 5,
        consensus_interval: 10,
        ..AttackConfig::desk()
    };
    let a = run_inversion(&cfg, &bundle, &model).unwrap();
    let b = run_inversion(&cfg, &bundle, &model).unwrap();
    assert_eq!(a.consensus, b.consensus);
}

#[test]
fn consensus_regularization_tightens_the_group() {
    for seed in 0..5u64 {
        let (model, _, bundle) = victim(100 + seed, 2);
        let cfg = AttackConfig {
            iterations: 400,
            consensus_interval: 50,
            alpha_group: 1e-3,
            seed,
            ..AttackConfig::desk()
        };
        let result = run_inversion(&cfg, &bundle, &model).unwrap();
        let (t0, start) = result.deviation[0];
        let (t1, end) = *result.deviation.last().unwrap();
        assert_eq!((t0, t1), (100, 400));
        assert!(end <= start, "seed {seed}: deviation {start} -> {end}");
    }
}

#[test]
fn registered_consensus_undoes_small_shifts() {
    let truth = Tensor::from_fn(&[1, 1, 16, 16], |i| {
        let (y, x) = ((i / 16) as f64, (i % 16) as f64);
        (-((y - 7.0).powi(2) + (x - 9.0).powi(2)) / 10.0).exp() + 0.4 * (-((y - 11.0).powi(2) + (x - 4.0).powi(2)) / 6.0).exp()
    });
    let copies: Vec<Tensor> = [(0, 0), (2, -1), (-2, 1)].iter().map(|&(dy, dx)| shift(&truth, dy, dx).0).collect();
    let registered = consensus_image(&copies, ConsensusMode::Registered, 2).unwrap();
    let lazy = consensus_image(&copies, ConsensusMode::Lazy, 2).unwrap();
    let err = |c: &Tensor| c.max_abs_diff(&truth);
    assert!(err(&registered) < 1e-12, "{}", err(&registered));
    assert!(err(&lazy) > 0.1);
}
