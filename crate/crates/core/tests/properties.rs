use std::collections::BTreeSet;
use std::sync::Arc;

use marich_core::attack::{run_attack, stage_sizes, AttackConfig, SamplerKind};
use marich_core::clustering::kmeans;
use marich_core::data::{split_indices, synth_blobs, PoolView, QueryPool};
use marich_core::evaluation::{agreement, kl_fidelity, roc_curve, trapezoid};
use marich_core::mathcore::{
    cross_entropy, entropy, kl_divergence, softmax, ProbVector, RealMatrix,
};
use marich_core::models::{
    init_model, load_model, save_model, Activation, DpSgdConfig, ModelSpec, SgdConfig,
};
use marich_core::oracle::{laplace_perturbed_label, DpConfig, LabelOracle, TargetHandle};
use marich_core::samplers::{
    entropy_gradient_sampling, entropy_sampling, kcenter_sampling, least_confidence_sampling,
    loss_sampling, margin_sampling, random_sampling, LossScoring,
};
use proptest::prelude::*;

fn simplex(k: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all zero", |raw| {
        let s: f64 = raw.iter().sum();
        (s > 1e-9).then(|| ProbVector::new(raw.iter().map(|v| v / s).collect()).unwrap())
    })
}

fn positive_pair() -> impl Strategy<Value = (ProbVector, ProbVector)> {
    (2usize..=10)
        .prop_flat_map(|k| (simplex(k), simplex(k)))
        .prop_filter("q needs full support", |(_, q)| {
            q.as_slice().iter().all(|&v| v > 0.0)
        })
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = RealMatrix> {
    rows.prop_flat_map(move |n| prop::collection::vec(-3.0f64..3.0, n * cols))
        .prop_map(move |v| RealMatrix::new(v.len() / cols, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn entropy_is_bounded(p in (2usize..=10).prop_flat_map(simplex)) {
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (p.k() as f64).ln() + 1e-12);
    }

    #[test]
    fn cross_entropy_decomposes((p, q) in positive_pair()) {
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((cross_entropy(&p, &q).unwrap() - entropy(&p) - kl).abs() <= 1e-9);
        if entropy(&q) <= entropy(&p) {
            prop_assert!(kl <= cross_entropy(&p, &q).unwrap() - entropy(&q) + 1e-9);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0f64..700.0, 2..12)) {
        let p = softmax(&logits).unwrap();
        let s: f64 = p.as_slice().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn forward_is_a_distribution(seed in any::<u64>(), x in prop::collection::vec(-50.0f64..50.0, 4)) {
        let model = init_model(&ModelSpec::mlp(4, 3, vec![6, 5], Activation::Relu), seed).unwrap();
        let p = model.forward(&x).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn kmeans_inertia_never_rises(points in matrix(4..=40, 3), k in 1usize..=4, seed in any::<u64>()) {
        let r = kmeans(&points, k, 100, 1e-9, seed).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{:?}", r.inertia_history);
        }
        prop_assert!(r.centers.is_finite());
        prop_assert_eq!(kmeans(&points, k, 100, 1e-9, seed).unwrap(), r);
    }

    #[test]
    fn split_is_a_partition(n in 1usize..200, a in 0.05f64..0.95, seed in any::<u64>()) {
        let parts = split_indices(n, &[a, 1.0 - a], seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, &[a, 1.0 - a], seed).unwrap(), parts);
    }

    #[test]
    fn samplers_skip_spent_indices(
        points in matrix(6..=30, 3),
        spent_mask in prop::collection::vec(any::<bool>(), 30),
        budget in 1usize..8,
        seed in any::<u64>(),
    ) {
        let n = points.rows();
        let unspent: Vec<usize> = (0..n).filter(|&i| !spent_mask[i]).collect();
        prop_assume!(!unspent.is_empty());
        let model = init_model(&ModelSpec::mlp(3, 3, vec![4], Activation::Tanh), seed).unwrap();
        let view = PoolView::new(&points, unspent.clone());
        let history = points.select_rows(&[0]);
        let picks = [
            entropy_sampling(&model, &view, budget).unwrap(),
            least_confidence_sampling(&model, &view, budget).unwrap(),
            margin_sampling(&model, &view, budget).unwrap(),
            random_sampling(&view, budget, seed).unwrap(),
            entropy_gradient_sampling(&model, &view, budget, 3, seed, false).unwrap(),
            entropy_gradient_sampling(&model, &view, budget, 3, seed, true).unwrap(),
            loss_sampling(&model, &view, &history, &[1], budget, 3, LossScoring::MinDistance).unwrap(),
            kcenter_sampling(&model, &view, &history, budget).unwrap(),
        ];
        let allowed: BTreeSet<usize> = unspent.iter().copied().collect();
        for s in &picks {
            let set: BTreeSet<usize> = s.indices.iter().copied().collect();
            prop_assert_eq!(set.len(), s.indices.len(), "{} returned duplicates", s.strategy);
            prop_assert!(set.is_subset(&allowed), "{} returned a spent index", s.strategy);
            prop_assert_eq!(s.len(), budget.min(unspent.len()), "{}", s.strategy);
        }
        prop_assert_eq!(&random_sampling(&view, budget, seed).unwrap(), &picks[3]);
        prop_assert_eq!(&entropy_gradient_sampling(&model, &view, budget, 3, seed, false).unwrap(), &picks[4]);
    }

    #[test]
    fn cascade_sizes_shrink(budget in 1.0f64..2000.0, g1 in 0.05f64..=1.0, g2 in 0.05f64..=1.0) {
        let s = stage_sizes(budget, g1, g2);
        prop_assert!(s.entropy >= s.gradient && s.gradient >= s.loss && s.loss >= 1);
        prop_assert_eq!(s.entropy, (budget.floor() as usize).max(1));
    }

    #[test]
    fn laplace_labels_are_pure(p in (2usize..=6).prop_flat_map(simplex), eps in 0.01f64..10.0, seed in any::<u64>(), draw in any::<u64>()) {
        let dp = DpConfig::laplace(eps, seed);
        let a = laplace_perturbed_label(&p, &dp, draw);
        prop_assert!(a < p.k());
        prop_assert_eq!(a, laplace_perturbed_label(&p, &dp, draw));
    }

    #[test]
    fn roc_is_monotone(members in prop::collection::vec(-5.0f64..5.0, 1..30), nonmembers in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let roc = roc_curve(&members, &nonmembers);
        prop_assert_eq!(roc[0], (0.0, 0.0));
        prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        let auc = trapezoid(&roc);
        prop_assert!((0.0..=1.0).contains(&auc));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_files_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 0..3)) {
        let spec = if hidden.is_empty() {
            ModelSpec::softmax_regression(5, 3)
        } else {
            ModelSpec::mlp(5, 3, hidden, Activation::Tanh)
        };
        let model = init_model(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        prop_assert_eq!(back.params_flat(), model.params_flat());
        prop_assert_eq!(back.spec(), model.spec());
    }

    #[test]
    fn training_is_deterministic(seed in 0u64..1000) {
        let ds = synth_blobs(3, 4, 20, 3.0, 1.0, seed).unwrap();
        let cfg = SgdConfig { epochs: 3, lr: 0.1, batch_size: 8, seed };
        let spec = ModelSpec::mlp(4, 3, vec![5], Activation::Relu);
        let a = init_model(&spec, seed).unwrap().train(&ds.features, ds.labels().unwrap(), &cfg).unwrap();
        let b = init_model(&spec, seed).unwrap().train(&ds.features, ds.labels().unwrap(), &cfg).unwrap();
        prop_assert_eq!(a.params_flat(), b.params_flat());
    }

    #[test]
    fn noiseless_unclipped_dpsgd_is_sgd(seed in 0u64..1000) {
        let ds = synth_blobs(3, 4, 20, 3.0, 1.0, seed).unwrap();
        let cfg = SgdConfig { epochs: 3, lr: 0.1, batch_size: 8, seed };
        let init = init_model(&ModelSpec::softmax_regression(4, 3), seed).unwrap();
        let plain = init.train(&ds.features, ds.labels().unwrap(), &cfg).unwrap();
        let dp = DpSgdConfig { clip_norm: 1e12, noise_multiplier: 0.0 };
        let private = init.dpsgd_train(&ds.features, ds.labels().unwrap(), &cfg, &dp).unwrap();
        for (a, b) in plain.params_flat().iter().zip(private.params_flat()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn samplers_spend_equal_budgets(seed in 0u64..50) {
        let ds = synth_blobs(3, 4, 80, 3.0, 1.0, seed).unwrap();
        let target = init_model(&ModelSpec::softmax_regression(4, 3), seed).unwrap();
        let cfg = AttackConfig { n0: 20, b0: 15.0, rounds: 3, epochs: 2, lr: 0.1, alpha: 1.1, seed, ..AttackConfig::default() };
        let mut counts = Vec::new();
        for sampler in SamplerKind::ALL {
            let oracle = TargetHandle::in_process(target.clone());
            let mut pool = QueryPool::new(&ds);
            let cfg = AttackConfig { sampler, ..cfg.clone() };
            let (_, trace) = run_attack(&oracle, &mut pool, target.spec(), &cfg, None).unwrap();
            prop_assert_eq!(trace.total_queries as u64, oracle.queries_used());
            prop_assert_eq!(pool.num_spent(), trace.total_queries);
            let mut prev = trace.initial.queries;
            for r in &trace.rounds {
                prop_assert_eq!(r.cumulative_queries, prev + r.queries);
                prev = r.cumulative_queries;
            }
            counts.push(trace.rounds.iter().map(|r| r.queries).collect::<Vec<_>>());
        }
        prop_assert!(counts.windows(2).all(|w| w[0] == w[1]), "{:?}", counts);
    }
}

#[test]
fn ledger_is_exact_under_concurrency() {
    let model = init_model(&ModelSpec::softmax_regression(3, 2), 1).unwrap();
    let oracle = Arc::new(TargetHandle::in_process(model));
    let batch = RealMatrix::new(3, 3, vec![0.1; 9]).unwrap();
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (o, b) = (Arc::clone(&oracle), batch.clone());
            std::thread::spawn(move || {
                for _ in 0..50 {
                    o.query_labels(&b).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(oracle.queries_used(), 16 * 50 * 3);
}

#[test]
fn cap_is_never_exceeded_under_concurrency() {
    let model = init_model(&ModelSpec::softmax_regression(3, 2), 1).unwrap();
    let oracle = Arc::new(TargetHandle::in_process(model).with_cap(100));
    let batch = RealMatrix::new(7, 3, vec![0.1; 21]).unwrap();
    let answered: usize = (0..8)
        .map(|_| {
            let (o, b) = (Arc::clone(&oracle), batch.clone());
            std::thread::spawn(move || (0..10).filter(|_| o.query_labels(&b).is_ok()).count())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .sum();
    assert_eq!(answered, 14);
    assert_eq!(oracle.queries_used(), 98);
}

#[test]
fn exact_copy_has_zero_kl_and_full_agreement() {
    let ds = synth_blobs(4, 5, 30, 3.0, 1.0, 2).unwrap();
    let model = init_model(&ModelSpec::mlp(5, 4, vec![6], Activation::Relu), 3).unwrap();
    let copy = model.with_params_flat(&model.params_flat()).unwrap();
    assert_eq!(kl_fidelity(&model, &copy, &ds.features).unwrap(), 0.0);
    assert_eq!(agreement(&model, &copy, &ds.features).unwrap(), 100.0);
}
