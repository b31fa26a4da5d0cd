use fedsampler::data::apportion;
use fedsampler::metrics::phi_ratio;
use fedsampler::model::{sgd_step, ClientConstants, Example, GradVector, ModelSpec, ParamVector};
use fedsampler::rng::{stream, Purpose};
use fedsampler::sampling::{
    cap_inclusion, cluster::kmeans_1d, floor_probabilities, probs_cluster_is, probs_data_ratio,
    probs_delta, probs_fedis, probs_practical_update, probs_uniform, sample_with_replacement,
    sample_without_replacement, ClientStats, DeltaSamplerConfig, Replacement, SamplingProbabilities,
};
use proptest::prelude::*;

fn on_simplex(p: &SamplingProbabilities) -> bool {
    let s: f64 = p.as_slice().iter().sum();
    p.as_slice().iter().all(|&v| v >= 0.0 && v.is_finite()) && (s - 1.0).abs() <= 1e-12
}

fn fd_grad(model: &ModelSpec, x: &ParamVector, batch: &[Example], c: Option<ClientConstants>) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|k| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[k] += h;
            down[k] -= h;
            (model.loss(&up, batch, c).unwrap() - model.loss(&down, batch, c).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8)
}

fn signed_away_from_zero() -> impl Strategy<Value = f64> {
    (0.5f64..3.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
}

fn stats_strategy(max: usize) -> impl Strategy<Value = Vec<ClientStats>> {
    prop::collection::vec((1e-3f64..1e3, 0.0f64..1e2, 0.0f64..1e2), 1..max).prop_map(|v| {
        v.into_iter()
            .map(|(n, z, s)| ClientStats {
                grad_sum_norm: n,
                diversity: z,
                local_var: s,
                last_round: None,
            })
            .collect()
    })
}

fn probs_strategy(max: usize) -> impl Strategy<Value = SamplingProbabilities> {
    prop::collection::vec(1e-4f64..1.0, 1..max).prop_map(|v| SamplingProbabilities::from_scores(&v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn regression_grad_matches_finite_differences(
        x in prop::collection::vec(signed_away_from_zero(), 1..4),
        ys in prop::collection::vec(-2.0f64..6.0, 1..6),
        a in 2.0f64..12.0,
        b in 0.5f64..2.0,
    ) {
        let model = ModelSpec::Regression { dim: x.len() };
        let batch: Vec<Example> = ys.into_iter().map(Example::regression).collect();
        let c = Some(ClientConstants { a, b });
        let x = ParamVector(x);
        let g = model.grad(&x, &batch, c).unwrap();
        prop_assert!(rel(&g, &fd_grad(&model, &x, &batch, c)) <= 1e-5);
    }

    #[test]
    fn logistic_grad_matches_finite_differences(
        features in 1usize..5,
        classes in 2usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = stream(seed, 0, 0, Purpose::Check);
        let model = ModelSpec::Logistic { features, classes };
        let x = ParamVector((0..model.param_len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let batch: Vec<Example> = (0..rng.random_range(1..8))
            .map(|_| Example::labelled((0..features).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0..classes)))
            .collect();
        let g = model.grad(&x, &batch, None).unwrap();
        prop_assert!(rel(&g, &fd_grad(&model, &x, &batch, None)) <= 1e-5);
    }

    #[test]
    fn loss_ignores_batch_order(
        ys in prop::collection::vec(-2.0f64..6.0, 1..10),
        x in signed_away_from_zero(),
        rotate in 0usize..10,
    ) {
        let model = ModelSpec::Regression { dim: 1 };
        let c = Some(ClientConstants { a: 10.0, b: 1.0 });
        let batch: Vec<Example> = ys.iter().copied().map(Example::regression).collect();
        let mut shuffled = batch.clone();
        shuffled.rotate_left(rotate % batch.len());
        shuffled.reverse();
        let x = ParamVector(vec![x]);
        let l1 = model.loss(&x, &batch, c).unwrap();
        let l2 = model.loss(&x, &shuffled, c).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
    }

    #[test]
    fn sgd_steps_compose(
        x in prop::collection::vec(-10.0f64..10.0, 1..6),
        seed in any::<u64>(),
        lr in 1e-4f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = stream(seed, 0, 0, Purpose::Check);
        let g1: Vec<f64> = x.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let g2: Vec<f64> = x.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = ParamVector(x.clone());
        let twice = sgd_step(&sgd_step(&p, &GradVector(g1.clone()), lr).unwrap(), &GradVector(g2.clone()), lr).unwrap();
        for k in 0..x.len() {
            let once = x[k] - lr * (g1[k] + g2[k]);
            prop_assert!((twice[k] - once).abs() <= 1e-12 * (1.0 + once.abs()));
        }
    }

    #[test]
    fn allocators_stay_on_simplex(stats in stats_strategy(40), a1 in 0.0f64..2.0, a2 in 0.01f64..2.0) {
        prop_assert!(on_simplex(&probs_fedis(&stats).probs));
        let cfg = DeltaSamplerConfig::new(a1, a2).unwrap();
        prop_assert!(on_simplex(&probs_delta(&stats, &cfg).probs));
        prop_assert!(on_simplex(&probs_uniform(stats.len())));
        let w: Vec<f64> = stats.iter().map(|s| s.grad_sum_norm).collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / total).collect();
        prop_assert!(on_simplex(&probs_data_ratio(&w).unwrap()));
    }

    #[test]
    fn cluster_marginals_on_simplex(stats in stats_strategy(30), c in 1usize..4, seed in any::<u64>()) {
        let m = stats.len();
        prop_assume!(c <= m);
        let budget = c.max(m / 2).min(m);
        let mut rng = stream(seed, 0, 0, Purpose::Check);
        let a = probs_cluster_is(&stats, c, budget, &mut rng).unwrap();
        prop_assert_eq!(a.budget(), budget);
        prop_assert!(a.budgets.iter().all(|&b| b >= 1));
        let mut ids: Vec<usize> = a.members.concat();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..m).collect::<Vec<_>>());
        prop_assert!(on_simplex(&a.effective(m)));
    }

    #[test]
    fn fedis_and_delta_scale_invariant(stats in stats_strategy(20), lambda in 1e-3f64..1e3) {
        let scaled: Vec<ClientStats> = stats
            .iter()
            .map(|s| ClientStats {
                grad_sum_norm: s.grad_sum_norm * lambda,
                diversity: s.diversity * lambda,
                local_var: s.local_var * lambda * lambda,
                last_round: None,
            })
            .collect();
        let cfg = DeltaSamplerConfig::default();
        for (a, b) in [
            (probs_fedis(&stats).probs, probs_fedis(&scaled).probs),
            (probs_delta(&stats, &cfg).probs, probs_delta(&scaled, &cfg).probs),
        ] {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn phi_at_least_one(c in prop::collection::vec(1e-6f64..1e6, 1..60)) {
        prop_assert!(phi_ratio(&c).unwrap() >= 1.0 - 1e-12);
    }

    #[test]
    fn phi_is_one_for_equal_scores(v in 1e-6f64..1e6, m in 1usize..60) {
        prop_assert!((phi_ratio(&vec![v; m]).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cap_inclusion_bounds(p in probs_strategy(30), frac in 0.0f64..1.0) {
        let m = p.len();
        let n = 1 + ((m - 1) as f64 * frac) as usize;
        let q = cap_inclusion(&p, n).unwrap();
        prop_assert!(on_simplex(&q));
        prop_assert!(q.as_slice().iter().all(|&v| n as f64 * v <= 1.0 + 1e-12));
        // clamping preserves the order of the entries
        for i in 0..m {
            for j in 0..m {
                if p[i] < p[j] {
                    prop_assert!(q[i] <= q[j] + 1e-15);
                }
            }
        }
        if p.as_slice().iter().all(|&v| n as f64 * v <= 1.0) {
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn floor_keeps_simplex(mut raw in prop::collection::vec(0.0f64..1.0, 2..40), zeros in 0usize..5) {
        for v in raw.iter_mut().take(zeros) {
            *v = 0.0;
        }
        prop_assume!(raw.iter().any(|&v| v > 0.0));
        let p = SamplingProbabilities::from_scores(&raw).unwrap();
        let f = floor_probabilities(&p);
        prop_assert!(on_simplex(&f));
        prop_assert!(f.as_slice().iter().all(|&v| v >= 1e-8 * (1.0 - 1e-9)));
    }

    #[test]
    fn practical_update_chain(seed in any::<u64>(), m in 2usize..25) {
        use rand::Rng;
        let mut rng = stream(seed, 0, 0, Purpose::Check);
        let mut p = probs_uniform(m);
        for _ in 0..50 {
            let n = rng.random_range(1..=m);
            let cohort = rand::seq::index::sample(&mut rng, m, n).into_vec();
            let scores: Vec<f64> = cohort.iter().map(|_| rng.random_range(0.0..100.0)).collect();
            let before = p.clone();
            p = probs_practical_update(&p, &cohort, &scores).unwrap().probs;
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.as_slice().iter().all(|&v| v >= 0.0));
            for j in (0..m).filter(|j| !cohort.contains(j)) {
                prop_assert_eq!(p[j], before[j]);
            }
        }
    }

    #[test]
    fn apportion_conserves_total(shares in prop::collection::vec(0.0f64..10.0, 1..30), total in 0usize..5000) {
        prop_assume!(shares.iter().sum::<f64>() > 0.0);
        let out = apportion(&shares, total);
        prop_assert_eq!(out.iter().sum::<usize>(), total);
        let s: f64 = shares.iter().sum();
        for (o, sh) in out.iter().zip(&shares) {
            prop_assert!((*o as f64 - sh / s * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn samplers_return_n_draws(p in probs_strategy(25), frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = p.len();
        let n = 1 + ((m - 1) as f64 * frac) as usize;
        let w = vec![1.0 / m as f64; m];
        let mut rng = stream(seed, 0, 0, Purpose::Check);
        let with = sample_with_replacement(&p, &w, n, &mut rng).unwrap();
        prop_assert_eq!(with.len(), n);
        let capped = cap_inclusion(&p, n).unwrap();
        let without = sample_without_replacement(&capped, &w, n, &mut rng).unwrap();
        prop_assert_eq!(without.unique_clients().len(), n);
        for (s, q) in [(with, &p), (without, &capped)] {
            for (&i, &wt) in s.cohort.iter().zip(&s.weights) {
                prop_assert!(wt.is_finite() && wt > 0.0);
                prop_assert!((wt - w[i] / (n as f64 * q[i])).abs() <= 1e-12 * wt);
            }
        }
    }
}

proptest! {
    #[test]
    fn kmeans_assigns_to_a_nearest_center(values in prop::collection::vec(0.0f64..100.0, 1..40), k in 1usize..5, seed in any::<u64>()) {
        prop_assume!(k <= values.len());
        let (centers, assignment) = kmeans_1d(&values, k, &mut stream(seed, 0, 0, Purpose::Check));
        prop_assert_eq!(centers.len(), k);
        for (v, &c) in values.iter().zip(&assignment) {
            let best = centers.iter().map(|m| (v - m).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!((v - centers[c]).abs() <= best + 1e-9);
        }
    }
}

#[test]
fn replacement_modes_parse() {
    assert_eq!("with".parse::<Replacement>().unwrap(), Replacement::With);
    assert_eq!("without".parse::<Replacement>().unwrap(), Replacement::Without);
    assert!("sometimes".parse::<Replacement>().is_err());
}
