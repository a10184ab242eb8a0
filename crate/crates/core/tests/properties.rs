mod common;

use std::collections::HashSet;

use chanfuse::cem::select_elites;
use chanfuse::dirichlet::{fit_mle, DirichletParams, ALPHA_MIN};
use chanfuse::fusion::{merge_user, project_to_bounded_simplex, quotas_from_weights};
use chanfuse::ingest::pad_channels;
use chanfuse::metrics::{evaluate_objective, jaccard_matrix, rbo, Metric};
use chanfuse::policy::{infer_weights, AlphaGenerator, PolicyShape, UserState};
use chanfuse::rng::{stream, Domain};
use chanfuse::bayesopt::expected_improvement;
use chanfuse::{GroundTruth, ItemId, WeightVector, Weights};
use common::random_dataset;
use proptest::prelude::*;

fn raw_weights(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k)
}

fn simplex(k: usize) -> impl Strategy<Value = WeightVector> {
    raw_weights(k).prop_map(|w| WeightVector::normalized(&w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quotas_sum_to_l(w in (1usize..8).prop_flat_map(simplex), l in 1usize..200) {
        let caps = vec![l; w.len()];
        let q = quotas_from_weights(&w, l, &caps).unwrap();
        prop_assert_eq!(q.iter().sum::<usize>(), l);
    }

    #[test]
    fn merge_fills_l_when_enough_items(seed in any::<u64>(), k in 1usize..5, l in 1usize..25) {
        let mut rng = stream(seed, Domain::Test, 0);
        let ds = random_dataset(&mut rng, 4, k, 40, 0, 15);
        let w = WeightVector::uniform(k);
        for u in 0..ds.n_users() {
            let distinct: HashSet<ItemId> = ds.channels.iter().flat_map(|c| c.list(u).iter().copied()).collect();
            let m = merge_user(&ds, u, &w, l).unwrap();
            let unique: HashSet<ItemId> = m.items.iter().copied().collect();
            prop_assert_eq!(unique.len(), m.items.len());
            prop_assert_eq!(m.items.len(), l.min(distinct.len()));
        }
    }

    #[test]
    fn merge_ignores_rescaling(seed in any::<u64>(), raw in raw_weights(3), scale in 0.1f64..50.0, l in 1usize..20) {
        let mut rng = stream(seed, Domain::Test, 0);
        let ds = random_dataset(&mut rng, 3, 3, 40, 5, 15);
        let a = WeightVector::normalized(&raw).unwrap();
        let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
        let b = WeightVector::normalized(&scaled).unwrap();
        for u in 0..3 {
            prop_assert_eq!(merge_user(&ds, u, &a, l).unwrap().items, merge_user(&ds, u, &b, l).unwrap().items);
        }
    }

    #[test]
    fn merge_set_ignores_channel_order(seed in any::<u64>(), raw in raw_weights(3), l in 1usize..20) {
        let mut rng = stream(seed, Domain::Test, 0);
        let ds = random_dataset(&mut rng, 3, 3, 40, 5, 15);
        let perm = [2usize, 0, 1];
        let mut permuted = ds.clone();
        permuted.channels = perm.iter().map(|&k| ds.channels[k].clone()).collect();
        let w = WeightVector::normalized(&raw).unwrap();
        let pw = WeightVector::normalized(&perm.iter().map(|&k| raw[k]).collect::<Vec<_>>()).unwrap();
        for u in 0..3 {
            let a: HashSet<ItemId> = merge_user(&ds, u, &w, l).unwrap().items.into_iter().collect();
            let b: HashSet<ItemId> = merge_user(&permuted, u, &pw, l).unwrap().items.into_iter().collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn projection_is_idempotent(raw in prop::collection::vec(0.0f64..1.0, 2..7), lo in 0.0f64..0.1, span in 0.2f64..1.0) {
        let k = raw.len() as f64;
        let hi = (lo + span).min(1.0);
        prop_assume!(k * lo <= 1.0 && k * hi >= 1.0);
        let p = project_to_bounded_simplex(&raw, lo, hi).unwrap();
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.as_slice().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        let again = project_to_bounded_simplex(p.as_slice(), lo, hi).unwrap();
        for (a, b) in p.as_slice().iter().zip(again.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn jaccard_is_symmetric_with_unit_diagonal(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = stream(seed, Domain::Test, 0);
        let ds = random_dataset(&mut rng, 6, k, 30, 1, 12);
        let j = jaccard_matrix(&ds);
        for a in 0..k {
            prop_assert_eq!(j[a][a], 1.0);
            for b in 0..k {
                prop_assert_eq!(j[a][b], j[b][a]);
                prop_assert!((0.0..=1.0).contains(&j[a][b]));
            }
        }
    }

    #[test]
    fn rbo_is_bounded_and_rewards_agreement(seed in any::<u64>(), depth in 1usize..30, p in 0.5f64..0.99) {
        let mut rng = stream(seed, Domain::Test, 0);
        use rand::seq::SliceRandom;
        let mut a: Vec<u32> = (0..60).collect();
        a.shuffle(&mut rng);
        let mut b: Vec<u32> = (0..60).collect();
        b.shuffle(&mut rng);
        let cap = 1.0 - p.powi(depth as i32);
        let mut last = -1.0;
        for agree in 0..=depth {
            let mut mixed: Vec<u32> = a[..agree].to_vec();
            mixed.extend(b.iter().copied().filter(|x| !a[..agree].contains(x)));
            let r = rbo(&a, &mixed, p, depth).unwrap();
            prop_assert!(r >= -1e-15 && r <= cap + 1e-12);
            prop_assert!(r >= last - 1e-12, "agreement {} gave {} after {}", agree, r, last);
            last = r;
        }
    }

    #[test]
    fn truth_edits_move_recall_the_right_way(seed in any::<u64>(), l in 1usize..12) {
        let mut rng = stream(seed, Domain::Test, 0);
        let ds = random_dataset(&mut rng, 1, 2, 40, 5, 12);
        let w = WeightVector::uniform(2);
        let base = evaluate_objective(&ds, Weights::Global(&w), l, Metric::Recall).unwrap();
        let merged = merge_user(&ds, 0, &w, l).unwrap();
        let truth = ds.truth.set(0).to_vec();

        let irrelevant = (0..40).find(|i| !merged.items.contains(i) && !truth.contains(i)).unwrap();
        let mut more = ds.clone();
        more.truth = GroundTruth::new(vec![[truth.clone(), vec![irrelevant]].concat()]);
        prop_assert!(evaluate_objective(&more, Weights::Global(&w), l, Metric::Recall).unwrap() <= base);

        if let Some(&hit) = merged.items.iter().find(|i| !truth.contains(i)) {
            let mut more = ds.clone();
            more.truth = GroundTruth::new(vec![[truth.clone(), vec![hit]].concat()]);
            prop_assert!(evaluate_objective(&more, Weights::Global(&w), l, Metric::Recall).unwrap() >= base);
        }
    }

    #[test]
    fn dirichlet_samples_lie_on_the_simplex(alpha in prop::collection::vec(0.001f64..50.0, 2..8), seed in any::<u64>()) {
        let params = DirichletParams::new(alpha).unwrap();
        let mut rng = stream(seed, Domain::Test, 0);
        let draws: Vec<WeightVector> = (0..20).map(|_| params.sample(&mut rng)).collect();
        for w in &draws {
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.as_slice().iter().all(|x| *x >= 0.0));
        }
        let fit = fit_mle(&draws).unwrap();
        prop_assert!(fit.params.as_slice().iter().all(|a| *a >= ALPHA_MIN));
    }

    #[test]
    fn elites_match_sorted_order_statistic(scores in prop::collection::vec(0u8..20, 1..80), q in 0.01f64..1.0) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 4.0).collect();
        let n = scores.len();
        let qe = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let want_gamma = sorted[n - qe];
        let (gamma, elites) = select_elites(&scores, q);
        prop_assert_eq!(gamma, want_gamma);
        let want: Vec<usize> = (0..n).filter(|&i| scores[i] >= want_gamma).collect();
        prop_assert_eq!(elites, want);
    }

    #[test]
    fn expected_improvement_is_non_negative(mu in -3.0f64..3.0, sigma in 0.0f64..3.0, best in -3.0f64..3.0) {
        prop_assert!(expected_improvement(mu, sigma, best) >= 0.0);
        if mu <= best {
            prop_assert!(expected_improvement(mu, 1e-12, best) < 1e-10);
        }
    }

    #[test]
    fn policy_alpha_stays_in_range(seed in any::<u64>(), scale in 0.01f64..5.0, recall in prop::collection::vec(0.0f64..1.0, 1..6)) {
        let shape = PolicyShape { dim: 4, hidden: 5, delta_max: 10.0, eps: 1e-6 };
        let g = AlphaGenerator::init(shape, scale, seed).unwrap();
        let mut rng = stream(seed, Domain::Test, 0);
        use rand::Rng;
        let mut v = || (0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let state = UserState {
            user: 0,
            u_vec: v(),
            channel_vecs: recall.iter().map(|_| v()).collect(),
            recall: recall.clone(),
        };
        for a in g.forward_alpha(&state).unwrap() {
            prop_assert!((1e-6..=10.0 + 1e-6).contains(&a));
        }
    }

    #[test]
    fn padding_is_idempotent(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = stream(seed, Domain::Test, 0);
        let ds = random_dataset(&mut rng, 5, k, 40, 1, 12);
        let fallback: Vec<ItemId> = (0..40).collect();
        let once = pad_channels(&ds, &fallback).unwrap();
        let twice = pad_channels(&once, &fallback).unwrap();
        prop_assert_eq!(&once, &twice);
        let depth = once.max_depth();
        for c in &once.channels {
            for u in 0..once.n_users() {
                let list = c.list(u);
                prop_assert_eq!(list.len(), depth);
                prop_assert_eq!(list.iter().collect::<HashSet<_>>().len(), depth);
            }
        }
    }
}

#[test]
fn inferred_weights_lie_on_the_simplex() {
    use chanfuse::synth::{generate_benchmark, SyntheticSpec};
    use chanfuse::policy::build_states;
    let mut spec = SyntheticSpec::two_segment(3);
    spec.n_users = 60;
    spec.n_items = 400;
    let ds = generate_benchmark(&spec).unwrap();
    let states = build_states(&ds, 10).unwrap();
    for scale in [0.1, 1.0, 5.0] {
        let shape = PolicyShape { dim: spec.dim, hidden: 16, delta_max: 10.0, eps: 1e-6 };
        let g = AlphaGenerator::init(shape, scale, 1).unwrap();
        let pw = infer_weights(&g, &ds, &states).unwrap();
        assert_eq!(pw.per_user.len(), 60);
        for w in pw.per_user.values() {
            assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
