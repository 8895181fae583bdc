use fire_core::clustering::{kmeans_with_log, ClusterKind, KMeansParams};
use fire_core::exec::Execution;
use proptest::prelude::*;

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 6..60))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lloyd_is_monotone_and_keeps_the_best_restart(vectors in points(), k in 1usize..6, restarts in 1usize..6, seed in any::<u64>()) {
        let params = KMeansParams { k, max_iter: 50, restarts, seed };
        let fit = kmeans_with_log(ClusterKind::UserNeeds, &vectors, &params, Execution::Sequential).unwrap();
        for r in &fit.restarts {
            for w in r.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
            }
        }
        let best = fit.restarts.iter().map(|r| r.final_inertia()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(fit.model.inertia, best);
        prop_assert_eq!(fit.model.k(), k);
        prop_assert!((fit.model.inertia_of(&vectors) - fit.model.inertia).abs() <= 1e-9 * (1.0 + fit.model.inertia));
        let parallel = kmeans_with_log(ClusterKind::UserNeeds, &vectors, &params, Execution::Parallel).unwrap();
        prop_assert_eq!(&parallel.model, &fit.model);
    }

    #[test]
    fn assign_reproduces_converged_assignments(vectors in points(), k in 1usize..5, seed in any::<u64>()) {
        let params = KMeansParams { k, max_iter: 500, restarts: 2, seed };
        let fit = kmeans_with_log(ClusterKind::ItemFeatures, &vectors, &params, Execution::Sequential).unwrap();
        let best = &fit.restarts[fit.best_restart];
        prop_assume!(best.iterations < 500);
        for (v, &a) in vectors.iter().zip(&fit.assignments) {
            prop_assert_eq!(fit.model.assign(v).unwrap(), a);
        }
    }
}
