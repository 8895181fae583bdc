mod common;

use fire_core::classifier::{
    argmax_label, predict, predict_margin, predict_proba, train_with_log, Dataset, Hyperparams, TreeEnsemble,
};
use fire_core::corpus::SentimentLabel;
use fire_core::exec::Execution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_ensemble, random_input};

fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(0.0..6.0)).collect()).collect();
    let mut labels: Vec<SentimentLabel> = rows
        .iter()
        .map(|r| SentimentLabel::from_index(((r[0] + rng.gen_range(0.0..3.0)) / 3.0) as usize % 3).unwrap())
        .collect();
    labels[0] = SentimentLabel::Negative;
    labels[1] = SentimentLabel::Positive;
    Dataset::from_rows(&rows, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn training_loss_never_increases(seed in any::<u64>(), eta in 0.01f64..=0.5, depth in 1usize..=4, use_weight: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(20..120);
        let d = rng.gen_range(1..6);
        let data = random_data(&mut rng, n, d);
        let params = Hyperparams {
            n_estimators: 20,
            eta,
            max_depth: depth,
            min_child_weight: 0.5,
            colsample_bytree: 1.0,
            gamma: 0.0,
            use_weight,
            lambda: 1.0,
        };
        let trained = train_with_log(&data, &params, seed, Execution::Sequential).unwrap();
        for w in trained.train_loss.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn dropping_the_last_round_removes_exactly_its_contribution(seed in any::<u64>(), rounds in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_ensemble(&mut rng, 4, 4, rounds, 3);
        let shorter: TreeEnsemble = e.truncated(rounds - 1);
        let x = random_input(&mut rng, 4);
        let full = predict_margin(&e, &x).unwrap();
        let cut = predict_margin(&shorter, &x).unwrap();
        let last = &e.rounds()[rounds - 1];
        for c in 0..3 {
            let step = e.eta() * last[c].predict(&x);
            prop_assert!((full[c] - cut[c] - step).abs() <= 1e-12);
        }
    }

    #[test]
    fn predict_agrees_with_probabilities(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_ensemble(&mut rng, 5, 5, 4, 3);
        let x = random_input(&mut rng, 5);
        let proba = predict_proba(&e, &x).unwrap();
        let margins = predict_margin(&e, &x).unwrap();
        let label = predict(&e, &x).unwrap();
        prop_assert_eq!(label, argmax_label(&margins));
        prop_assert!((proba.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = proba.iter().copied().fold(f64::MIN, f64::max);
        let ties = proba.iter().filter(|&&p| p == top).count();
        if ties == 1 {
            prop_assert_eq!(proba[label.index()], top);
        }
    }
}
