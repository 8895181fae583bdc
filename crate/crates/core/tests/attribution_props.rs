mod common;

use fire_core::attribution::{attribute_class, brute_force_shap, tree_shap};
use fire_core::classifier::{predict_margin, Node, Tree, TreeEnsemble};
use fire_core::corpus::SentimentLabel;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_ensemble, random_input};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn tree_shap_equals_the_oracle(seed in any::<u64>(), d in 1usize..=12, rounds in 1usize..=8, depth in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_ensemble(&mut rng, d, d, rounds, depth);
        let x = random_input(&mut rng, d);
        for class in SentimentLabel::ALL {
            let fast = tree_shap(&e, &x, class).unwrap();
            let slow = brute_force_shap(&e, &x, class).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attributions_are_locally_accurate_and_ignore_dummies(
        seed in any::<u64>(),
        used in 1usize..=10,
        extra in 1usize..=4,
        rounds in 1usize..=8,
        depth in 1usize..=5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = used + extra;
        let e = random_ensemble(&mut rng, d, used, rounds, depth);
        let x = random_input(&mut rng, d);
        let margins = predict_margin(&e, &x).unwrap();
        for class in SentimentLabel::ALL {
            let a = attribute_class(&e, "u", "i", &x, class).unwrap();
            prop_assert!((a.reconstructed_margin() - margins[class.index()]).abs() <= 1e-6);
            prop_assert!(a.phi[used..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn exchangeable_features_share_credit(a in -3.0f64..3.0, b in -3.0f64..3.0, left in 1.0f64..50.0, right in 1.0f64..50.0, x0 in 0u8..2, x1 in 0u8..2) {
        // Leaf value depends only on how many of the two features are set,
        // and both features split with the same cover shares.
        let s = left + right;
        let (p, q) = (left / s, right / s);
        let covers = vec![s, s * p, s * p * p, s * p * q, s * q, s * q * p, s * q * q];
        let t = Tree::new(
            vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 4 },
                Node::Split { feature: 1, threshold: 0.5, left: 2, right: 3 },
                Node::Leaf { value: 0.0 },
                Node::Leaf { value: a },
                Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6 },
                Node::Leaf { value: a },
                Node::Leaf { value: a + b },
            ],
            Some(covers),
        ).unwrap();
        let rounds = vec![vec![Tree::leaf(0.0), Tree::leaf(0.0), t]];
        let e = TreeEnsemble::new(rounds, 1.0, [0.0; 3], 2).unwrap();
        let x = [x0 as f64, x1 as f64];
        let phi = tree_shap(&e, &x, SentimentLabel::Positive).unwrap();
        if x0 == x1 {
            prop_assert!((phi[0] - phi[1]).abs() <= 1e-12, "{phi:?}");
        }
    }
}
