use fire_core::evaluation::{alignment_scores, usr, AlignmentJudgment, Judged};
use proptest::prelude::*;

fn judged(pairs: &[(bool, bool)]) -> Vec<Judged<AlignmentJudgment>> {
    pairs
        .iter()
        .map(|&(n, f)| {
            Judged::Verdict(AlignmentJudgment {
                review_id: "r".into(),
                need_matched: n,
                feature_matched: f,
                need_reason: String::new(),
                feature_reason: String::new(),
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn usr_is_bounded_permutation_invariant_and_halves(texts in prop::collection::vec("[a-c]{1,2}( [a-c]{1,2}){0,2}", 1..30), shift in 0usize..30) {
        let u = usr(&texts).unwrap();
        prop_assert!(u > 0.0 && u <= 1.0);
        let mut rotated = texts.clone();
        rotated.rotate_left(shift % texts.len());
        prop_assert_eq!(usr(&rotated).unwrap(), u);
        let doubled: Vec<String> = texts.iter().chain(&texts).cloned().collect();
        prop_assert_eq!(usr(&doubled).unwrap(), u / 2.0);
    }

    #[test]
    fn alignment_scores_are_hand_counted_means(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40), shift in 0usize..40) {
        let s = alignment_scores(&judged(&pairs)).unwrap();
        let n = pairs.len() as f64;
        let needs = pairs.iter().filter(|p| p.0).count() as f64;
        let feats = pairs.iter().filter(|p| p.1).count() as f64;
        prop_assert_eq!(s.s_u, needs / n);
        prop_assert_eq!(s.s_i, feats / n);
        prop_assert!((0.0..=1.0).contains(&s.s_u) && (0.0..=1.0).contains(&s.s_i));
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift % pairs.len());
        let r = alignment_scores(&judged(&rotated)).unwrap();
        prop_assert_eq!((r.s_u, r.s_i), (s.s_u, s.s_i));
    }
}
