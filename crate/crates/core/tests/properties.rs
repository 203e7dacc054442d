mod common;

use aes_core::corpus::{builtin_prompt_table, denormalize_score, normalize_score, ScoreRange};
use aes_core::evaluation::{qwk, RatingPair};
use aes_core::scoring::score_essay;
use aes_core::tokenizer::{build_vocabulary, tokenize_ids};
use proptest::prelude::*;

fn ratings() -> impl Strategy<Value = (ScoreRange, Vec<i32>, Vec<i32>)> {
    (-3i32..4, 1i32..8)
        .prop_flat_map(|(min, span)| {
            let max = min + span;
            (
                Just(ScoreRange::new(min, max).unwrap()),
                proptest::collection::vec((min..=max, min..=max), 1..40),
            )
        })
        .prop_map(|(r, pairs)| {
            let (h, m) = pairs.into_iter().unzip();
            (r, h, m)
        })
}

fn kappa(h: Vec<i32>, m: Vec<i32>, r: ScoreRange) -> f64 {
    qwk(&RatingPair::new(h, m, r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn qwk_is_bounded_and_symmetric((r, h, m) in ratings()) {
        let k = kappa(h.clone(), m.clone(), r);
        prop_assert!(k.is_finite());
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        prop_assert!((k - kappa(m, h, r)).abs() < 1e-12);
    }

    #[test]
    fn qwk_ignores_item_order((r, h, m) in ratings(), rot in 0usize..40) {
        let k = kappa(h.clone(), m.clone(), r);
        let s = rot % h.len();
        let (mut h2, mut m2) = (h, m);
        h2.rotate_left(s);
        m2.rotate_left(s);
        prop_assert!((k - kappa(h2, m2, r)).abs() < 1e-12);
    }

    #[test]
    fn qwk_is_shift_invariant((r, h, m) in ratings(), shift in -5i32..5) {
        let k = kappa(h.clone(), m.clone(), r);
        let moved = ScoreRange::new(r.min() + shift, r.max() + shift).unwrap();
        let h2 = h.iter().map(|v| v + shift).collect();
        let m2 = m.iter().map(|v| v + shift).collect();
        prop_assert!((k - kappa(h2, m2, moved)).abs() < 1e-12);
    }

    #[test]
    fn identical_ratings_score_one((r, h, _) in ratings()) {
        prop_assert!((kappa(h.clone(), h, r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_round_trips(min in -5i32..5, span in 1i32..20, off in 0i32..20) {
        let r = ScoreRange::new(min, min + span).unwrap();
        let v = min + off % (span + 1);
        let x = normalize_score(v, r).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(denormalize_score(x, r), v);
    }

    #[test]
    fn denormalize_stays_in_range(x in -2.0f64..3.0, min in -5i32..5, span in 1i32..20) {
        let r = ScoreRange::new(min, min + span).unwrap();
        prop_assert!(r.contains(denormalize_score(x, r)));
    }

    #[test]
    fn vocabulary_respects_its_bounds(
        texts in proptest::collection::vec("[a-e]{1,6}( [a-e]{1,6}){0,8}", 1..8),
        max_words in 1usize..20,
        probe in "[a-z .,!]{0,40}",
    ) {
        let vocab = build_vocabulary(&texts, max_words, 1).unwrap();
        prop_assert!(vocab.word_count() <= max_words);
        // four special tokens plus at most 1.5 x max_words pieces
        prop_assert!(vocab.len() <= 4 + max_words * 3 / 2);
        for id in tokenize_ids(&probe, &vocab) {
            prop_assert!((id as usize) < vocab.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_stay_on_the_rubric(text in "[A-Za-z]{1,9}( [A-Za-z]{1,9}[.!?]?){0,30}", prompt in 1u32..=8) {
        let table = builtin_prompt_table();
        let model = common::small_model(&table);
        let spec = table.get(prompt).unwrap();
        let report = score_essay(&text, spec, &model).unwrap();
        prop_assert!(spec.overall_range.contains(report.overall_rubric));
        prop_assert!(report.overall_normalized > 0.0 && report.overall_normalized < 1.0);
        prop_assert_eq!(report.traits.len(), spec.trait_count());
        for t in &spec.traits {
            let s = &report.traits[&t.name];
            prop_assert!(t.range.contains(s.rubric));
            prop_assert!(s.normalized > 0.0 && s.normalized < 1.0);
        }
    }
}
