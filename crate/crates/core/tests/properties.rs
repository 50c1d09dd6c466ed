use std::collections::BTreeSet;

use lazyprune::engine::Session;
use lazyprune::pruning::{self, Boundary, ImportanceScores, PruningSchedule};
use lazyprune::tensor::{self, Matrix};
use lazyprune::{generate_random_model, Model, ModelConfig, Policy};
use proptest::prelude::*;

fn tiny_model() -> Model {
    let config = ModelConfig {
        num_layers: 5,
        num_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 258,
        max_position: 256,
        tied_embeddings: true,
    };
    generate_random_model(config, 21).unwrap()
}

fn schedule_strategy(layers: usize) -> impl Strategy<Value = PruningSchedule> {
    proptest::collection::btree_set(1..layers, 0..layers - 1).prop_flat_map(|cuts| {
        let n = cuts.len();
        proptest::collection::vec(1u32..=100, n).prop_map(move |pcts| PruningSchedule {
            boundaries: cuts
                .iter()
                .zip(pcts)
                .map(|(&after_layer, p)| Boundary {
                    after_layer,
                    keep_fraction: p as f64 / 100.0,
                })
                .collect(),
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn keep_count_is_integer_ceiling(pct in 1usize..=100, n in 0usize..5000) {
        let k = pruning::keep_count(pct as f64 / 100.0, n);
        prop_assert_eq!(k, (pct * n).div_ceil(100));
    }

    #[test]
    fn selection_size_and_nesting(
        scores in proptest::collection::vec(0.0f32..1.0, 1..60),
        lo in 1u32..=100,
        hi in 1u32..=100,
        protect_last in any::<bool>(),
    ) {
        let n = scores.len();
        let entries: Vec<(usize, f32)> = scores.iter().copied().enumerate().collect();
        let scores = ImportanceScores::new(entries);
        let protected: BTreeSet<usize> = if protect_last { BTreeSet::from([n - 1]) } else { BTreeSet::new() };
        let candidates = n - protected.len();
        let (lo, hi) = (lo.min(hi) as f64 / 100.0, lo.max(hi) as f64 / 100.0);
        if candidates == 0 && protected.is_empty() {
            return Ok(());
        }
        let small = pruning::select_keep_set(&scores, lo, &protected).unwrap();
        let large = pruning::select_keep_set(&scores, hi, &protected).unwrap();
        prop_assert_eq!(small.len(), pruning::keep_count(lo, candidates) + protected.len());
        prop_assert!(small.as_set().is_subset(large.as_set()));
        prop_assert!(protected.is_subset(small.as_set()));
        // Every kept candidate scores at least as high as every dropped one.
        let kept_min = small.iter().filter(|t| !protected.contains(t)).map(|t| scores.get(t).unwrap()).fold(f32::INFINITY, f32::min);
        let dropped_max = (0..n).filter(|t| !small.contains(*t)).map(|t| scores.get(t).unwrap()).fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn random_keep_set_size(n in 2usize..200, drop_pct in 0u32..100, seed in any::<u64>()) {
        let tokens: Vec<usize> = (0..n).collect();
        let protected = BTreeSet::from([n - 1]);
        let drop = drop_pct as f64 / 100.0;
        let keep = pruning::random_keep_set(&tokens, drop, seed, &protected).unwrap();
        prop_assert_eq!(keep.len(), pruning::keep_count(1.0 - drop, n - 1) + 1);
        prop_assert_eq!(keep, pruning::random_keep_set(&tokens, drop, seed, &protected).unwrap());
    }

    #[test]
    fn schedule_text_round_trips(schedule in schedule_strategy(12)) {
        let text = schedule.to_string();
        if schedule.is_empty() {
            prop_assert!(text.is_empty());
        } else {
            prop_assert_eq!(text.parse::<PruningSchedule>().unwrap(), schedule);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-30.0f32..30.0, 1..40),
    ) {
        let x = Matrix::from_vec(1, vals.len(), vals).unwrap();
        let p = tensor::softmax_rows(&x, None).unwrap();
        let sum: f32 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-5);
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Whatever the schedule, prompt and step count, no (token, layer) pair
    /// is computed twice and the caches stay consistent after every step.
    #[test]
    fn at_most_once_under_random_schedules(
        schedule in schedule_strategy(5),
        prompt in proptest::collection::vec(0u32..256, 2..48),
        steps in 1usize..7,
    ) {
        let model = tiny_model();
        let n = prompt.len();
        let mut session = Session::new(&model, Policy::lazy(schedule)).unwrap();
        let report = session
            .generate_with(&prompt, steps, &[], |s| {
                let v = s.verify();
                assert!(v.is_clean(), "{v:?}");
                Ok(())
            })
            .unwrap();
        prop_assert_eq!(session.ledger().max_count(), 1);
        prop_assert!(report.prompt_compute_events <= n * 5);
        prop_assert!(report.percent_prompt_tokens_computed <= 100.0);
        for token in 0..n {
            let f = session.caches().frontier(token);
            // Every layer below the frontier was computed exactly once.
            for layer in 0..5 {
                prop_assert_eq!(session.ledger().count(token, layer), u32::from(layer < f));
            }
        }
    }
}
