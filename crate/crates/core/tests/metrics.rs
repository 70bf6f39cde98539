// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use kedit_core::metrics::{continuations, edit_success, fluency, fluency_of, locality, portability, MetricsError};
use kedit_core::model::predict_next;
use kedit_core::world::Prompt;
use proptest::prelude::*;

fn ten_prompts() -> Vec<Prompt> {
    let f = common::trained();
    f.world.splits.train[..10]
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut p = f.world.prompt(&f.world.facts[k]);
            // Every third prompt asks for something else.
            if i % 3 == 0 {
                p.target = f.world.vocab.object(0) + (i as u32 % 5);
            }
            p
        })
        .collect()
}

#[test]
fn edit_success_matches_brute_force() {
    let f = common::trained();
    let prompts = ten_prompts();
    let hits = prompts
        .iter()
        .filter(|p| predict_next(&f.params, &p.tokens).unwrap() == p.target)
        .count();
    assert_eq!(edit_success(&f.params, &prompts).unwrap(), hits as f64 * 10.0);
    assert_eq!(portability(&f.params, &prompts).unwrap(), hits as f64 * 10.0);
}

#[test]
fn locality_matches_brute_force() {
    let f = common::trained();
    let prompts = ten_prompts();
    let mut post = f.params.clone();
    for x in post.layers[1].w_out.data_mut().iter_mut().step_by(3) {
        *x *= -2.0;
    }
    let same = prompts
        .iter()
        .filter(|p| predict_next(&f.params, &p.tokens).unwrap() == predict_next(&post, &p.tokens).unwrap())
        .count();
    assert_eq!(locality(&f.params, &post, &prompts).unwrap(), same as f64 * 10.0);
    assert_eq!(locality(&f.params, &f.params, &prompts).unwrap(), 100.0);
}

#[test]
fn fluency_reads_greedy_continuations() {
    let f = common::trained();
    let prompts = ten_prompts();
    let cont = continuations(&f.params, &prompts, 6).unwrap();
    assert!(cont.iter().all(|c| c.len() == 6));
    assert_eq!(fluency(&f.params, &prompts, 6).unwrap(), fluency_of(&cont));
}

#[test]
fn undefined_metrics_are_errors() {
    let f = common::trained();
    assert!(matches!(edit_success(&f.params, &[]), Err(MetricsError::Empty(_))));
    assert!(matches!(
        locality(&f.params, &f.params, &[]),
        Err(MetricsError::Empty(_))
    ));
    assert!(matches!(
        fluency(&f.params, &ten_prompts(), 2),
        Err(MetricsError::TooShort)
    ));
    assert!(matches!(fluency(&f.params, &[], 5), Err(MetricsError::Empty(_))));
}

fn corpus() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..6, 0..12), 1..8)
}

proptest! {
    #[test]
    fn fluency_ignores_sequence_order(mut seqs in corpus()) {
        let a = fluency_of(&seqs);
        seqs.reverse();
        prop_assert!((a - fluency_of(&seqs)).abs() <= 1e-12);
    }

    #[test]
    fn fluency_is_bounded(seqs in corpus()) {
        let f = fluency_of(&seqs);
        let trigrams: usize = seqs.iter().map(|s| s.len().saturating_sub(2)).sum();
        let bigrams: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
        let bound = (2.0 / 3.0) * (bigrams.max(1) as f64).log2() + (4.0 / 3.0) * (trigrams.max(1) as f64).log2();
        prop_assert!(f >= 0.0);
        prop_assert!(f <= bound + 1e-9);
    }

    #[test]
    fn relabeling_tokens_keeps_fluency(seqs in corpus(), shift in 1u32..100) {
        let moved: Vec<Vec<u32>> = seqs.iter().map(|s| s.iter().map(|t| t + shift).collect()).collect();
        prop_assert!((fluency_of(&seqs) - fluency_of(&moved)).abs() <= 1e-12);
    }
}
