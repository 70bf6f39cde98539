// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit Success, Portability, Locality and Fluency.
//!
//! Accuracies compare the greedy next token with a target and are reported as
//! percentages. Fluency is `(2/3)·H₂ + (4/3)·H₃`, the weighted bigram and
//! trigram entropies (bits) of greedy continuations.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::model::{self, ModelError, ModelParams};
use crate::world::Prompt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metric undefined on an empty {0} set")]
    Empty(&'static str),
    #[error("continuations shorter than 3 tokens")]
    TooShort,
}

fn greedy(params: &ModelParams, prompts: &[Prompt]) -> Result<Vec<u32>, ModelError> {
    let seqs: Vec<&[u32]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
    model::predict_batch(params, &seqs)
}

fn percentage(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Percentage of `predictions` equal to the matching prompt target.
pub fn accuracy_of(predictions: &[u32], prompts: &[Prompt]) -> f64 {
    let hits = predictions.iter().zip(prompts).filter(|(p, q)| **p == q.target).count();
    percentage(hits, prompts.len())
}

/// Percentage of edit prompts whose greedy prediction is the new object
/// (each prompt's `target`).
pub fn edit_success(post: &ModelParams, prompts: &[Prompt]) -> Result<f64, MetricsError> {
    if prompts.is_empty() {
        return Err(MetricsError::Empty("edit prompt"));
    }
    Ok(accuracy_of(&greedy(post, prompts)?, prompts))
}

/// Edit success measured on paraphrase prompts.
pub fn portability(post: &ModelParams, paraphrases: &[Prompt]) -> Result<f64, MetricsError> {
    if paraphrases.is_empty() {
        return Err(MetricsError::Empty("paraphrase"));
    }
    Ok(accuracy_of(&greedy(post, paraphrases)?, paraphrases))
}

/// Percentage of positions where two prediction lists agree.
pub fn agreement(pre: &[u32], post: &[u32]) -> f64 {
    let same = pre.iter().zip(post).filter(|(a, b)| a == b).count();
    percentage(same, pre.len())
}

/// Percentage of holdout prompts whose greedy prediction is unchanged.
pub fn locality(pre: &ModelParams, post: &ModelParams, holdout: &[Prompt]) -> Result<f64, MetricsError> {
    if holdout.is_empty() {
        return Err(MetricsError::Empty("holdout"));
    }
    Ok(agreement(&greedy(pre, holdout)?, &greedy(post, holdout)?))
}

/// Shannon entropy (bits) of the n-gram distribution over `sequences`.
/// N-grams do not cross sequence boundaries.
pub fn ngram_entropy(sequences: &[Vec<u32>], n: usize) -> f64 {
    let mut counts: BTreeMap<&[u32], usize> = BTreeMap::new();
    let mut total = 0usize;
    for s in sequences {
        if n == 0 || s.len() < n {
            continue;
        }
        for w in s.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / t;
            -p * libm::log2(p)
        })
        .sum();
    // Normalizes the -0.0 of a single distinct n-gram.
    if h == 0.0 {
        0.0
    } else {
        h
    }
}

pub fn fluency_of(sequences: &[Vec<u32>]) -> f64 {
    (2.0 / 3.0) * ngram_entropy(sequences, 2) + (4.0 / 3.0) * ngram_entropy(sequences, 3)
}

/// Greedy continuations of `gen_len` tokens, without the prompts.
pub fn continuations(params: &ModelParams, prompts: &[Prompt], gen_len: usize) -> Result<Vec<Vec<u32>>, MetricsError> {
    prompts
        .iter()
        .map(|p| {
            let full = model::generate(params, &p.tokens, gen_len)?;
            Ok(full[p.tokens.len()..].to_vec())
        })
        .collect()
}

pub fn fluency(post: &ModelParams, prompts: &[Prompt], gen_len: usize) -> Result<f64, MetricsError> {
    if gen_len < 3 {
        return Err(MetricsError::TooShort);
    }
    if prompts.is_empty() {
        return Err(MetricsError::Empty("fluency prompt"));
    }
    Ok(fluency_of(&continuations(post, prompts, gen_len)?))
}
