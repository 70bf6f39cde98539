// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic (subject, relation, object) facts and their token encoding.
//!
//! Token layout: `BOS`, then subjects, relations, relation paraphrases,
//! objects, and whatever ids remain as filler tokens for random prefixes.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("world needs {needed} token ids but the vocabulary has {vocab}")]
    VocabOverflow { needed: usize, vocab: usize },
    #[error("n_facts {n_facts} exceeds n_subjects × n_relations = {max}")]
    TooManyFacts { n_facts: usize, max: usize },
    #[error("cannot draw {wanted} {what} facts from the world")]
    SplitTooLarge { what: &'static str, wanted: usize },
    #[error("world needs at least one subject, relation and two objects")]
    Degenerate,
    #[error("fact index {0} out of range")]
    BadFact(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub n_facts: usize,
    pub n_edit_candidates: usize,
    pub n_locality: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            n_relations: 8,
            n_objects: 100,
            n_facts: 300,
            n_edit_candidates: 40,
            n_locality: 60,
            vocab_size: 256,
            seed: 0,
        }
    }
}

/// Token id ranges of every symbol class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub bos: u32,
    pub subject_base: u32,
    pub n_subjects: u32,
    pub relation_base: u32,
    pub paraphrase_base: u32,
    pub n_relations: u32,
    pub object_base: u32,
    pub n_objects: u32,
    pub filler_base: u32,
    pub n_fillers: u32,
    pub size: u32,
}

impl Vocab {
    pub fn subject(&self, s: u32) -> u32 {
        self.subject_base + s
    }
    pub fn relation(&self, r: u32) -> u32 {
        self.relation_base + r
    }
    pub fn paraphrase(&self, r: u32) -> u32 {
        self.paraphrase_base + r
    }
    pub fn object(&self, o: u32) -> u32 {
        self.object_base + o
    }
    pub fn filler(&self, f: u32) -> u32 {
        self.filler_base + f
    }
    pub fn is_object(&self, token: u32) -> bool {
        (self.object_base..self.object_base + self.n_objects).contains(&token)
    }
    pub fn object_tokens(&self) -> core::ops::Range<u32> {
        self.object_base..self.object_base + self.n_objects
    }
    pub fn subject_tokens(&self) -> core::ops::Range<u32> {
        self.subject_base..self.subject_base + self.n_subjects
    }
}

/// One functional fact. Fields are symbol indices, not token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    /// Alternate surface symbol for `relation`, same semantics.
    pub relation_paraphrase: u32,
}

/// Indices into [`FactWorld::facts`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    /// Facts supervised on their primary prompt (every fact).
    pub train: Vec<usize>,
    /// Facts eligible for counterfact edits; distinct subjects, paraphrase never trained.
    pub edit_candidates: Vec<usize>,
    /// Facts whose subjects are never edited; used to measure locality.
    pub locality: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub facts: Vec<FactTriple>,
    pub splits: Splits,
}

/// A prompt with its supervised next token and the position of its (single) subject token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub target: u32,
    pub subject_position: usize,
}

/// A counterfact edit: the fact at `fact` should now answer `new_object`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterfact {
    pub fact: usize,
    pub new_object: u32,
}

impl FactWorld {
    pub fn fact(&self, idx: usize) -> Result<&FactTriple, WorldError> {
        self.facts.get(idx).ok_or(WorldError::BadFact(idx))
    }

    /// `[BOS, prefix…, s, r]` predicting the object.
    pub fn prompt_with_prefix(&self, fact: &FactTriple, prefix: &[u32]) -> Prompt {
        let v = &self.vocab;
        let mut tokens = Vec::with_capacity(prefix.len() + 3);
        tokens.push(v.bos);
        tokens.extend_from_slice(prefix);
        tokens.push(v.subject(fact.subject));
        tokens.push(v.relation(fact.relation));
        Prompt {
            tokens,
            target: v.object(fact.object),
            subject_position: 1 + prefix.len(),
        }
    }

    pub fn prompt(&self, fact: &FactTriple) -> Prompt {
        self.prompt_with_prefix(fact, &[])
    }

    /// `[BOS, s, r′]` with the paraphrase relation symbol.
    pub fn paraphrase_prompt(&self, fact: &FactTriple) -> Prompt {
        let v = &self.vocab;
        Prompt {
            tokens: alloc::vec![v.bos, v.subject(fact.subject), v.paraphrase(fact.relation_paraphrase)],
            target: v.object(fact.object),
            subject_position: 1,
        }
    }

    /// Supervised training examples: every primary prompt, plus paraphrase
    /// prompts for facts outside the edit-candidate split.
    pub fn training_examples(&self) -> Vec<Prompt> {
        let held: BTreeSet<usize> = self.splits.edit_candidates.iter().copied().collect();
        let mut out: Vec<Prompt> = self.splits.train.iter().map(|&i| self.prompt(&self.facts[i])).collect();
        out.extend(
            self.splits
                .train
                .iter()
                .filter(|i| !held.contains(i))
                .map(|&i| self.paraphrase_prompt(&self.facts[i])),
        );
        out
    }

    /// Random filler prefixes of length `1..=max_len`, deterministic in `seed`.
    pub fn random_prefixes(&self, count: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
        if self.vocab.n_fillers == 0 || max_len == 0 {
            return alloc::vec![Vec::new(); count];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let len = rng.random_range(1..=max_len);
                (0..len)
                    .map(|_| self.vocab.filler(rng.random_range(0..self.vocab.n_fillers)))
                    .collect()
            })
            .collect()
    }

    /// Picks `t` edit candidates and assigns each a different random object.
    pub fn counterfacts(&self, t: usize, seed: u64) -> Result<Vec<Counterfact>, WorldError> {
        if t > self.splits.edit_candidates.len() {
            return Err(WorldError::SplitTooLarge {
                what: "edit",
                wanted: t,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = self.splits.edit_candidates.clone();
        pool.shuffle(&mut rng);
        Ok(pool
            .into_iter()
            .take(t)
            .map(|fact| {
                let old = self.facts[fact].object;
                let mut new = rng.random_range(0..self.vocab.n_objects - 1);
                if new >= old {
                    new += 1;
                }
                Counterfact { fact, new_object: new }
            })
            .collect())
    }
}

/// Deterministic world for `config.seed`.
pub fn build_world(config: &WorldConfig) -> Result<FactWorld, WorldError> {
    let WorldConfig {
        n_subjects,
        n_relations,
        n_objects,
        n_facts,
        ..
    } = *config;
    if n_subjects == 0 || n_relations == 0 || n_objects < 2 {
        return Err(WorldError::Degenerate);
    }
    let needed = 1 + n_subjects + 2 * n_relations + n_objects;
    if needed > config.vocab_size {
        return Err(WorldError::VocabOverflow {
            needed,
            vocab: config.vocab_size,
        });
    }
    let max = n_subjects * n_relations;
    if n_facts > max {
        return Err(WorldError::TooManyFacts { n_facts, max });
    }
    let vocab = Vocab {
        bos: 0,
        subject_base: 1,
        n_subjects: n_subjects as u32,
        relation_base: (1 + n_subjects) as u32,
        paraphrase_base: (1 + n_subjects + n_relations) as u32,
        n_relations: n_relations as u32,
        object_base: (1 + n_subjects + 2 * n_relations) as u32,
        n_objects: n_objects as u32,
        filler_base: needed as u32,
        n_fillers: (config.vocab_size - needed) as u32,
        size: config.vocab_size as u32,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs: Vec<(u32, u32)> = (0..n_subjects as u32)
        .flat_map(|s| (0..n_relations as u32).map(move |r| (s, r)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(n_facts);
    pairs.sort_unstable();
    let facts: Vec<FactTriple> = pairs
        .into_iter()
        .map(|(subject, relation)| FactTriple {
            subject,
            relation,
            object: rng.random_range(0..n_objects as u32),
            relation_paraphrase: relation,
        })
        .collect();

    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    let mut edit_subjects = BTreeSet::new();
    let mut edit_candidates = Vec::new();
    for &i in &order {
        if edit_candidates.len() == config.n_edit_candidates {
            break;
        }
        if edit_subjects.insert(facts[i].subject) {
            edit_candidates.push(i);
        }
    }
    if edit_candidates.len() < config.n_edit_candidates {
        return Err(WorldError::SplitTooLarge {
            what: "edit-candidate",
            wanted: config.n_edit_candidates,
        });
    }
    let locality: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| !edit_subjects.contains(&facts[i].subject))
        .take(config.n_locality)
        .collect();
    if locality.len() < config.n_locality {
        return Err(WorldError::SplitTooLarge {
            what: "locality",
            wanted: config.n_locality,
        });
    }
    Ok(FactWorld {
        config: config.clone(),
        vocab,
        splits: Splits {
            train: (0..facts.len()).collect(),
            edit_candidates,
            locality,
        },
        facts,
    })
}
