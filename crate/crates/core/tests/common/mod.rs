// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::sync::OnceLock;

use kedit_core::model::{ModelConfig, ModelParams};
use kedit_core::train::{self, TrainConfig};
use kedit_core::world::{build_world, FactWorld, WorldConfig};

pub struct Fixture {
    pub world: FactWorld,
    pub params: ModelParams,
    pub recall: f64,
}

pub fn world_config() -> WorldConfig {
    WorldConfig {
        n_subjects: 30,
        n_relations: 4,
        n_objects: 20,
        n_facts: 80,
        n_edit_candidates: 12,
        n_locality: 20,
        vocab_size: 96,
        seed: 7,
    }
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 32,
        n_heads: 4,
        d_mlp: 64,
        vocab_size: 96,
        max_seq_len: 12,
        tied_embeddings: false,
        seed: 1,
    }
}

/// A small world and a model trained on it, built once per test binary.
pub fn trained() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = build_world(&world_config()).unwrap();
        let mut params = ModelParams::init(&model_config()).unwrap();
        let cfg = TrainConfig {
            steps: 1200,
            batch_size: 32,
            lr: 3e-3,
            eval_every: 1200,
            ..TrainConfig::default()
        };
        let log = train::train(&mut params, &world, &cfg).unwrap();
        Fixture {
            world,
            params,
            recall: log.final_recall,
        }
    })
}
