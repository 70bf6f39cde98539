// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numerics::Matrix;

const INIT_STD: f32 = 0.02;

/// Layer-norm gain and bias, each stored as a `1 × d` row.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Matrix<f32>,
    pub bias: Matrix<f32>,
}

impl NormParams {
    fn new(d: usize) -> Self {
        let mut gain = Matrix::zeros(1, d);
        gain.data_mut().fill(1.0);
        Self {
            gain,
            bias: Matrix::zeros(1, d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Matrix::zeros(1, d),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: NormParams,
    /// Query projection, all heads stacked: `d_model × d_model`.
    pub w_q: Matrix<f32>,
    pub w_k: Matrix<f32>,
    pub w_v: Matrix<f32>,
    /// Attention output projection `W_o`: `d_model × d_model`.
    pub w_o: Matrix<f32>,
    pub mlp_norm: NormParams,
    /// `W_in`: `d_mlp × d_model`.
    pub w_in: Matrix<f32>,
    pub b_in: Matrix<f32>,
    /// `W_out`: `d_model × d_mlp`.
    pub w_out: Matrix<f32>,
}

/// All weights of the toy transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab × d_model`.
    pub tok_emb: Matrix<f32>,
    /// `max_seq_len × d_model`.
    pub pos_emb: Matrix<f32>,
    /// Output embedding `W_E` as `vocab × d_model`; `None` when tied to `tok_emb`.
    pub unembed: Option<Matrix<f32>>,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
}

impl ModelParams {
    /// Gaussian initialization; residual-writing projections are scaled by `1/sqrt(2·n_layers)`.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let resid_std = INIT_STD / libm::sqrtf(2.0 * config.n_layers as f32);
        let mut gaussian = |rows: usize, cols: usize, std: f32| {
            let normal = Normal::new(0.0f32, std).expect("positive std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape")
        };
        let tok_emb = gaussian(config.vocab_size, d, INIT_STD);
        let pos_emb = gaussian(config.max_seq_len, d, INIT_STD);
        let unembed = (!config.tied_embeddings).then(|| gaussian(config.vocab_size, d, INIT_STD));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: NormParams::new(d),
                w_q: gaussian(d, d, INIT_STD),
                w_k: gaussian(d, d, INIT_STD),
                w_v: gaussian(d, d, INIT_STD),
                w_o: gaussian(d, d, resid_std),
                mlp_norm: NormParams::new(d),
                w_in: gaussian(config.d_mlp, d, INIT_STD),
                b_in: Matrix::zeros(1, config.d_mlp),
                w_out: gaussian(d, config.d_mlp, resid_std),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            unembed,
            layers,
            final_norm: NormParams::new(d),
        })
    }

    /// Same structure as `config` describes, every tensor zero.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            unembed: (!config.tied_embeddings).then(|| Matrix::zeros(config.vocab_size, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    attn_norm: NormParams::zeros(d),
                    w_q: Matrix::zeros(d, d),
                    w_k: Matrix::zeros(d, d),
                    w_v: Matrix::zeros(d, d),
                    w_o: Matrix::zeros(d, d),
                    mlp_norm: NormParams::zeros(d),
                    w_in: Matrix::zeros(config.d_mlp, d),
                    b_in: Matrix::zeros(1, config.d_mlp),
                    w_out: Matrix::zeros(d, config.d_mlp),
                })
                .collect(),
            final_norm: NormParams::zeros(d),
        }
    }

    /// Output embedding used for logits.
    pub fn output_embedding(&self) -> &Matrix<f32> {
        self.unembed.as_ref().unwrap_or(&self.tok_emb)
    }

    /// Every tensor with its archive name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<f32>)> {
        let mut out: Vec<(String, &Matrix<f32>)> = Vec::new();
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        if let Some(u) = &self.unembed {
            out.push(("unembed".into(), u));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm.gain"), &layer.attn_norm.gain));
            out.push((format!("layers.{l}.attn_norm.bias"), &layer.attn_norm.bias));
            out.push((format!("layers.{l}.attn.w_q"), &layer.w_q));
            out.push((format!("layers.{l}.attn.w_k"), &layer.w_k));
            out.push((format!("layers.{l}.attn.w_v"), &layer.w_v));
            out.push((format!("layers.{l}.attn.w_o"), &layer.w_o));
            out.push((format!("layers.{l}.mlp_norm.gain"), &layer.mlp_norm.gain));
            out.push((format!("layers.{l}.mlp_norm.bias"), &layer.mlp_norm.bias));
            out.push((format!("layers.{l}.mlp.w_in"), &layer.w_in));
            out.push((format!("layers.{l}.mlp.b_in"), &layer.b_in));
            out.push((format!("layers.{l}.mlp.w_out"), &layer.w_out));
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<f32>> {
        let mut out: Vec<&mut Matrix<f32>> = Vec::new();
        out.push(&mut self.tok_emb);
        out.push(&mut self.pos_emb);
        if let Some(u) = &mut self.unembed {
            out.push(u);
        }
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm.gain);
            out.push(&mut layer.attn_norm.bias);
            out.push(&mut layer.w_q);
            out.push(&mut layer.w_k);
            out.push(&mut layer.w_v);
            out.push(&mut layer.w_o);
            out.push(&mut layer.mlp_norm.gain);
            out.push(&mut layer.mlp_norm.bias);
            out.push(&mut layer.w_in);
            out.push(&mut layer.b_in);
            out.push(&mut layer.w_out);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out
    }

    /// Expected `(rows, cols)` of every named tensor for `config`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        Self::zeros(config)
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data().len()).sum()
    }
}
