// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with parallel pre-norm blocks.
//!
//! Each block reads the previous residual `h^{l-1}` through two layer norms and
//! adds both module outputs back: `h^l = h^{l-1} + a^l + m^l`, where
//! `a^l = W_o · ATTN(γ(h^{l-1}))` and `m^l = W_out · σ(W_in γ(h^{l-1}) + b_in)`.
//! Every intermediate site can be captured or overwritten by a [`PatchSet`].

mod engine;
mod kernels;
mod params;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use engine::BackwardResult;
pub(crate) use engine::{backward, run, Cache, LogitRows, RunOptions};
pub use params::{LayerParams, ModelParams, NormParams};

use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 256,
            max_seq_len: 16,
            tied_embeddings: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len,
        ];
        if counts.contains(&0) {
            return Err(ModelError::InvalidConfig("all counts must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig("d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the vectors stored at `site`.
    pub fn site_width(&self, site: Site) -> usize {
        match site {
            Site::MlpKey => self.d_mlp,
            _ => self.d_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("token id {token} outside vocabulary of {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("patch targets nonexistent site {site:?} at layer {layer}, position {position}")]
    InvalidPatch { layer: usize, position: usize, site: Site },
    #[error("patch vector for {site:?} has length {got}, expected {expected}")]
    PatchShape { site: Site, got: usize, expected: usize },
    #[error("duplicate patch at layer {layer}, position {position}, site {site:?}")]
    DuplicatePatch { layer: usize, position: usize, site: Site },
    #[error("embedding noise at position {position} is invalid")]
    InvalidNoise { position: usize },
}

/// A capture/patch location inside one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Block output `h^l`.
    Hidden,
    /// Attention module output `a^l`.
    AttnOut,
    /// MLP module output `m^l`.
    MlpOut,
    /// `σ(W_in γ(h^{l-1}) + b_in)`, the key read by `W_out`.
    MlpKey,
    /// Concatenated head outputs before `W_o`, the key read by `W_o`.
    AttnKey,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Hidden, Site::AttnOut, Site::MlpOut, Site::MlpKey, Site::AttnKey];

    pub fn name(self) -> &'static str {
        match self {
            Site::Hidden => "hidden",
            Site::AttnOut => "attn_out",
            Site::MlpOut => "mlp_out",
            Site::MlpKey => "mlp_key",
            Site::AttnKey => "attn_key",
        }
    }

    pub fn from_name(name: &str) -> Option<Site> {
        Site::ALL.into_iter().find(|s| s.name() == name)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of sites to capture during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SiteSet(u8);

impl SiteSet {
    pub const NONE: SiteSet = SiteSet(0);
    pub const ALL: SiteSet = SiteSet(0b1_1111);

    pub fn of(sites: &[Site]) -> Self {
        SiteSet(sites.iter().fold(0, |acc, s| acc | s.bit()))
    }

    pub fn contains(self, site: Site) -> bool {
        self.0 & site.bit() != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub layer: usize,
    pub position: usize,
    pub site: Site,
    pub value: Vec<f32>,
}

/// Activation overrides applied during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(layer: usize, position: usize, site: Site, value: Vec<f32>) -> Self {
        Self {
            patches: vec![Patch {
                layer,
                position,
                site,
                value,
            }],
        }
    }

    /// Adds a patch; rejects a second patch on the same `(layer, position, site)`.
    pub fn insert(&mut self, layer: usize, position: usize, site: Site, value: Vec<f32>) -> Result<(), ModelError> {
        if self
            .patches
            .iter()
            .any(|p| p.layer == layer && p.position == position && p.site == site)
        {
            return Err(ModelError::DuplicatePatch { layer, position, site });
        }
        self.patches.push(Patch {
            layer,
            position,
            site,
            value,
        });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Patch> {
        self.patches.iter()
    }

    /// Builds a patch set that reinstates every captured activation in `trace`.
    pub fn from_trace(trace: &ActivationTrace) -> Self {
        let mut set = PatchSet::new();
        for site in Site::ALL {
            for layer in 0..trace.n_layers {
                for position in 0..trace.n_positions {
                    if let Some(v) = trace.get(site, layer, position) {
                        set.patches.push(Patch {
                            layer,
                            position,
                            site,
                            value: v.to_vec(),
                        });
                    }
                }
            }
        }
        set
    }

    pub(crate) fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<(), ModelError> {
        for (i, p) in self.patches.iter().enumerate() {
            if p.layer >= config.n_layers || p.position >= seq_len {
                return Err(ModelError::InvalidPatch {
                    layer: p.layer,
                    position: p.position,
                    site: p.site,
                });
            }
            let expected = config.site_width(p.site);
            if p.value.len() != expected {
                return Err(ModelError::PatchShape {
                    site: p.site,
                    got: p.value.len(),
                    expected,
                });
            }
            if self.patches[..i]
                .iter()
                .any(|q| q.layer == p.layer && q.position == p.position && q.site == p.site)
            {
                return Err(ModelError::DuplicatePatch {
                    layer: p.layer,
                    position: p.position,
                    site: p.site,
                });
            }
        }
        Ok(())
    }
}

/// Additive noise on token embeddings, one vector per listed position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingNoise {
    pub entries: Vec<(usize, Vec<f32>)>,
}

/// Captured activations of one forward pass, indexed by `(site, layer, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub n_positions: usize,
    /// Input to layer 0 (token + position embedding + noise), one row per position.
    pub embed: Matrix<f32>,
    sites: [Option<Vec<Matrix<f32>>>; 5],
}

impl ActivationTrace {
    /// The stored vector, if that site was captured.
    pub fn get(&self, site: Site, layer: usize, position: usize) -> Option<&[f32]> {
        let per_layer = self.sites[site as usize].as_ref()?;
        let m = per_layer.get(layer)?;
        (position < m.rows()).then(|| m.row(position))
    }

    /// All positions of one `(site, layer)` as a `positions × width` matrix.
    pub fn layer(&self, site: Site, layer: usize) -> Option<&Matrix<f32>> {
        self.sites[site as usize].as_ref()?.get(layer)
    }

    /// Largest violation of `h^l = h^{l-1} + a^l + m^l` over all layers and positions.
    ///
    /// Requires hidden, attn_out and mlp_out to have been captured.
    pub fn residual_identity_error(&self) -> Option<f32> {
        let mut worst = 0.0f32;
        for l in 0..self.n_layers {
            for p in 0..self.n_positions {
                let prev = if l == 0 {
                    self.embed.row(p)
                } else {
                    self.get(Site::Hidden, l - 1, p)?
                };
                let h = self.get(Site::Hidden, l, p)?;
                let a = self.get(Site::AttnOut, l, p)?;
                let m = self.get(Site::MlpOut, l, p)?;
                for i in 0..h.len() {
                    worst = worst.max((h[i] - (prev[i] + a[i] + m[i])).abs());
                }
            }
        }
        Some(worst)
    }
}

/// Output of [`forward`]: one row per input position.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix<f32>,
    pub probs: Matrix<f32>,
    pub trace: ActivationTrace,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }

    pub fn last_probs(&self) -> &[f32] {
        self.probs.row(self.probs.rows() - 1)
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(ModelError::InvalidToken {
            token: t,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Runs one sequence through the model.
///
/// Patches replace the computed value of their site before any downstream use.
/// Noise is added to the token embeddings at the listed positions before layer 0.
pub fn forward(
    params: &ModelParams,
    tokens: &[u32],
    capture: SiteSet,
    patches: &PatchSet,
    noise: Option<&EmbeddingNoise>,
) -> Result<ForwardOutput, ModelError> {
    let config = &params.config;
    check_tokens(config, tokens)?;
    patches.validate(config, tokens.len())?;
    if let Some(n) = noise {
        for (pos, v) in &n.entries {
            if *pos >= tokens.len() || v.len() != config.d_model {
                return Err(ModelError::InvalidNoise { position: *pos });
            }
        }
    }
    let seqs = [tokens];
    let cache = run(
        params,
        &seqs,
        &RunOptions {
            patches: Some(patches),
            noise,
            logit_rows: LogitRows::All,
        },
    );
    let logits = cache.logits.clone();
    let probs = softmax_rows(&logits);
    let trace = cache.into_trace(capture);
    Ok(ForwardOutput { logits, probs, trace })
}

/// Row-wise softmax, accumulated in f64.
pub fn softmax_rows(logits: &Matrix<f32>) -> Matrix<f32> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v as f64 - max)).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy next-token prediction for the last position of `tokens`.
pub fn predict_next(params: &ModelParams, tokens: &[u32]) -> Result<u32, ModelError> {
    check_tokens(&params.config, tokens)?;
    let seqs = [tokens];
    let cache = run(
        params,
        &seqs,
        &RunOptions {
            patches: None,
            noise: None,
            logit_rows: LogitRows::LastOfEach,
        },
    );
    Ok(argmax(cache.logits.row(0)) as u32)
}

/// Last-position logits for many sequences in one packed pass.
pub fn last_logits_batch(params: &ModelParams, seqs: &[&[u32]]) -> Result<Matrix<f32>, ModelError> {
    for s in seqs {
        check_tokens(&params.config, s)?;
    }
    if seqs.is_empty() {
        return Ok(Matrix::zeros(0, params.config.vocab_size));
    }
    let cache = run(
        params,
        seqs,
        &RunOptions {
            patches: None,
            noise: None,
            logit_rows: LogitRows::LastOfEach,
        },
    );
    Ok(cache.logits)
}

/// Greedy next-token predictions for many sequences.
pub fn predict_batch(params: &ModelParams, seqs: &[&[u32]]) -> Result<Vec<u32>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let logits = last_logits_batch(params, chunk)?;
        out.extend((0..logits.rows()).map(|r| argmax(logits.row(r)) as u32));
    }
    Ok(out)
}

/// Greedy continuation of `prompt` by `length` tokens.
///
/// The context is the trailing `max_seq_len` tokens once the sequence outgrows
/// the position table. Returns prompt followed by the generated tokens.
pub fn generate(params: &ModelParams, prompt: &[u32], length: usize) -> Result<Vec<u32>, ModelError> {
    let mut seq = prompt.to_vec();
    if length == 0 {
        return Ok(seq);
    }
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let max = params.config.max_seq_len;
    for _ in 0..length {
        let start = seq.len().saturating_sub(max);
        let next = predict_next(params, &seq[start..])?;
        seq.push(next);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests;
