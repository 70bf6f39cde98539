// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: clean, corrupted and patched runs.
//!
//! The subject embeddings are corrupted with Gaussian noise, then each
//! (site, layer, position) activation of the clean run is restored on its own
//! and the recovery of the answer is measured two ways: the raw probability
//! gain and the normalized logit difference
//! `(LD_pt - LD_*) / (LD_cl - LD_*)` with `LD = logit(r) - logit(r')`.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{self, EmbeddingNoise, ModelError, ModelParams, PatchSet, Site, SiteSet};
use crate::numerics::{column_stats, Matrix};

/// Denominators of the logit-difference effect smaller than this yield 0.
pub const LD_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid trace query: {0}")]
    InvalidQuery(&'static str),
    #[error("embeddings are degenerate (zero spread)")]
    Degenerate,
    #[error("window of {size} layers does not fit in {n_layers}")]
    WindowTooLarge { size: usize, n_layers: usize },
    #[error("no trace reports")]
    NoReports,
    #[error("no causal signal in either pathway")]
    NoSignal,
}

/// How the contrast answer `r'` is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    Fixed(u32),
    /// Top-1 token of the corrupted run other than the answer.
    CorruptedTop1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceQuery {
    pub tokens: Vec<u32>,
    /// Positions whose embeddings are corrupted; the last one is the
    /// "last subject token".
    pub subject_positions: Vec<usize>,
    pub answer: u32,
    pub contrast: Contrast,
    pub sites: Vec<Site>,
    /// Standard deviation of the corruption noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl TraceQuery {
    pub fn last_subject(&self) -> usize {
        self.subject_positions.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceCell {
    pub site: Site,
    pub layer: usize,
    pub position: usize,
    /// `P_pt(r) - P_*(r)`.
    pub prob_effect: f64,
    pub ld_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub query: TraceQuery,
    /// The contrast answer actually used.
    pub contrast: u32,
    pub n_layers: usize,
    pub n_positions: usize,
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub ld_clean: f64,
    pub ld_corrupted: f64,
    /// Site-major, then layer, then position.
    pub cells: Vec<TraceCell>,
}

impl TraceReport {
    pub fn cell(&self, site: Site, layer: usize, position: usize) -> Option<&TraceCell> {
        let s = self.query.sites.iter().position(|&x| x == site)?;
        if layer >= self.n_layers || position >= self.n_positions {
            return None;
        }
        self.cells
            .get((s * self.n_layers + layer) * self.n_positions + position)
    }

    /// Logit-difference effect at the last subject token, per layer.
    pub fn last_subject_ld(&self, site: Site) -> Option<Vec<f64>> {
        let pos = self.query.last_subject();
        (0..self.n_layers)
            .map(|l| self.cell(site, l, pos).map(|c| c.ld_effect))
            .collect()
    }

    /// Effect the logit-difference formula assigns to a run with this LD.
    pub fn normalized_ld(&self, ld_patched: f64) -> f64 {
        ld_effect(ld_patched, self.ld_clean, self.ld_corrupted)
    }
}

pub fn ld_effect(ld_patched: f64, ld_clean: f64, ld_corrupted: f64) -> f64 {
    let denom = ld_clean - ld_corrupted;
    if denom.abs() < LD_GUARD {
        0.0
    } else {
        (ld_patched - ld_corrupted) / denom
    }
}

/// Three times the standard deviation of the embedding entries of `tokens`.
pub fn noise_scale(embeddings: &Matrix<f32>, tokens: &[u32]) -> Result<f64, TraceError> {
    let mut ids: Vec<u32> = tokens.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(TraceError::InvalidQuery("empty token set"));
    }
    let d = embeddings.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &t in &ids {
        if t as usize >= embeddings.rows() {
            return Err(TraceError::InvalidQuery("token outside embedding table"));
        }
        data.extend_from_slice(embeddings.row(t as usize));
    }
    let sub = Matrix::from_vec(ids.len(), d, data).map_err(|_| TraceError::Degenerate)?;
    let stats = column_stats(&sub).map_err(|_| TraceError::Degenerate)?;
    if !(stats.std > 0.0) {
        return Err(TraceError::Degenerate);
    }
    Ok(3.0 * stats.std)
}

/// The corruption used by a query: one Gaussian vector per subject position.
pub fn corruption(query: &TraceQuery, d_model: usize) -> Result<EmbeddingNoise, TraceError> {
    let normal = Normal::new(0.0, query.noise_scale).map_err(|_| TraceError::InvalidQuery("noise scale"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(query.seed);
    let mut positions = query.subject_positions.clone();
    positions.sort_unstable();
    positions.dedup();
    let entries = positions
        .into_iter()
        .map(|p| (p, (0..d_model).map(|_| normal.sample(&mut rng) as f32).collect()))
        .collect();
    Ok(EmbeddingNoise { entries })
}

fn answer_stats(logits: &[f32], probs: &[f32], r: u32, r2: u32) -> (f64, f64) {
    let (r, r2) = (r as usize, r2 as usize);
    (probs[r] as f64, logits[r] as f64 - logits[r2] as f64)
}

fn validate(params: &ModelParams, q: &TraceQuery) -> Result<(), TraceError> {
    let vocab = params.config.vocab_size as u32;
    if q.subject_positions.is_empty() || q.subject_positions.iter().any(|&p| p >= q.tokens.len()) {
        return Err(TraceError::InvalidQuery("subject positions outside prompt"));
    }
    if q.answer >= vocab {
        return Err(TraceError::InvalidQuery("answer outside vocabulary"));
    }
    if let Contrast::Fixed(c) = q.contrast {
        if c >= vocab {
            return Err(TraceError::InvalidQuery("contrast outside vocabulary"));
        }
        if c == q.answer {
            return Err(TraceError::InvalidQuery("contrast equals answer"));
        }
    }
    if !(q.noise_scale > 0.0 && q.noise_scale.is_finite()) {
        return Err(TraceError::InvalidQuery("noise scale must be positive"));
    }
    if q.sites.is_empty() {
        return Err(TraceError::InvalidQuery("no sites to trace"));
    }
    for (i, s) in q.sites.iter().enumerate() {
        if q.sites[..i].contains(s) {
            return Err(TraceError::InvalidQuery("duplicate site"));
        }
    }
    Ok(())
}

/// Runs the clean, corrupted and every single-cell patched run of `query`.
pub fn trace(params: &ModelParams, query: &TraceQuery) -> Result<TraceReport, TraceError> {
    validate(params, query)?;
    let cfg = &params.config;
    let tokens = &query.tokens;
    let clean = model::forward(params, tokens, SiteSet::of(&query.sites), &PatchSet::new(), None)?;
    let noise = corruption(query, cfg.d_model)?;
    let corrupted = model::forward(params, tokens, SiteSet::NONE, &PatchSet::new(), Some(&noise))?;

    let contrast = match query.contrast {
        Contrast::Fixed(c) => c,
        Contrast::CorruptedTop1 => {
            let mut masked = corrupted.last_probs().to_vec();
            masked[query.answer as usize] = f32::NEG_INFINITY;
            model::argmax(&masked) as u32
        }
    };
    let (p_clean, ld_clean) = answer_stats(clean.last_logits(), clean.last_probs(), query.answer, contrast);
    let (p_corrupted, ld_corrupted) =
        answer_stats(corrupted.last_logits(), corrupted.last_probs(), query.answer, contrast);

    let n = tokens.len();
    let mut cells = Vec::with_capacity(query.sites.len() * cfg.n_layers * n);
    for &site in &query.sites {
        for layer in 0..cfg.n_layers {
            for position in 0..n {
                let value = clean
                    .trace
                    .get(site, layer, position)
                    .expect("clean run captured every traced site")
                    .to_vec();
                let patches = PatchSet::single(layer, position, site, value);
                let out = model::forward(params, tokens, SiteSet::NONE, &patches, Some(&noise))?;
                let (p, ld) = answer_stats(out.last_logits(), out.last_probs(), query.answer, contrast);
                cells.push(TraceCell {
                    site,
                    layer,
                    position,
                    prob_effect: p - p_corrupted,
                    ld_effect: ld_effect(ld, ld_clean, ld_corrupted),
                });
            }
        }
    }
    Ok(TraceReport {
        query: query.clone(),
        contrast,
        n_layers: cfg.n_layers,
        n_positions: n,
        p_clean,
        p_corrupted,
        ld_clean,
        ld_corrupted,
        cells,
    })
}

/// Probe-mean logit-difference effect at the last subject token, per layer.
pub fn mean_layer_effects(reports: &[TraceReport], site: Site) -> Result<Vec<f64>, TraceError> {
    let first = reports.first().ok_or(TraceError::NoReports)?;
    let mut sum = vec![0.0; first.n_layers];
    for r in reports {
        let per_layer = r
            .last_subject_ld(site)
            .ok_or(TraceError::InvalidQuery("site missing from a report"))?;
        if per_layer.len() != sum.len() {
            return Err(TraceError::InvalidQuery("reports disagree on layer count"));
        }
        for (s, v) in sum.iter_mut().zip(per_layer) {
            *s += v;
        }
    }
    let n = reports.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Start of the contiguous window of `size` layers with the largest summed
/// effect. Ties go to the lower start.
pub fn best_window(effects: &[f64], size: usize) -> Result<Vec<usize>, TraceError> {
    if size == 0 || size > effects.len() {
        return Err(TraceError::WindowTooLarge {
            size,
            n_layers: effects.len(),
        });
    }
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for start in 0..=effects.len() - size {
        let s: f64 = effects[start..start + size].iter().sum();
        if s > best_sum {
            best_sum = s;
            best = start;
        }
    }
    Ok((best..best + size).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windows {
    pub mlp: Vec<usize>,
    pub attn: Vec<usize>,
}

pub fn select_windows(reports: &[TraceReport], mlp_size: usize, attn_size: usize) -> Result<Windows, TraceError> {
    let mlp = mean_layer_effects(reports, Site::MlpOut)?;
    let attn = mean_layer_effects(reports, Site::AttnOut)?;
    Ok(Windows {
        mlp: best_window(&mlp, mlp_size)?,
        attn: best_window(&attn, attn_size)?,
    })
}

/// `α = ΣAttn / (ΣMLP + ΣAttn)` over the windowed per-layer effects, each
/// clamped at zero.
pub fn balance_from_effects(
    mlp_effects: &[f64],
    attn_effects: &[f64],
    s_mlp: &[usize],
    s_attn: &[usize],
) -> Result<f64, TraceError> {
    if s_mlp.is_empty() || s_attn.is_empty() {
        return Err(TraceError::InvalidQuery("empty layer window"));
    }
    let sum = |effects: &[f64], window: &[usize]| -> Result<f64, TraceError> {
        window
            .iter()
            .map(|&l| {
                effects
                    .get(l)
                    .map(|v| v.max(0.0))
                    .ok_or(TraceError::InvalidQuery("window layer out of range"))
            })
            .sum()
    };
    let m = sum(mlp_effects, s_mlp)?;
    let a = sum(attn_effects, s_attn)?;
    if m + a <= 0.0 {
        return Err(TraceError::NoSignal);
    }
    Ok((a / (m + a)).clamp(0.0, 1.0))
}

pub fn balance_factor(reports: &[TraceReport], s_mlp: &[usize], s_attn: &[usize]) -> Result<f64, TraceError> {
    let mlp = mean_layer_effects(reports, Site::MlpOut)?;
    let attn = mean_layer_effects(reports, Site::AttnOut)?;
    balance_from_effects(&mlp, &attn, s_mlp, s_attn)
}
