// SPDX-License-Identifier: MIT OR Apache-2.0

//! Modules as linear key-value memories.
//!
//! For the MLP at layer `l` the key is `k = σ(W_in γ(h^{l-1}) + b_in)` and the
//! value `v = W_out k`. For attention the key is the concatenated head output
//! before the output projection and `v = W_o k`. Keys are read at the last
//! subject token.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{self, backward, run, Cache, LogitRows, ModelError, ModelParams, PatchSet, RunOptions, Site};
use crate::numerics::{Matrix, NumericsError};
use crate::world::{FactWorld, Prompt, WorldError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("position {position} outside a prompt of length {len}")]
    Position { position: usize, len: usize },
    #[error("layer {layer} outside a model with {n_layers} layers")]
    Layer { layer: usize, n_layers: usize },
    #[error("nothing to aggregate: {0}")]
    Empty(&'static str),
    #[error("non-finite gradient while optimizing a target value")]
    NonFinite,
    #[error("site {0:?} cannot carry a target value")]
    BadSite(Site),
}

/// The two editable memories of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Mlp,
    Attn,
}

impl Pathway {
    pub const ALL: [Pathway; 2] = [Pathway::Mlp, Pathway::Attn];

    pub fn name(self) -> &'static str {
        match self {
            Pathway::Mlp => "mlp",
            Pathway::Attn => "attn",
        }
    }

    pub fn key_site(self) -> Site {
        match self {
            Pathway::Mlp => Site::MlpKey,
            Pathway::Attn => Site::AttnKey,
        }
    }

    pub fn out_site(self) -> Site {
        match self {
            Pathway::Mlp => Site::MlpOut,
            Pathway::Attn => Site::AttnOut,
        }
    }

    /// The weight that maps keys to values.
    pub fn weight(self, params: &ModelParams, layer: usize) -> &Matrix<f32> {
        match self {
            Pathway::Mlp => &params.layers[layer].w_out,
            Pathway::Attn => &params.layers[layer].w_o,
        }
    }

    pub fn weight_mut(self, params: &mut ModelParams, layer: usize) -> &mut Matrix<f32> {
        match self {
            Pathway::Mlp => &mut params.layers[layer].w_out,
            Pathway::Attn => &mut params.layers[layer].w_o,
        }
    }

    /// Name of [`Pathway::weight`] in checkpoints.
    pub fn weight_name(self, layer: usize) -> alloc::string::String {
        match self {
            Pathway::Mlp => alloc::format!("layers.{layer}.mlp.w_out"),
            Pathway::Attn => alloc::format!("layers.{layer}.attn.w_o"),
        }
    }
}

fn check_layer(params: &ModelParams, layer: usize) -> Result<(), KvError> {
    if layer >= params.config.n_layers {
        return Err(KvError::Layer {
            layer,
            n_layers: params.config.n_layers,
        });
    }
    Ok(())
}

/// Key of `pathway` at `(layer, position)` for a single run of `tokens`.
pub fn extract_key(
    params: &ModelParams,
    tokens: &[u32],
    position: usize,
    pathway: Pathway,
    layer: usize,
) -> Result<Vec<f32>, KvError> {
    check_layer(params, layer)?;
    model::check_tokens(&params.config, tokens)?;
    if position >= tokens.len() {
        return Err(KvError::Position {
            position,
            len: tokens.len(),
        });
    }
    let seqs = [tokens];
    let cache = run(params, &seqs, &plain(LogitRows::LastOfEach));
    Ok(cache.site_row(pathway.key_site(), layer, position).to_vec())
}

pub fn extract_mlp_key(
    params: &ModelParams,
    tokens: &[u32],
    position: usize,
    layer: usize,
) -> Result<Vec<f32>, KvError> {
    extract_key(params, tokens, position, Pathway::Mlp, layer)
}

pub fn extract_attn_key(
    params: &ModelParams,
    tokens: &[u32],
    position: usize,
    layer: usize,
) -> Result<Vec<f32>, KvError> {
    extract_key(params, tokens, position, Pathway::Attn, layer)
}

/// Value the current weights associate with `key`.
pub fn current_value(params: &ModelParams, pathway: Pathway, layer: usize, key: &[f32]) -> Result<Vec<f32>, KvError> {
    check_layer(params, layer)?;
    Ok(pathway.weight(params, layer).matvec(key)?)
}

fn plain(logit_rows: LogitRows) -> RunOptions<'static> {
    RunOptions {
        patches: None,
        noise: None,
        logit_rows,
    }
}

/// `prompt` with `prefix` inserted after its first (BOS) token.
pub fn with_prefix(prompt: &Prompt, prefix: &[u32]) -> Prompt {
    let mut tokens = Vec::with_capacity(prompt.tokens.len() + prefix.len());
    tokens.push(prompt.tokens[0]);
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(&prompt.tokens[1..]);
    Prompt {
        tokens,
        target: prompt.target,
        subject_position: prompt.subject_position + prefix.len(),
    }
}

/// Every prompt under every context, prompt-major.
fn contextualize(prompts: &[Prompt], contexts: &[Vec<u32>]) -> Vec<Prompt> {
    prompts
        .iter()
        .flat_map(|p| contexts.iter().map(move |c| with_prefix(p, c)))
        .collect()
}

struct PackedRun {
    cache: Cache,
    /// Packed row of the subject token of each contextualized prompt.
    rows: Vec<usize>,
}

fn run_packed(
    params: &ModelParams,
    prompts: &[Prompt],
    patches: Option<&PatchSet>,
    logit_rows: LogitRows,
) -> Result<PackedRun, KvError> {
    for p in prompts {
        model::check_tokens(&params.config, &p.tokens)?;
        if p.subject_position >= p.tokens.len() {
            return Err(KvError::Position {
                position: p.subject_position,
                len: p.tokens.len(),
            });
        }
    }
    let seqs: Vec<&[u32]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
    let cache = run(
        params,
        &seqs,
        &RunOptions {
            patches,
            noise: None,
            logit_rows,
        },
    );
    let rows = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| cache.row_of(i, p.subject_position))
        .collect();
    Ok(PackedRun { cache, rows })
}

/// Context-averaged subject-token statistics for a batch of prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStats {
    /// `d_k × u` keys at the key layer.
    pub keys: Matrix<f64>,
    /// `d_model × u` residual stream after the hidden layer.
    pub hidden: Matrix<f64>,
}

/// Keys of `pathway` at `key_layer` and hidden states after `hidden_layer`,
/// each averaged over `contexts` prefixed to every prompt.
pub fn subject_stats(
    params: &ModelParams,
    prompts: &[Prompt],
    contexts: &[Vec<u32>],
    pathway: Pathway,
    key_layer: usize,
    hidden_layer: usize,
) -> Result<SubjectStats, KvError> {
    check_layer(params, key_layer)?;
    check_layer(params, hidden_layer)?;
    if prompts.is_empty() {
        return Err(KvError::Empty("prompts"));
    }
    if contexts.is_empty() {
        return Err(KvError::Empty("contexts"));
    }
    let all = contextualize(prompts, contexts);
    let run = run_packed(params, &all, None, LogitRows::LastOfEach)?;
    let nc = contexts.len();
    let average = |site: Site, layer: usize| {
        let width = params.config.site_width(site);
        let mut m = Matrix::<f64>::zeros(width, prompts.len());
        for (j, rows) in run.rows.chunks(nc).enumerate() {
            for &row in rows {
                for (i, &v) in run.cache.site_row(site, layer, row).iter().enumerate() {
                    m.set(i, j, m.get(i, j) + v as f64);
                }
            }
            for i in 0..width {
                m.set(i, j, m.get(i, j) / nc as f64);
            }
        }
        m
    };
    Ok(SubjectStats {
        keys: average(pathway.key_site(), key_layer),
        hidden: average(Site::Hidden, hidden_layer),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueConfig {
    pub steps: usize,
    pub lr: f64,
    /// The L2 penalty is `penalty_scale / d_model · ‖v* − v‖²`.
    pub penalty_scale: f64,
    /// Optimization stops once the context-mean probability reaches this.
    pub target_prob: f64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            lr: 0.05,
            penalty_scale: 0.0625,
            target_prob: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetValue {
    /// The site output `v` on the bare prompt.
    pub base: Vec<f32>,
    /// `v* = v + delta`.
    pub target: Vec<f32>,
    /// Shift added to the site output under every context.
    pub delta: Vec<f32>,
    pub initial_prob: f64,
    pub achieved_prob: f64,
    pub steps: usize,
}

/// Optimizes a shift of the `site` output at the subject token so the prompt
/// (under each context) predicts `new_object`.
///
/// Minimizes the context-mean of `-log P(new_object)` plus the L2 penalty with
/// Adam, and returns the iterate with the highest mean probability seen,
/// including the unshifted start.
pub fn optimize_target_value(
    params: &ModelParams,
    prompt: &Prompt,
    new_object: u32,
    contexts: &[Vec<u32>],
    site: Site,
    layer: usize,
    cfg: &ValueConfig,
) -> Result<TargetValue, KvError> {
    check_layer(params, layer)?;
    if !matches!(site, Site::MlpOut | Site::AttnOut | Site::Hidden) {
        return Err(KvError::BadSite(site));
    }
    if new_object as usize >= params.config.vocab_size {
        return Err(ModelError::InvalidToken {
            token: new_object,
            vocab: params.config.vocab_size,
        }
        .into());
    }
    if contexts.is_empty() {
        return Err(KvError::Empty("contexts"));
    }
    let d = params.config.d_model;
    let all = contextualize(core::slice::from_ref(prompt), contexts);
    let clean = run_packed(params, &all, None, LogitRows::LastOfEach)?;
    let bases: Vec<Vec<f32>> = clean
        .rows
        .iter()
        .map(|&r| clean.cache.site_row(site, layer, r).to_vec())
        .collect();
    let bare = with_prefix(prompt, &[]);
    let base = {
        let seqs = [bare.tokens.as_slice()];
        let c = run(params, &seqs, &plain(LogitRows::LastOfEach));
        c.site_row(site, layer, bare.subject_position).to_vec()
    };
    let n = all.len();
    let beta = cfg.penalty_scale / d as f64;
    let target = new_object as usize;

    let mean_prob = |cache: &Cache| -> (f64, Matrix<f32>) {
        let probs = model::softmax_rows(&cache.logits);
        let p = (0..n).map(|i| probs.get(i, target) as f64).sum::<f64>() / n as f64;
        (p, probs)
    };

    let mut delta = vec![0.0f32; d];
    let (initial_prob, _) = mean_prob(&clean.cache);
    let mut best = (initial_prob, delta.clone(), 0usize);
    let (mut m, mut v) = (vec![0.0f64; d], vec![0.0f64; d]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);

    let mut step = 0;
    while step < cfg.steps && best.0 < cfg.target_prob {
        let mut patches = PatchSet::new();
        for (&row, b) in clean.rows.iter().zip(&bases) {
            let value = b.iter().zip(&delta).map(|(x, e)| x + e).collect();
            patches.insert(layer, row, site, value)?;
        }
        let run = run_packed(params, &all, Some(&patches), LogitRows::LastOfEach)?;
        let (prob, probs) = mean_prob(&run.cache);
        if prob > best.0 {
            best = (prob, delta.clone(), step);
        }
        if prob >= cfg.target_prob {
            break;
        }
        let mut dlogits = probs;
        for i in 0..n {
            let row = dlogits.row_mut(i);
            row[target] -= 1.0;
            for x in row.iter_mut() {
                *x /= n as f32;
            }
        }
        let grad_h = backward(params, &run.cache, &dlogits, Some(layer), None).residual_grad;
        let mut grad = vec![0.0f64; d];
        for &row in &run.rows {
            for (g, &x) in grad.iter_mut().zip(&grad_h[row * d..(row + 1) * d]) {
                *g += x as f64;
            }
        }
        step += 1;
        let (c1, c2) = (1.0 - libm::pow(b1, step as f64), 1.0 - libm::pow(b2, step as f64));
        for i in 0..d {
            let g = grad[i] + 2.0 * beta * delta[i] as f64;
            if !g.is_finite() {
                return Err(KvError::NonFinite);
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let upd = cfg.lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + eps);
            delta[i] -= upd as f32;
        }
        if step == cfg.steps {
            // Score the final iterate too.
            let mut patches = PatchSet::new();
            for (&row, b) in clean.rows.iter().zip(&bases) {
                let value = b.iter().zip(&delta).map(|(x, e)| x + e).collect();
                patches.insert(layer, row, site, value)?;
            }
            let run = run_packed(params, &all, Some(&patches), LogitRows::LastOfEach)?;
            let (prob, _) = mean_prob(&run.cache);
            if prob > best.0 {
                best = (prob, delta.clone(), step);
            }
        }
    }
    let (achieved_prob, delta, steps) = best;
    let target_v = base.iter().zip(&delta).map(|(x, e)| x + e).collect();
    Ok(TargetValue {
        base,
        target: target_v,
        delta,
        initial_prob,
        achieved_prob,
        steps,
    })
}

/// `K Kᵀ` for a `d_k × n` key matrix.
pub fn second_moment(keys: &Matrix<f64>) -> Matrix<f64> {
    let (dk, n) = keys.shape();
    let mut c = Matrix::zeros(dk, dk);
    for j in 0..n {
        for a in 0..dk {
            let ka = keys.get(a, j);
            if ka == 0.0 {
                continue;
            }
            for b in a..dk {
                let v = c.get(a, b) + ka * keys.get(b, j);
                c.set(a, b, v);
            }
        }
    }
    for a in 0..dk {
        for b in 0..a {
            c.set(a, b, c.get(b, a));
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceConfig {
    pub n_samples: usize,
    pub max_prefix_len: usize,
    pub seed: u64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            max_prefix_len: 3,
            seed: 0,
        }
    }
}

/// Preserved-knowledge second moment `C0 = K0 K0ᵀ` of one memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub pathway: Pathway,
    pub layer: usize,
    pub c0: Matrix<f64>,
    /// Number of keys summed.
    pub sample_count: usize,
}

/// Prompts sampled from facts whose subjects are never edited, each with a
/// random filler prefix of length `0..=max_prefix_len`.
pub fn covariance_prompts(world: &FactWorld, cfg: &CovarianceConfig) -> Result<Vec<Prompt>, KvError> {
    let edited: BTreeSet<u32> = world
        .splits
        .edit_candidates
        .iter()
        .map(|&i| world.facts[i].subject)
        .collect();
    let pool: Vec<usize> = (0..world.facts.len())
        .filter(|&i| !edited.contains(&world.facts[i].subject))
        .collect();
    if pool.is_empty() || cfg.n_samples == 0 {
        return Err(KvError::Empty("covariance samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_fillers = world.vocab.n_fillers;
    Ok((0..cfg.n_samples)
        .map(|_| {
            let fact = &world.facts[pool[rng.random_range(0..pool.len())]];
            let len = if n_fillers == 0 {
                0
            } else {
                rng.random_range(0..=cfg.max_prefix_len)
            };
            let prefix: Vec<u32> = (0..len)
                .map(|_| world.vocab.filler(rng.random_range(0..n_fillers)))
                .collect();
            world.prompt_with_prefix(fact, &prefix)
        })
        .collect())
}

/// Sums `k kᵀ` of the keys at every position of `prompts` for each listed layer.
pub fn covariance_from_prompts(
    params: &ModelParams,
    prompts: &[Prompt],
    pathway: Pathway,
    layers: &[usize],
) -> Result<Vec<Covariance>, KvError> {
    if prompts.is_empty() {
        return Err(KvError::Empty("covariance samples"));
    }
    for &l in layers {
        check_layer(params, l)?;
    }
    let dk = params.config.site_width(pathway.key_site());
    let n_keys: usize = prompts.iter().map(|p| p.tokens.len()).sum();
    let mut keys: Vec<Matrix<f64>> = layers.iter().map(|_| Matrix::zeros(dk, n_keys)).collect();
    let mut col = 0;
    for chunk in prompts.chunks(64) {
        let run = run_packed(params, chunk, None, LogitRows::LastOfEach)?;
        for row in 0..run.cache.rows() {
            for (k, &l) in keys.iter_mut().zip(layers) {
                for (i, &v) in run.cache.site_row(pathway.key_site(), l, row).iter().enumerate() {
                    k.set(i, col, v as f64);
                }
            }
            col += 1;
        }
    }
    Ok(keys
        .iter()
        .zip(layers)
        .map(|(k, &layer)| Covariance {
            pathway,
            layer,
            c0: second_moment(k),
            sample_count: n_keys,
        })
        .collect())
}

pub fn estimate_covariance(
    params: &ModelParams,
    world: &FactWorld,
    pathway: Pathway,
    layers: &[usize],
    cfg: &CovarianceConfig,
) -> Result<Vec<Covariance>, KvError> {
    let prompts = covariance_prompts(world, cfg)?;
    covariance_from_prompts(params, &prompts, pathway, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig, SiteSet};

    fn small() -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 12,
            vocab_size: 11,
            max_seq_len: 8,
            tied_embeddings: false,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn second_moment_of_a_basis_vector() {
        let k = Matrix::from_columns(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let c = second_moment(&k);
        let mut expect = Matrix::zeros(3, 3);
        expect.set(0, 0, 1.0);
        assert_eq!(c, expect);
    }

    #[test]
    fn second_moment_is_additive_and_psd() {
        let a = Matrix::from_columns(&[vec![1.0, -2.0, 0.5], vec![0.25, 3.0, -1.0]]).unwrap();
        let b = Matrix::from_columns(&[vec![0.0, 1.5, 2.0]]).unwrap();
        let both = Matrix::from_columns(&[a.column(0), a.column(1), b.column(0)]).unwrap();
        let sum = second_moment(&a).add(&second_moment(&b)).unwrap();
        assert!(second_moment(&both).sub(&sum).unwrap().frobenius_norm() < 1e-12);
        let doubled = Matrix::from_columns(&[a.column(0), a.column(1), a.column(0), a.column(1)]).unwrap();
        assert!(
            second_moment(&doubled)
                .sub(&second_moment(&a).scale(2.0))
                .unwrap()
                .frobenius_norm()
                < 1e-12
        );
        let c = second_moment(&both);
        assert_eq!(c, c.transpose());
        let eig = crate::numerics::symmetric_eigen(&c).unwrap();
        assert!(eig.values.iter().all(|&v| v > -1e-12));
    }

    #[test]
    fn keys_match_the_activation_trace() {
        let p = small();
        let tokens = [1, 4, 7, 2, 9];
        let out = forward(&p, &tokens, SiteSet::ALL, &PatchSet::new(), None).unwrap();
        for layer in 0..2 {
            for pos in 0..tokens.len() {
                let mk = extract_mlp_key(&p, &tokens, pos, layer).unwrap();
                let ak = extract_attn_key(&p, &tokens, pos, layer).unwrap();
                assert_eq!(mk.as_slice(), out.trace.get(Site::MlpKey, layer, pos).unwrap());
                assert_eq!(ak.as_slice(), out.trace.get(Site::AttnKey, layer, pos).unwrap());
            }
        }
    }

    #[test]
    fn identity_projection_returns_the_key() {
        let mut p = small();
        p.layers[1].w_o = Matrix::identity(8);
        let key = extract_attn_key(&p, &[1, 3, 5], 2, 1).unwrap();
        assert_eq!(current_value(&p, Pathway::Attn, 1, &key).unwrap(), key);
    }

    #[test]
    fn extraction_errors() {
        let p = small();
        assert!(matches!(
            extract_mlp_key(&p, &[1, 2], 2, 0),
            Err(KvError::Position { .. })
        ));
        assert!(matches!(extract_mlp_key(&p, &[1, 2], 0, 2), Err(KvError::Layer { .. })));
        assert!(extract_mlp_key(&p, &[1, 99], 0, 0).is_err());
        assert!(matches!(
            covariance_from_prompts(&p, &[], Pathway::Mlp, &[0]),
            Err(KvError::Empty(_))
        ));
    }

    #[test]
    fn prefix_shifts_the_subject() {
        let p = Prompt {
            tokens: vec![0, 5, 6],
            target: 3,
            subject_position: 1,
        };
        let q = with_prefix(&p, &[9, 8]);
        assert_eq!(q.tokens, vec![0, 9, 8, 5, 6]);
        assert_eq!(q.subject_position, 3);
        assert_eq!(with_prefix(&p, &[]), p);
    }
}
