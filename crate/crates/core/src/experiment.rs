// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate, edit, evaluate: the pieces of one experiment cell.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edit::{self, CovarianceSource, DiffEntry, EditError, EditMode, EditPlan, EditRequest, TargetMode};
use crate::kv::{self, Covariance, CovarianceConfig, KvError, Pathway};
use crate::metrics::{self, MetricsError};
use crate::model::{self, ModelError, ModelParams, Site};
use crate::trace::{self, Contrast, TraceError, TraceQuery, TraceReport, Windows};
use crate::world::{Counterfact, FactWorld, Prompt, WorldError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub n_probes: usize,
    pub mlp_window: usize,
    pub attn_window: usize,
    /// Replaces the measured noise scale when set.
    pub noise_scale: Option<f64>,
    /// Explicit windows replace the selected ones when set.
    pub s_mlp: Option<Vec<usize>>,
    pub s_attn: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            n_probes: 50,
            mlp_window: 1,
            attn_window: 2,
            noise_scale: None,
            s_mlp: None,
            s_attn: None,
            seed: 0,
        }
    }
}

/// Probe facts: a seeded sample of facts outside the edit-candidate split.
pub fn probe_facts(world: &FactWorld, n: usize, seed: u64) -> Result<Vec<usize>, ExperimentError> {
    let mut pool: Vec<usize> = world
        .splits
        .train
        .iter()
        .copied()
        .filter(|i| !world.splits.edit_candidates.contains(i))
        .collect();
    if n == 0 || n > pool.len() {
        return Err(ExperimentError::Invalid(
            "probe count must be between 1 and the number of non-edit facts",
        ));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.truncate(n);
    Ok(pool)
}

/// Everything downstream stages need from tracing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub noise_scale: f64,
    pub probes: Vec<usize>,
    pub mean_p_clean: f64,
    pub mean_p_corrupted: f64,
    /// Probe-mean LD effect at the last subject token, per layer.
    pub hidden_effects: Vec<f64>,
    pub mlp_effects: Vec<f64>,
    pub attn_effects: Vec<f64>,
    pub windows: Windows,
    /// Balance factor over `windows`; absent when neither pathway shows a
    /// positive effect.
    pub alpha: Option<f64>,
}

impl TraceSummary {
    /// Layer with the largest MLP effect (lowest on ties).
    pub fn mlp_argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.mlp_effects.iter().enumerate() {
            if v > self.mlp_effects[best] {
                best = i;
            }
        }
        best
    }

    /// Largest MLP effect over the mean MLP effect.
    pub fn localization_ratio(&self) -> f64 {
        let n = self.mlp_effects.len() as f64;
        let mean = self.mlp_effects.iter().sum::<f64>() / n;
        let max = self.mlp_effects.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max / mean
    }
}

pub const TRACE_SITES: [Site; 3] = [Site::Hidden, Site::MlpOut, Site::AttnOut];

/// Traces every probe fact; probe `i` uses noise seed `cfg.seed + i`.
pub fn trace_probes(
    params: &ModelParams,
    world: &FactWorld,
    cfg: &TraceConfig,
) -> Result<(Vec<TraceReport>, TraceSummary), ExperimentError> {
    let probes = probe_facts(world, cfg.n_probes, cfg.seed)?;
    let prompts: Vec<Prompt> = probes.iter().map(|&i| world.prompt(&world.facts[i])).collect();
    let noise_scale = match cfg.noise_scale {
        Some(v) => v,
        None => {
            let tokens: Vec<u32> = prompts.iter().flat_map(|p| p.tokens.iter().copied()).collect();
            trace::noise_scale(&params.tok_emb, &tokens)?
        }
    };
    let mut reports = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let query = TraceQuery {
            tokens: p.tokens.clone(),
            subject_positions: alloc::vec![p.subject_position],
            answer: p.target,
            contrast: Contrast::CorruptedTop1,
            sites: TRACE_SITES.to_vec(),
            noise_scale,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        reports.push(trace::trace(params, &query)?);
    }
    let summary = summarize(&reports, probes, noise_scale, cfg)?;
    Ok((reports, summary))
}

pub fn summarize(
    reports: &[TraceReport],
    probes: Vec<usize>,
    noise_scale: f64,
    cfg: &TraceConfig,
) -> Result<TraceSummary, ExperimentError> {
    let n = reports.len() as f64;
    let mlp_effects = trace::mean_layer_effects(reports, Site::MlpOut)?;
    let attn_effects = trace::mean_layer_effects(reports, Site::AttnOut)?;
    let hidden_effects = trace::mean_layer_effects(reports, Site::Hidden)?;
    let selected = trace::select_windows(reports, cfg.mlp_window, cfg.attn_window)?;
    let windows = Windows {
        mlp: cfg.s_mlp.clone().unwrap_or(selected.mlp),
        attn: cfg.s_attn.clone().unwrap_or(selected.attn),
    };
    let alpha = match trace::balance_from_effects(&mlp_effects, &attn_effects, &windows.mlp, &windows.attn) {
        Ok(a) => Some(a),
        Err(TraceError::NoSignal) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(TraceSummary {
        noise_scale,
        probes,
        mean_p_clean: reports.iter().map(|r| r.p_clean).sum::<f64>() / n,
        mean_p_corrupted: reports.iter().map(|r| r.p_corrupted).sum::<f64>() / n,
        hidden_effects,
        mlp_effects,
        attn_effects,
        windows,
        alpha,
    })
}

/// MLP and attention windows a mode edits.
pub fn edit_windows(mode: EditMode, summary: &TraceSummary) -> (Vec<usize>, Vec<usize>) {
    match mode {
        EditMode::SingleLayer => (alloc::vec![summary.mlp_argmax()], Vec::new()),
        _ => (summary.windows.mlp.clone(), summary.windows.attn.clone()),
    }
}

/// Preserved-key statistics for every layer any mode may edit.
pub fn covariances_for(
    params: &ModelParams,
    world: &FactWorld,
    summary: &TraceSummary,
    cfg: &CovarianceConfig,
) -> Result<Vec<Covariance>, ExperimentError> {
    let mut mlp_layers = summary.windows.mlp.clone();
    mlp_layers.push(summary.mlp_argmax());
    mlp_layers.sort_unstable();
    mlp_layers.dedup();
    let mut attn_layers = summary.windows.attn.clone();
    attn_layers.sort_unstable();
    attn_layers.dedup();
    let prompts = kv::covariance_prompts(world, cfg)?;
    let mut out = kv::covariance_from_prompts(params, &prompts, Pathway::Mlp, &mlp_layers)?;
    out.extend(kv::covariance_from_prompts(
        params,
        &prompts,
        Pathway::Attn,
        &attn_layers,
    )?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tokens generated per prompt for fluency.
    pub gen_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gen_len: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub edit_success: f64,
    /// Absent when there are no paraphrase prompts.
    pub portability: Option<f64>,
    pub locality: f64,
    pub fluency: f64,
    pub fluency_pre: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub fact: usize,
    pub prompt: Vec<u32>,
    pub old_object: u32,
    pub new_object: u32,
    pub pre_prediction: u32,
    pub post_prediction: u32,
    pub paraphrase_pre: u32,
    pub paraphrase_post: u32,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub metrics: Metrics,
    pub records: Vec<EditRecord>,
    pub plan: EditPlan,
    pub edited: ModelParams,
    pub diff: Vec<DiffEntry>,
}

/// The counterfact batch of a cell; identity cells keep each fact's object.
pub fn cell_edits(
    world: &FactWorld,
    t: usize,
    seed: u64,
    target: TargetMode,
) -> Result<Vec<Counterfact>, ExperimentError> {
    let mut edits = world.counterfacts(t, seed)?;
    if target == TargetMode::Identity {
        for e in &mut edits {
            e.new_object = world.facts[e.fact].object;
        }
    }
    Ok(edits)
}

fn edit_prompts(world: &FactWorld, edits: &[Counterfact], paraphrase: bool) -> Vec<Prompt> {
    edits
        .iter()
        .map(|e| {
            let f = &world.facts[e.fact];
            let mut p = if paraphrase {
                world.paraphrase_prompt(f)
            } else {
                world.prompt(f)
            };
            p.target = world.vocab.object(e.new_object);
            p
        })
        .collect()
}

/// Applies `plan` and measures all four metrics against `params`.
pub fn evaluate_plan(
    params: &ModelParams,
    world: &FactWorld,
    plan: EditPlan,
    eval: &EvalConfig,
) -> Result<CellOutcome, ExperimentError> {
    let (edited, diff) = edit::apply_edit(params, &plan)?;
    let prompts = edit_prompts(world, &plan.edits, false);
    let paraphrases = edit_prompts(world, &plan.edits, true);
    let holdout: Vec<Prompt> = world
        .splits
        .locality
        .iter()
        .map(|&i| world.prompt(&world.facts[i]))
        .collect();

    let seqs = |ps: &[Prompt]| -> Vec<Vec<u32>> { ps.iter().map(|p| p.tokens.clone()).collect() };
    let predict = |m: &ModelParams, ps: &[Prompt]| -> Result<Vec<u32>, ModelError> {
        let s = seqs(ps);
        let views: Vec<&[u32]> = s.iter().map(|v| v.as_slice()).collect();
        model::predict_batch(m, &views)
    };
    let pre_pred = predict(params, &prompts)?;
    let post_pred = predict(&edited, &prompts)?;
    let para_pre = predict(params, &paraphrases)?;
    let para_post = predict(&edited, &paraphrases)?;

    let portability = match metrics::portability(&edited, &paraphrases) {
        Ok(v) => Some(v),
        Err(MetricsError::Empty(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let metrics = Metrics {
        edit_success: metrics::edit_success(&edited, &prompts)?,
        portability,
        locality: metrics::locality(params, &edited, &holdout)?,
        fluency: metrics::fluency(&edited, &prompts, eval.gen_len)?,
        fluency_pre: metrics::fluency(params, &prompts, eval.gen_len)?,
    };
    let records = plan
        .edits
        .iter()
        .enumerate()
        .map(|(i, e)| EditRecord {
            fact: e.fact,
            prompt: prompts[i].tokens.clone(),
            old_object: world.vocab.object(world.facts[e.fact].object),
            new_object: prompts[i].target,
            pre_prediction: pre_pred[i],
            post_prediction: post_pred[i],
            paraphrase_pre: para_pre[i],
            paraphrase_post: para_post[i],
        })
        .collect();
    Ok(CellOutcome {
        metrics,
        records,
        plan,
        edited,
        diff,
    })
}

pub fn run_cell(
    params: &ModelParams,
    world: &FactWorld,
    request: &EditRequest,
    covariances: &(impl CovarianceSource + ?Sized),
    edit_cfg: &edit::EditConfig,
    eval: &EvalConfig,
) -> Result<CellOutcome, ExperimentError> {
    let plan = edit::plan_edit(params, world, request, covariances, edit_cfg)?;
    evaluate_plan(params, world, plan, eval)
}
