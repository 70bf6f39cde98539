// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form batched edits of MLP and attention memories.
//!
//! Each pathway inserts new key-value pairs into the output projections of its
//! critical layers. For a layer with new keys `K1`, residual `R` and preserved
//! second moment `C0` the update is
//!
//! ```text
//! Δ = R K1ᵀ (C0 + K1 K1ᵀ)⁻¹
//! ```
//!
//! solved as a linear system, never through an explicit inverse. The residual
//! towards the top layer's target is shared out over the window: layer `l` of
//! `S` takes `1 / (max(S) − l + 1)` of what remains after the layers below it
//! were edited. In dual mode the MLP deltas are applied with scale `1 − α` and
//! the attention deltas with scale `α`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::{matrix_hash, params_hash};
use crate::kv::{self, Covariance, KvError, Pathway, TargetValue, ValueConfig};
use crate::model::{ModelError, ModelParams};
use crate::numerics::{solve_spd, symmetric_pinv, Matrix, NumericsError};
use crate::world::{Counterfact, FactWorld, Prompt, WorldError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EditError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid edit request: {0}")]
    InvalidRequest(&'static str),
    #[error("no preserved-key statistics for {pathway:?} layer {layer}")]
    MissingCovariance { pathway: Pathway, layer: usize },
    #[error("layer {layer} is not in the window")]
    NotInWindow { layer: usize },
    #[error("plan was made for parameters {expected}, got {found}")]
    Provenance { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Both pathways, scaled by `1 − α` (MLP) and `α` (attention).
    Dual,
    #[serde(alias = "mlp")]
    MlpOnly,
    #[serde(alias = "attn")]
    AttnOnly,
    /// MLP pathway on a single layer.
    #[serde(alias = "single")]
    SingleLayer,
}

impl EditMode {
    pub fn name(self) -> &'static str {
        match self {
            EditMode::Dual => "dual",
            EditMode::MlpOnly => "mlp",
            EditMode::AttnOnly => "attn",
            EditMode::SingleLayer => "single",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            EditMode::Dual,
            EditMode::MlpOnly,
            EditMode::AttnOnly,
            EditMode::SingleLayer,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }

    /// Scale of each pathway's deltas, or `None` if the pathway is not planned.
    pub fn scale(self, pathway: Pathway, alpha: f64) -> Option<f64> {
        match (self, pathway) {
            (EditMode::Dual, Pathway::Mlp) => Some(1.0 - alpha),
            (EditMode::Dual, Pathway::Attn) => Some(alpha),
            (EditMode::MlpOnly | EditMode::SingleLayer, Pathway::Mlp) => Some(1.0),
            (EditMode::AttnOnly, Pathway::Attn) => Some(1.0),
            _ => None,
        }
    }
}

/// Where the new values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Optimized so each prompt predicts its new object.
    Counterfact,
    /// `v* = v`: the edit asks for what the model already stores.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub edits: Vec<Counterfact>,
    pub mode: EditMode,
    pub alpha: f64,
    pub s_mlp: Vec<usize>,
    pub s_attn: Vec<usize>,
    pub target: TargetMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Random filler prefixes averaged over, in addition to the bare prompt.
    pub contexts: usize,
    pub max_prefix_len: usize,
    pub context_seed: u64,
    pub value: ValueConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            contexts: 8,
            max_prefix_len: 3,
            context_seed: 0,
            value: ValueConfig::default(),
        }
    }
}

/// The bare prompt followed by `cfg.contexts` random filler prefixes.
pub fn contexts(world: &FactWorld, cfg: &EditConfig) -> Vec<Vec<u32>> {
    let mut out = alloc::vec![Vec::new()];
    out.extend(world.random_prefixes(cfg.contexts, cfg.max_prefix_len, cfg.context_seed));
    out
}

/// Solution of one closed-form update.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSolution {
    pub delta: Matrix<f64>,
    /// The Gram matrix was singular and the minimum-norm solution was taken.
    pub rank_deficient: bool,
    /// Relative residual of `Δ (C0 + K1K1ᵀ) = R K1ᵀ`.
    pub normal_residual: f64,
}

/// `‖Δ (C0 + K1K1ᵀ) − R K1ᵀ‖_F`, relative to `‖R K1ᵀ‖_F` when that is nonzero.
pub fn normal_equation_residual(
    delta: &Matrix<f64>,
    residual: &Matrix<f64>,
    k1: &Matrix<f64>,
    c0: &Matrix<f64>,
) -> Result<f64, NumericsError> {
    let gram = c0.add(&k1.matmul_transposed(k1)?)?;
    let lhs = delta.matmul(&gram)?;
    let rhs = residual.matmul_transposed(k1)?;
    let err = lhs.sub(&rhs)?.frobenius_norm();
    let scale = rhs.frobenius_norm();
    Ok(if scale > 0.0 { err / scale } else { err })
}

/// `Δ = R K1ᵀ (C0 + K1K1ᵀ)⁻¹` for a given residual `R = V1 − W0K1`.
pub fn solve_delta_from_residual(
    residual: &Matrix<f64>,
    k1: &Matrix<f64>,
    c0: &Matrix<f64>,
) -> Result<DeltaSolution, NumericsError> {
    let gram = c0.add(&k1.matmul_transposed(k1)?)?;
    let rhs = residual.matmul_transposed(k1)?;
    // Δ G = B with G symmetric, so G Δᵀ = Bᵀ.
    let sol = solve_spd(&gram, &rhs.transpose())?;
    let rank_deficient = sol.ridge.is_some();
    let delta = if rank_deficient {
        rhs.matmul(&symmetric_pinv(&gram)?)?
    } else {
        sol.x.transpose()
    };
    let normal_residual = normal_equation_residual(&delta, residual, k1, c0)?;
    Ok(DeltaSolution {
        delta,
        rank_deficient,
        normal_residual,
    })
}

/// Minimizer of `‖(W0+Δ)K1 − V1‖² + ‖ΔK0‖²` given `C0 = K0K0ᵀ`.
pub fn solve_delta(
    w0: &Matrix<f64>,
    k1: &Matrix<f64>,
    v1: &Matrix<f64>,
    c0: &Matrix<f64>,
) -> Result<DeltaSolution, NumericsError> {
    let residual = v1.sub(&w0.matmul(k1)?)?;
    solve_delta_from_residual(&residual, k1, c0)
}

/// Share of the residual assigned to `layer`: `1 / (max(S) − layer + 1)`.
pub fn spread_divisor(window: &[usize], layer: usize) -> Result<usize, EditError> {
    let top = *window
        .iter()
        .max()
        .ok_or(EditError::InvalidRequest("empty layer window"))?;
    if !window.contains(&layer) {
        return Err(EditError::NotInWindow { layer });
    }
    Ok(top - layer + 1)
}

/// `(V1 − W0K1) / (max(S) − l + 1)` where `w0k1` holds the current `W0K1`.
pub fn spread_residual(
    v1: &Matrix<f64>,
    w0k1: &Matrix<f64>,
    window: &[usize],
    layer: usize,
) -> Result<Matrix<f64>, EditError> {
    let divisor = spread_divisor(window, layer)?;
    Ok(v1.sub(w0k1)?.scale(1.0 / divisor as f64))
}

/// One planned update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEdit {
    pub pathway: Pathway,
    pub layer: usize,
    /// `d_k × T` new keys, recomputed against the partially edited weights.
    pub keys: Matrix<f64>,
    /// `d_v × T` share of the residual assigned to this layer.
    pub residual: Matrix<f64>,
    /// `d_v × d_k`.
    pub delta: Matrix<f64>,
    pub scale: f64,
    pub rank_deficient: bool,
    pub normal_residual: f64,
    pub covariance_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub pathway: Pathway,
    pub fact: usize,
    pub new_object: u32,
    pub initial_prob: f64,
    pub achieved_prob: f64,
    pub steps: usize,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    /// [`params_hash`] of the parameters the plan was computed on.
    pub base_hash: String,
    pub mode: EditMode,
    pub alpha: f64,
    pub s_mlp: Vec<usize>,
    pub s_attn: Vec<usize>,
    pub edits: Vec<Counterfact>,
    pub targets: Vec<TargetSummary>,
    /// Ascending layers within each pathway, attention first.
    pub layers: Vec<LayerEdit>,
}

impl EditPlan {
    pub fn empty(params: &ModelParams) -> Self {
        Self {
            base_hash: params_hash(params),
            mode: EditMode::Dual,
            alpha: 0.0,
            s_mlp: Vec::new(),
            s_attn: Vec::new(),
            edits: Vec::new(),
            targets: Vec::new(),
            layers: Vec::new(),
        }
    }

    /// The same deltas under another balance factor. Only dual plans carry
    /// both pathways, so other modes are rejected.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, EditError> {
        if self.mode != EditMode::Dual {
            return Err(EditError::InvalidRequest("only dual plans can be rescaled"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EditError::InvalidRequest("alpha outside [0, 1]"));
        }
        let mut out = self.clone();
        out.alpha = alpha;
        for le in &mut out.layers {
            le.scale = self.mode.scale(le.pathway, alpha).expect("dual scales both pathways");
        }
        Ok(out)
    }
}

/// Looks up the preserved-key statistics of one memory.
pub trait CovarianceSource {
    fn covariance(&self, pathway: Pathway, layer: usize) -> Option<&Covariance>;
}

impl CovarianceSource for [Covariance] {
    fn covariance(&self, pathway: Pathway, layer: usize) -> Option<&Covariance> {
        self.iter().find(|c| c.pathway == pathway && c.layer == layer)
    }
}

impl CovarianceSource for Vec<Covariance> {
    fn covariance(&self, pathway: Pathway, layer: usize) -> Option<&Covariance> {
        self.as_slice().covariance(pathway, layer)
    }
}

fn sorted_window(window: &[usize], n_layers: usize) -> Result<Vec<usize>, EditError> {
    let mut w = window.to_vec();
    w.sort_unstable();
    w.dedup();
    if w.is_empty() {
        return Err(EditError::InvalidRequest("empty layer window"));
    }
    if w.iter().any(|&l| l >= n_layers) {
        return Err(EditError::InvalidRequest("window layer outside the model"));
    }
    Ok(w)
}

fn validate(world: &FactWorld, request: &EditRequest) -> Result<(), EditError> {
    if request.edits.is_empty() {
        return Err(EditError::InvalidRequest("no edits"));
    }
    if !(0.0..=1.0).contains(&request.alpha) {
        return Err(EditError::InvalidRequest("alpha outside [0, 1]"));
    }
    for (i, e) in request.edits.iter().enumerate() {
        let f = world.fact(e.fact)?;
        if e.new_object >= world.vocab.n_objects {
            return Err(EditError::InvalidRequest("new object outside the world"));
        }
        if request.edits[..i].iter().any(|p| {
            let g = &world.facts[p.fact];
            g.subject == f.subject && g.relation == f.relation
        }) {
            return Err(EditError::InvalidRequest("two edits share a (subject, relation) key"));
        }
    }
    if request.mode == EditMode::SingleLayer && request.s_mlp.len() != 1 {
        return Err(EditError::InvalidRequest(
            "single-layer mode takes exactly one MLP layer",
        ));
    }
    Ok(())
}

/// Adds `scale · Δ` to `w`, rounding once to f32.
fn add_scaled(w: &mut Matrix<f32>, delta: &Matrix<f64>, scale: f64) {
    for (x, &d) in w.data_mut().iter_mut().zip(delta.data()) {
        *x = (*x as f64 + scale * d) as f32;
    }
}

/// Plans one pathway from the unedited `params`.
#[allow(clippy::too_many_arguments)]
fn plan_pathway(
    params: &ModelParams,
    prompts: &[Prompt],
    new_objects: &[u32],
    request: &EditRequest,
    pathway: Pathway,
    window: &[usize],
    scale: f64,
    covariances: &(impl CovarianceSource + ?Sized),
    contexts: &[Vec<u32>],
    cfg: &EditConfig,
) -> Result<(Vec<TargetSummary>, Vec<LayerEdit>), EditError> {
    let top = *window.last().expect("window is nonempty");
    let pre = kv::subject_stats(params, prompts, contexts, pathway, window[0], top)?;
    let mut target_hidden = pre.hidden.clone();
    let mut targets = Vec::with_capacity(prompts.len());
    if request.target == TargetMode::Counterfact {
        for (j, (prompt, &obj)) in prompts.iter().zip(new_objects).enumerate() {
            let tv: TargetValue =
                kv::optimize_target_value(params, prompt, obj, contexts, pathway.out_site(), top, &cfg.value)?;
            for (i, &d) in tv.delta.iter().enumerate() {
                target_hidden.set(i, j, target_hidden.get(i, j) + d as f64);
            }
            let delta_norm = libm::sqrt(tv.delta.iter().map(|&x| (x as f64) * (x as f64)).sum());
            targets.push(TargetSummary {
                pathway,
                fact: request.edits[j].fact,
                new_object: request.edits[j].new_object,
                initial_prob: tv.initial_prob,
                achieved_prob: tv.achieved_prob,
                steps: tv.steps,
                delta_norm,
            });
        }
    }

    let mut working = params.clone();
    let mut layers = Vec::with_capacity(window.len());
    for &layer in window {
        let cov = covariances
            .covariance(pathway, layer)
            .ok_or(EditError::MissingCovariance { pathway, layer })?;
        let stats = if layer == window[0] {
            pre.clone()
        } else {
            kv::subject_stats(&working, prompts, contexts, pathway, layer, top)?
        };
        let residual = spread_residual(&target_hidden, &stats.hidden, window, layer)?;
        let sol = solve_delta_from_residual(&residual, &stats.keys, &cov.c0)?;
        add_scaled(pathway.weight_mut(&mut working, layer), &sol.delta, 1.0);
        layers.push(LayerEdit {
            pathway,
            layer,
            keys: stats.keys,
            residual,
            delta: sol.delta,
            scale,
            rank_deficient: sol.rank_deficient,
            normal_residual: sol.normal_residual,
            covariance_hash: matrix_hash(&cov.c0),
        });
    }
    Ok((targets, layers))
}

/// Computes every delta of `request` without touching `params`.
///
/// Pathways are planned independently from the unedited weights; within a
/// pathway layers are edited in ascending order and each layer sees the
/// unscaled deltas of the layers below it. Any failure aborts the whole plan.
pub fn plan_edit(
    params: &ModelParams,
    world: &FactWorld,
    request: &EditRequest,
    covariances: &(impl CovarianceSource + ?Sized),
    cfg: &EditConfig,
) -> Result<EditPlan, EditError> {
    validate(world, request)?;
    let n_layers = params.config.n_layers;
    let prompts: Vec<Prompt> = request
        .edits
        .iter()
        .map(|e| world.prompt(&world.facts[e.fact]))
        .collect();
    let new_objects: Vec<u32> = request.edits.iter().map(|e| world.vocab.object(e.new_object)).collect();
    let ctx = contexts(world, cfg);

    let mut plan = EditPlan {
        base_hash: params_hash(params),
        mode: request.mode,
        alpha: request.alpha,
        s_mlp: Vec::new(),
        s_attn: Vec::new(),
        edits: request.edits.clone(),
        targets: Vec::new(),
        layers: Vec::new(),
    };
    for pathway in [Pathway::Attn, Pathway::Mlp] {
        let Some(scale) = request.mode.scale(pathway, request.alpha) else {
            continue;
        };
        let window = match pathway {
            Pathway::Mlp => sorted_window(&request.s_mlp, n_layers)?,
            Pathway::Attn => sorted_window(&request.s_attn, n_layers)?,
        };
        let (targets, layers) = plan_pathway(
            params,
            &prompts,
            &new_objects,
            request,
            pathway,
            &window,
            scale,
            covariances,
            &ctx,
            cfg,
        )?;
        match pathway {
            Pathway::Mlp => plan.s_mlp = window,
            Pathway::Attn => plan.s_attn = window,
        }
        plan.targets.extend(targets);
        plan.layers.extend(layers);
    }
    Ok(plan)
}

/// Frobenius norm of each applied `scale · Δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub pathway: Pathway,
    pub layer: usize,
    pub scale: f64,
    pub norm: f64,
}

/// Returns `params` with `W + scale · Δ` at every planned site. Entries with
/// scale 0 leave their weight untouched.
pub fn apply_edit(params: &ModelParams, plan: &EditPlan) -> Result<(ModelParams, Vec<DiffEntry>), EditError> {
    let found = params_hash(params);
    if found != plan.base_hash {
        return Err(EditError::Provenance {
            expected: plan.base_hash.clone(),
            found,
        });
    }
    let mut out = params.clone();
    let mut diff = Vec::with_capacity(plan.layers.len());
    for le in &plan.layers {
        if le.layer >= params.config.n_layers {
            return Err(EditError::InvalidRequest("planned layer outside the model"));
        }
        let w = le.pathway.weight_mut(&mut out, le.layer);
        if w.shape() != le.delta.shape() {
            return Err(NumericsError::DimensionMismatch {
                op: "apply_edit",
                left: w.shape(),
                right: le.delta.shape(),
            }
            .into());
        }
        if le.scale != 0.0 {
            add_scaled(w, &le.delta, le.scale);
        }
        diff.push(DiffEntry {
            pathway: le.pathway,
            layer: le.layer,
            scale: le.scale,
            norm: le.delta.frobenius_norm() * le.scale.abs(),
        });
    }
    Ok((out, diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_delta() {
        let w0 = m(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]);
        let k1 = m(&[&[1.0], &[0.5], &[-2.0]]);
        let v1 = w0.matmul(&k1).unwrap();
        let c0 = Matrix::identity(3);
        let sol = solve_delta(&w0, &k1, &v1, &c0).unwrap();
        assert!(sol.delta.data().iter().all(|&x| x == 0.0));
        assert_eq!(sol.normal_residual, 0.0);
    }

    #[test]
    fn rank_one_insertion() {
        let k1 = m(&[&[1.0], &[0.0], &[0.0]]);
        let v1 = m(&[&[3.0], &[-2.0]]);
        let sol = solve_delta(&Matrix::zeros(2, 3), &k1, &v1, &Matrix::zeros(3, 3)).unwrap();
        assert!(sol.rank_deficient);
        let expect = m(&[&[3.0, 0.0, 0.0], &[-2.0, 0.0, 0.0]]);
        assert!(sol.delta.sub(&expect).unwrap().frobenius_norm() < 1e-12);
        let out = sol.delta.matmul(&k1).unwrap();
        assert!(out.sub(&v1).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn shape_errors_surface() {
        let k1 = Matrix::zeros(3, 1);
        assert!(solve_delta(&Matrix::zeros(2, 4), &k1, &Matrix::zeros(2, 1), &Matrix::identity(3)).is_err());
        assert!(solve_delta(&Matrix::zeros(2, 3), &k1, &Matrix::zeros(2, 2), &Matrix::identity(3)).is_err());
    }

    #[test]
    fn spread_divisors() {
        let s = [4, 5, 6, 7, 8];
        let d: Vec<usize> = s.iter().map(|&l| spread_divisor(&s, l).unwrap()).collect();
        assert_eq!(d, vec![5, 4, 3, 2, 1]);
        assert_eq!(spread_divisor(&[3], 3).unwrap(), 1);
        assert_eq!(spread_divisor(&s, 2), Err(EditError::NotInWindow { layer: 2 }));
        assert!(matches!(spread_divisor(&[], 0), Err(EditError::InvalidRequest(_))));
    }

    #[test]
    fn single_layer_window_takes_full_residual() {
        let v1 = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let w0k1 = m(&[&[0.5, 1.0], &[0.0, -1.0]]);
        let r = spread_residual(&v1, &w0k1, &[6], 6).unwrap();
        assert_eq!(r, v1.sub(&w0k1).unwrap());
        let half = spread_residual(&v1, &w0k1, &[5, 6], 5).unwrap();
        assert_eq!(half, v1.sub(&w0k1).unwrap().scale(0.5));
    }

    #[test]
    fn mode_scales() {
        assert_eq!(EditMode::Dual.scale(Pathway::Mlp, 0.3), Some(0.7));
        assert_eq!(EditMode::Dual.scale(Pathway::Attn, 0.3), Some(0.3));
        assert_eq!(EditMode::MlpOnly.scale(Pathway::Attn, 0.3), None);
        assert_eq!(EditMode::AttnOnly.scale(Pathway::Attn, 0.3), Some(1.0));
        assert_eq!(EditMode::SingleLayer.scale(Pathway::Mlp, 0.9), Some(1.0));
        for mode in [
            EditMode::Dual,
            EditMode::MlpOnly,
            EditMode::AttnOnly,
            EditMode::SingleLayer,
        ] {
            assert_eq!(EditMode::from_name(mode.name()), Some(mode));
        }
        assert_eq!(EditMode::from_name("both"), None);
    }

    fn layer(pathway: Pathway, scale: f64) -> LayerEdit {
        LayerEdit {
            pathway,
            layer: 0,
            keys: Matrix::zeros(1, 1),
            residual: Matrix::zeros(1, 1),
            delta: Matrix::zeros(1, 1),
            scale,
            rank_deficient: false,
            normal_residual: 0.0,
            covariance_hash: String::new(),
        }
    }

    #[test]
    fn rescaling_dual_plans() {
        let plan = EditPlan {
            base_hash: String::new(),
            mode: EditMode::Dual,
            alpha: 0.5,
            s_mlp: vec![0],
            s_attn: vec![0],
            edits: Vec::new(),
            targets: Vec::new(),
            layers: vec![layer(Pathway::Attn, 0.5), layer(Pathway::Mlp, 0.5)],
        };
        let p = plan.with_alpha(0.3).unwrap();
        assert_eq!(p.alpha, 0.3);
        assert_eq!(p.layers[0].scale, 0.3);
        assert_eq!(p.layers[1].scale, 0.7);
        assert!(plan.with_alpha(1.5).is_err());
        let mlp = EditPlan {
            mode: EditMode::MlpOnly,
            ..plan
        };
        assert!(mlp.with_alpha(0.3).is_err());
    }
}
