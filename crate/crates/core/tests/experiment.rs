// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use kedit_core::edit::{EditConfig, EditMode, EditRequest, TargetMode};
use kedit_core::experiment::{
    cell_edits, covariances_for, edit_windows, probe_facts, run_cell, trace_probes, EvalConfig, TraceConfig,
};
use kedit_core::kv::CovarianceConfig;

#[test]
fn probes_avoid_edit_candidates() {
    let f = common::trained();
    let probes = probe_facts(&f.world, 15, 4).unwrap();
    assert_eq!(probes.len(), 15);
    assert!(probes.iter().all(|p| !f.world.splits.edit_candidates.contains(p)));
    assert_eq!(probes, probe_facts(&f.world, 15, 4).unwrap());
    assert_ne!(probes, probe_facts(&f.world, 15, 5).unwrap());
}

#[test]
fn trace_then_edit_cell() {
    let f = common::trained();
    assert!(f.recall >= 0.95);
    let cfg = TraceConfig {
        n_probes: 8,
        attn_window: 2,
        ..TraceConfig::default()
    };
    let (_, summary) = trace_probes(&f.params, &f.world, &cfg).unwrap();
    assert_eq!(summary.windows.mlp.len(), 1);
    assert_eq!(summary.windows.attn.len(), 2);
    assert_eq!(summary.mlp_effects.len(), f.params.config.n_layers);
    let (single, none) = edit_windows(EditMode::SingleLayer, &summary);
    assert_eq!(single, vec![summary.mlp_argmax()]);
    assert!(none.is_empty());

    let cov_cfg = CovarianceConfig {
        n_samples: 200,
        ..CovarianceConfig::default()
    };
    let covs = covariances_for(&f.params, &f.world, &summary, &cov_cfg).unwrap();
    let alpha = summary.alpha.unwrap();
    let edits = cell_edits(&f.world, 5, 2, TargetMode::Identity).unwrap();
    assert!(edits.iter().all(|e| e.new_object == f.world.facts[e.fact].object));
    let request = EditRequest {
        edits,
        mode: EditMode::Dual,
        alpha,
        s_mlp: summary.windows.mlp.clone(),
        s_attn: summary.windows.attn.clone(),
        target: TargetMode::Identity,
    };
    let out = run_cell(
        &f.params,
        &f.world,
        &request,
        &covs,
        &EditConfig::default(),
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!(out.metrics.edit_success, 100.0);
    assert_eq!(out.metrics.locality, 100.0);
    assert_eq!(out.metrics.fluency, out.metrics.fluency_pre);
    assert_eq!(out.records.len(), 5);
    assert!(out.records.iter().all(|r| r.pre_prediction == r.post_prediction));
}
