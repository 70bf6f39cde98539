// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::sync::OnceLock;

use kedit_core::edit::{apply_edit, plan_edit, EditConfig, EditError, EditMode, EditPlan, EditRequest, TargetMode};
use kedit_core::experiment::cell_edits;
use kedit_core::hash::params_hash;
use kedit_core::kv::{estimate_covariance, subject_stats, Covariance, CovarianceConfig, Pathway};
use kedit_core::world::Prompt;

const WINDOW: [usize; 2] = [0, 1];

fn covariances() -> &'static Vec<Covariance> {
    static CELL: OnceLock<Vec<Covariance>> = OnceLock::new();
    CELL.get_or_init(|| {
        let f = common::trained();
        let cfg = CovarianceConfig {
            n_samples: 300,
            ..CovarianceConfig::default()
        };
        let mut c = estimate_covariance(&f.params, &f.world, Pathway::Mlp, &WINDOW, &cfg).unwrap();
        c.extend(estimate_covariance(&f.params, &f.world, Pathway::Attn, &WINDOW, &cfg).unwrap());
        c
    })
}

fn request(mode: EditMode, alpha: f64, target: TargetMode) -> EditRequest {
    let f = common::trained();
    EditRequest {
        edits: cell_edits(&f.world, 4, 1, target).unwrap(),
        mode,
        alpha,
        s_mlp: WINDOW.to_vec(),
        s_attn: WINDOW.to_vec(),
        target,
    }
}

fn plan(mode: EditMode, alpha: f64, target: TargetMode) -> EditPlan {
    let f = common::trained();
    plan_edit(
        &f.params,
        &f.world,
        &request(mode, alpha, target),
        covariances(),
        &EditConfig::default(),
    )
    .unwrap()
}

fn dual() -> &'static EditPlan {
    static CELL: OnceLock<EditPlan> = OnceLock::new();
    CELL.get_or_init(|| plan(EditMode::Dual, 0.5, TargetMode::Counterfact))
}

#[test]
fn every_delta_solves_its_normal_equation() {
    let p = dual();
    assert_eq!(p.layers.len(), 4);
    for le in &p.layers {
        assert!(
            le.normal_residual <= 1e-6,
            "{:?} {}: {}",
            le.pathway,
            le.layer,
            le.normal_residual
        );
        assert!(le.delta.is_finite());
    }
}

#[test]
fn alpha_endpoints() {
    let f = common::trained();
    let mlp_only = plan(EditMode::MlpOnly, 0.0, TargetMode::Counterfact);
    let (a, _) = apply_edit(&f.params, &dual().with_alpha(0.0).unwrap()).unwrap();
    let (b, _) = apply_edit(&f.params, &mlp_only).unwrap();
    assert_eq!(params_hash(&a), params_hash(&b));
    assert_eq!(a, b);

    let (c, _) = apply_edit(&f.params, &dual().with_alpha(1.0).unwrap()).unwrap();
    for (orig, edited) in f.params.layers.iter().zip(&c.layers) {
        assert_eq!(orig.w_out, edited.w_out);
        assert_eq!(orig.w_in, edited.w_in);
    }
    assert_ne!(c, f.params);
    let (d, _) = apply_edit(&f.params, &plan(EditMode::AttnOnly, 1.0, TargetMode::Counterfact)).unwrap();
    assert_eq!(c, d);
}

#[test]
fn rescaling_matches_replanning() {
    let direct = plan(EditMode::Dual, 0.25, TargetMode::Counterfact);
    assert_eq!(dual().with_alpha(0.25).unwrap(), direct);
}

#[test]
fn identity_targets_leave_weights_in_place() {
    let f = common::trained();
    let p = plan(EditMode::Dual, 0.5, TargetMode::Identity);
    for le in &p.layers {
        assert!(le.delta.frobenius_norm() <= 1e-5);
    }
    let (edited, _) = apply_edit(&f.params, &p).unwrap();
    for (a, b) in f.params.named_tensors().iter().zip(edited.named_tensors()) {
        let err =
            a.1.data()
                .iter()
                .zip(b.1.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max);
        assert!(err <= 1e-5, "{}", a.0);
    }
}

#[test]
fn applying_and_removing_restores_the_weights() {
    let f = common::trained();
    let p = dual();
    let (edited, diff) = apply_edit(&f.params, p).unwrap();
    assert_eq!(diff.len(), p.layers.len());
    let mut restored = edited.clone();
    for le in &p.layers {
        let w = le.pathway.weight_mut(&mut restored, le.layer);
        for (x, d) in w.data_mut().iter_mut().zip(le.delta.data()) {
            *x = (*x as f64 - le.scale * d) as f32;
        }
    }
    for (a, b) in f.params.named_tensors().iter().zip(restored.named_tensors()) {
        let scale = a.1.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        let err =
            a.1.data()
                .iter()
                .zip(b.1.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max);
        assert!(err <= 1e-7 * scale * 8.0, "{}: {err}", a.0);
    }
}

#[test]
fn empty_plan_is_a_no_op() {
    let f = common::trained();
    let (out, diff) = apply_edit(&f.params, &EditPlan::empty(&f.params)).unwrap();
    assert_eq!(out, f.params);
    assert!(diff.is_empty());
}

#[test]
fn plans_are_bound_to_their_parameters() {
    let f = common::trained();
    let (edited, _) = apply_edit(&f.params, dual()).unwrap();
    assert!(matches!(apply_edit(&edited, dual()), Err(EditError::Provenance { .. })));
}

#[test]
fn planning_is_deterministic() {
    assert_eq!(&plan(EditMode::Dual, 0.5, TargetMode::Counterfact), dual());
}

#[test]
fn upper_layers_see_the_lower_edits() {
    let f = common::trained();
    let p = dual();
    let prompts: Vec<Prompt> = p.edits.iter().map(|e| f.world.prompt(&f.world.facts[e.fact])).collect();
    let ctx = kedit_core::edit::contexts(&f.world, &EditConfig::default());
    for pathway in Pathway::ALL {
        let layers: Vec<_> = p.layers.iter().filter(|l| l.pathway == pathway).collect();
        assert_eq!(layers.iter().map(|l| l.layer).collect::<Vec<_>>(), WINDOW);
        let fresh = subject_stats(&f.params, &prompts, &ctx, pathway, 1, 1).unwrap();
        assert_eq!(
            layers[0].keys,
            subject_stats(&f.params, &prompts, &ctx, pathway, 0, 1).unwrap().keys
        );
        assert_ne!(layers[1].keys, fresh.keys);
        assert!(layers[0].residual.frobenius_norm() > 0.0);
    }
}

#[test]
fn requests_are_validated() {
    let f = common::trained();
    let cfg = EditConfig::default();
    let check = |r: EditRequest| plan_edit(&f.params, &f.world, &r, covariances(), &cfg);

    let mut r = request(EditMode::Dual, 0.5, TargetMode::Counterfact);
    r.edits.clear();
    assert!(matches!(check(r), Err(EditError::InvalidRequest(_))));

    let r = request(EditMode::Dual, 1.5, TargetMode::Counterfact);
    assert!(matches!(check(r), Err(EditError::InvalidRequest(_))));

    let r = request(EditMode::SingleLayer, 0.0, TargetMode::Counterfact);
    assert!(matches!(check(r), Err(EditError::InvalidRequest(_))));

    let mut r = request(EditMode::MlpOnly, 0.0, TargetMode::Counterfact);
    r.s_mlp = vec![2];
    assert!(matches!(check(r), Err(EditError::MissingCovariance { layer: 2, .. })));

    let mut r = request(EditMode::MlpOnly, 0.0, TargetMode::Counterfact);
    r.s_mlp = vec![7];
    assert!(matches!(check(r), Err(EditError::InvalidRequest(_))));

    let mut r = request(EditMode::MlpOnly, 0.0, TargetMode::Counterfact);
    r.edits.push(r.edits[0]);
    assert!(matches!(check(r), Err(EditError::InvalidRequest(_))));

    assert!(dual().with_alpha(-0.1).is_err());
    assert!(plan(EditMode::MlpOnly, 0.0, TargetMode::Counterfact)
        .with_alpha(0.5)
        .is_err());
}
