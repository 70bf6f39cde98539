// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use kedit_core::experiment::{trace_probes, TraceConfig};
use kedit_core::model::{forward, PatchSet, Site, SiteSet};
use kedit_core::trace::{
    balance_from_effects, best_window, corruption, ld_effect, trace, Contrast, TraceError, TraceQuery, LD_GUARD,
};
use proptest::prelude::*;

fn probe_query(i: usize, seed: u64) -> TraceQuery {
    let f = common::trained();
    let fact = &f.world.facts[f.world.splits.train[i]];
    let p = f.world.prompt(fact);
    TraceQuery {
        tokens: p.tokens.clone(),
        subject_positions: vec![p.subject_position],
        answer: p.target,
        contrast: Contrast::CorruptedTop1,
        sites: vec![Site::Hidden, Site::MlpOut, Site::AttnOut],
        noise_scale: 1.0,
        seed,
    }
}

#[test]
fn endpoint_identities_on_every_cell() {
    let f = common::trained();
    let cfg = TraceConfig {
        n_probes: 10,
        ..TraceConfig::default()
    };
    let (reports, summary) = trace_probes(&f.params, &f.world, &cfg).unwrap();
    assert_eq!(reports.len(), 10);
    assert!(summary.mean_p_clean > summary.mean_p_corrupted);
    let last_layer = f.params.config.n_layers - 1;
    for r in &reports {
        assert!((r.normalized_ld(r.ld_clean) - 1.0).abs() <= 1e-6);
        assert!(r.normalized_ld(r.ld_corrupted).abs() <= 1e-6);
        let first_subject = *r.query.subject_positions.iter().min().unwrap();
        let last = r.n_positions - 1;
        for c in &r.cells {
            assert!(c.ld_effect.is_finite());
            // Nothing before the subject sees the noise.
            if c.position < first_subject {
                assert!(c.ld_effect.abs() <= 1e-6, "{c:?}");
                assert_eq!(c.prob_effect, 0.0);
            }
            // The final residual is all the unembedding reads.
            if c.site == Site::Hidden && c.layer == last_layer {
                let expect = if c.position == last { 1.0 } else { 0.0 };
                assert!((c.ld_effect - expect).abs() <= 1e-6, "{c:?}");
            }
        }
    }
}

#[test]
fn self_patching_is_bit_exact() {
    let f = common::trained();
    let q = probe_query(0, 3);
    let clean = forward(&f.params, &q.tokens, SiteSet::ALL, &PatchSet::new(), None).unwrap();
    let again = forward(
        &f.params,
        &q.tokens,
        SiteSet::ALL,
        &PatchSet::from_trace(&clean.trace),
        None,
    )
    .unwrap();
    assert_eq!(clean.logits, again.logits);

    let noise = corruption(&q, f.params.config.d_model).unwrap();
    let corrupted = forward(&f.params, &q.tokens, SiteSet::ALL, &PatchSet::new(), Some(&noise)).unwrap();
    let patched = forward(
        &f.params,
        &q.tokens,
        SiteSet::ALL,
        &PatchSet::from_trace(&corrupted.trace),
        Some(&noise),
    )
    .unwrap();
    assert_eq!(corrupted.logits, patched.logits);
    assert_eq!(corrupted.trace, patched.trace);
}

#[test]
fn tracing_is_deterministic_and_seeded() {
    let f = common::trained();
    let a = trace(&f.params, &probe_query(1, 9)).unwrap();
    let b = trace(&f.params, &probe_query(1, 9)).unwrap();
    assert_eq!(a, b);
    let c = trace(&f.params, &probe_query(1, 10)).unwrap();
    assert_ne!(a.p_corrupted, c.p_corrupted);
    assert_ne!(a.contrast, a.query.answer);
}

#[test]
fn fixed_contrast_is_used() {
    let f = common::trained();
    let mut q = probe_query(2, 0);
    let other = (q.answer + 1) % f.params.config.vocab_size as u32;
    q.contrast = Contrast::Fixed(other);
    assert_eq!(trace(&f.params, &q).unwrap().contrast, other);
    q.contrast = Contrast::Fixed(q.answer);
    assert!(trace(&f.params, &q).is_err());
}

proptest! {
    #[test]
    fn ld_effect_is_affine(clean in -50.0f64..50.0, gap in 1e-3f64..50.0, t in -2.0f64..3.0) {
        let corrupted = clean - gap;
        let patched = corrupted + t * gap;
        prop_assert!((ld_effect(patched, clean, corrupted) - t).abs() <= 1e-9 * (1.0 + t.abs()) * (1.0 + clean.abs() / gap));
    }

    #[test]
    fn guarded_denominators_give_zero(clean in -50.0f64..50.0, tiny in -0.9f64..0.9, patched in -50.0f64..50.0) {
        prop_assert_eq!(ld_effect(patched, clean, clean + tiny * LD_GUARD), 0.0);
    }

    #[test]
    fn best_window_is_the_brute_force_maximum(effects in prop::collection::vec(-1.0f64..1.0, 1..12), size in 1usize..5) {
        prop_assume!(size <= effects.len());
        let w = best_window(&effects, size).unwrap();
        prop_assert_eq!(w.len(), size);
        prop_assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        let got: f64 = w.iter().map(|&l| effects[l]).sum();
        for start in 0..=effects.len() - size {
            let s: f64 = effects[start..start + size].iter().sum();
            prop_assert!(s <= got);
            if start < w[0] {
                prop_assert!(s < got);
            }
        }
    }
}

#[test]
fn balance_fixture() {
    let a = balance_from_effects(&[7.0], &[3.0], &[0], &[0]).unwrap();
    assert!((a - 0.3).abs() <= 1e-12);
    assert!(matches!(
        balance_from_effects(&[0.0, -1.0], &[-2.0, 0.0], &[0, 1], &[0, 1]),
        Err(TraceError::NoSignal)
    ));
}

proptest! {
    #[test]
    fn balance_is_a_scale_free_fraction(
        mlp in prop::collection::vec(-1.0f64..1.0, 4),
        attn in prop::collection::vec(-1.0f64..1.0, 4),
        k in 0.01f64..100.0,
    ) {
        let (sm, sa) = ([0usize, 1], [1usize, 2, 3]);
        if let Ok(a) = balance_from_effects(&mlp, &attn, &sm, &sa) {
            prop_assert!((0.0..=1.0).contains(&a));
            let ms: Vec<f64> = mlp.iter().map(|v| v * k).collect();
            let at: Vec<f64> = attn.iter().map(|v| v * k).collect();
            let b = balance_from_effects(&ms, &at, &sm, &sa).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
