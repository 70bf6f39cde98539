// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use super::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 12,
        vocab_size: 11,
        max_seq_len: 6,
        tied_embeddings: false,
        seed: 3,
    }
}

#[test]
fn config_validation() {
    let mut c = small_config();
    c.n_heads = 3;
    assert!(c.validate().is_err());
    c = small_config();
    c.d_mlp = 0;
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn empty_patch_matches_plain_forward() {
    let p = ModelParams::init(&small_config()).unwrap();
    let tokens = [1, 4, 7, 2];
    let a = forward(&p, &tokens, SiteSet::NONE, &PatchSet::new(), None).unwrap();
    let b = forward(&p, &tokens, SiteSet::ALL, &PatchSet::new(), None).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn self_patching_is_bit_exact() {
    let p = ModelParams::init(&small_config()).unwrap();
    let tokens = [1, 4, 7, 2, 9];
    let clean = forward(&p, &tokens, SiteSet::ALL, &PatchSet::new(), None).unwrap();
    let patches = PatchSet::from_trace(&clean.trace);
    assert_eq!(patches.len(), 5 * 2 * 5);
    let patched = forward(&p, &tokens, SiteSet::ALL, &patches, None).unwrap();
    assert_eq!(clean.logits, patched.logits);
    assert_eq!(clean.trace, patched.trace);
}

#[test]
fn residual_identity_and_distributions() {
    let p = ModelParams::init(&small_config()).unwrap();
    let out = forward(&p, &[0, 3, 5], SiteSet::ALL, &PatchSet::new(), None).unwrap();
    assert!(out.trace.residual_identity_error().unwrap() <= 1e-5);
    for r in 0..out.probs.rows() {
        let s: f32 = out.probs.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(out.probs.row(r).iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn patch_changes_downstream_only() {
    let p = ModelParams::init(&small_config()).unwrap();
    let tokens = [1, 2, 3];
    let clean = forward(&p, &tokens, SiteSet::ALL, &PatchSet::new(), None).unwrap();
    let patch = PatchSet::single(0, 1, Site::MlpOut, vec![0.5; 8]);
    let out = forward(&p, &tokens, SiteSet::ALL, &patch, None).unwrap();
    assert_eq!(out.trace.get(Site::MlpOut, 0, 1).unwrap(), &[0.5; 8]);
    // position 0 cannot see position 1
    assert_eq!(out.logits.row(0), clean.logits.row(0));
    assert_ne!(out.logits.row(2), clean.logits.row(2));
}

#[test]
fn noise_is_added_to_token_embedding() {
    let p = ModelParams::init(&small_config()).unwrap();
    let noise = EmbeddingNoise {
        entries: vec![(1, vec![1.0; 8])],
    };
    let clean = forward(&p, &[1, 2], SiteSet::ALL, &PatchSet::new(), None).unwrap();
    let out = forward(&p, &[1, 2], SiteSet::ALL, &PatchSet::new(), Some(&noise)).unwrap();
    assert_eq!(out.trace.embed.row(0), clean.trace.embed.row(0));
    for (a, b) in out.trace.embed.row(1).iter().zip(clean.trace.embed.row(1)) {
        assert!((a - b - 1.0).abs() < 1e-6);
    }
}

#[test]
fn input_errors() {
    let p = ModelParams::init(&small_config()).unwrap();
    let none = PatchSet::new();
    assert!(matches!(
        forward(&p, &[11], SiteSet::NONE, &none, None),
        Err(ModelError::InvalidToken { token: 11, .. })
    ));
    assert!(matches!(
        forward(&p, &[0; 7], SiteSet::NONE, &none, None),
        Err(ModelError::SequenceTooLong { .. })
    ));
    let bad_layer = PatchSet::single(2, 0, Site::Hidden, vec![0.0; 8]);
    assert!(matches!(
        forward(&p, &[0, 1], SiteSet::NONE, &bad_layer, None),
        Err(ModelError::InvalidPatch { .. })
    ));
    let bad_width = PatchSet::single(0, 0, Site::MlpKey, vec![0.0; 8]);
    assert!(matches!(
        forward(&p, &[0, 1], SiteSet::NONE, &bad_width, None),
        Err(ModelError::PatchShape { .. })
    ));
    let mut dup = PatchSet::new();
    dup.insert(0, 0, Site::Hidden, vec![0.0; 8]).unwrap();
    assert!(dup.insert(0, 0, Site::Hidden, vec![1.0; 8]).is_err());
}

#[test]
fn generate_contracts() {
    let p = ModelParams::init(&small_config()).unwrap();
    assert_eq!(generate(&p, &[1, 2], 0).unwrap(), vec![1, 2]);
    let g = generate(&p, &[1, 2], 9).unwrap();
    assert_eq!(g.len(), 11);
    assert_eq!(g, generate(&p, &[1, 2], 9).unwrap());
    // all-zero logits: ties resolve to token 0
    let z = ModelParams::zeros(&small_config());
    assert_eq!(generate(&z, &[3], 3).unwrap(), vec![3, 0, 0, 0]);
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
}

fn loss_at_last(p: &ModelParams, tokens: &[u32], target: usize) -> f64 {
    let out = forward(p, tokens, SiteSet::NONE, &PatchSet::new(), None).unwrap();
    -libm::log(out.last_probs()[target] as f64)
}

fn ce_grad(logits: &[f32], target: usize) -> Vec<f32> {
    let probs = softmax_rows(&Matrix::from_vec(1, logits.len(), logits.to_vec()).unwrap());
    let mut g = probs.row(0).to_vec();
    g[target] -= 1.0;
    g
}

/// Central finite differences on a handful of weights per tensor.
#[test]
fn backward_matches_finite_differences() {
    let mut cfg = small_config();
    cfg.seed = 9;
    let mut p = ModelParams::init(&cfg).unwrap();
    // larger weights so gradients are not vanishingly small
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v *= 8.0;
        }
    }
    let tokens = [1u32, 5, 3, 8];
    let target = 6;
    let seqs = [&tokens[..]];
    let cache = run(
        &p,
        &seqs,
        &RunOptions {
            patches: None,
            noise: None,
            logit_rows: LogitRows::LastOfEach,
        },
    );
    let dl = Matrix::from_vec(1, cfg.vocab_size, ce_grad(cache.logits.row(0), target)).unwrap();
    let mut grads = ModelParams::zeros(&cfg);
    backward(&p, &cache, &dl, None, Some(&mut grads));

    let names: Vec<_> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grad_data: Vec<Vec<f32>> = grads.named_tensors().iter().map(|(_, m)| m.data().to_vec()).collect();
    let n_tensors = names.len();
    for ti in 0..n_tensors {
        let len = grad_data[ti].len();
        for idx in [0, len / 3, len - 1] {
            let eps = 1e-2f32;
            let orig = p.tensors_mut()[ti].data()[idx];
            p.tensors_mut()[ti].data_mut()[idx] = orig + eps;
            let up = loss_at_last(&p, &tokens, target);
            p.tensors_mut()[ti].data_mut()[idx] = orig - eps;
            let down = loss_at_last(&p, &tokens, target);
            p.tensors_mut()[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps as f64);
            let analytic = grad_data[ti][idx] as f64;
            let tol = 2e-3 + 2e-2 * numeric.abs().max(analytic.abs());
            assert!(
                (numeric - analytic).abs() < tol,
                "{} [{idx}]: numeric {numeric} analytic {analytic}",
                names[ti]
            );
        }
    }
}

#[test]
fn residual_gradient_through_patched_site() {
    let cfg = small_config();
    let mut p = ModelParams::init(&cfg).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v *= 8.0;
        }
    }
    let tokens = [2u32, 4, 1];
    let target = 3;
    let clean = forward(&p, &tokens, SiteSet::ALL, &PatchSet::new(), None).unwrap();
    let base = clean.trace.get(Site::MlpOut, 0, 1).unwrap().to_vec();
    let patches = PatchSet::single(0, 1, Site::MlpOut, base.clone());
    let seqs = [&tokens[..]];
    let cache = run(
        &p,
        &seqs,
        &RunOptions {
            patches: Some(&patches),
            noise: None,
            logit_rows: LogitRows::LastOfEach,
        },
    );
    let dl = Matrix::from_vec(1, cfg.vocab_size, ce_grad(cache.logits.row(0), target)).unwrap();
    let res = backward(&p, &cache, &dl, Some(0), None);
    let g = &res.residual_grad[8..16];
    for i in 0..8 {
        let eps = 1e-2;
        let mut up = base.clone();
        up[i] += eps;
        let mut down = base.clone();
        down[i] -= eps;
        let lu = {
            let o = forward(
                &p,
                &tokens,
                SiteSet::NONE,
                &PatchSet::single(0, 1, Site::MlpOut, up),
                None,
            )
            .unwrap();
            -libm::log(o.last_probs()[target] as f64)
        };
        let ld = {
            let o = forward(
                &p,
                &tokens,
                SiteSet::NONE,
                &PatchSet::single(0, 1, Site::MlpOut, down),
                None,
            )
            .unwrap();
            -libm::log(o.last_probs()[target] as f64)
        };
        let numeric = (lu - ld) / (2.0 * eps as f64);
        assert!(
            (numeric - g[i] as f64).abs() < 2e-3 + 2e-2 * numeric.abs(),
            "{i}: {numeric} vs {}",
            g[i]
        );
    }
}
