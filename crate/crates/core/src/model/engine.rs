// SPDX-License-Identifier: MIT OR Apache-2.0

//! Packed forward and backward passes.
//!
//! Several sequences are packed row-wise so the linear layers stream each weight
//! row across every token of a batch. Attention runs per sequence.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward_input, linear_backward_weight,
};
use super::{ActivationTrace, EmbeddingNoise, ModelParams, PatchSet, Site, SiteSet};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LogitRows {
    All,
    LastOfEach,
}

pub(crate) struct RunOptions<'a> {
    /// Patch positions index packed rows (positions, for a single sequence).
    pub patches: Option<&'a PatchSet>,
    pub noise: Option<&'a EmbeddingNoise>,
    pub logit_rows: LogitRows,
}

pub(crate) struct LayerCache {
    attn_in: Vec<f32>,
    attn_xhat: Vec<f32>,
    attn_rstd: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    z: Vec<f32>,
    a: Vec<f32>,
    mlp_in: Vec<f32>,
    mlp_xhat: Vec<f32>,
    mlp_rstd: Vec<f32>,
    pre: Vec<f32>,
    gelu_tanh: Vec<f32>,
    key: Vec<f32>,
    m: Vec<f32>,
    h: Vec<f32>,
}

pub(crate) struct Cache {
    starts: Vec<usize>,
    lens: Vec<usize>,
    prob_offsets: Vec<usize>,
    tokens: Vec<u32>,
    positions: Vec<usize>,
    embed: Vec<f32>,
    layers: Vec<LayerCache>,
    /// Packed row index of each logits row.
    logit_rows: Vec<usize>,
    final_xhat: Vec<f32>,
    final_rstd: Vec<f32>,
    final_out: Vec<f32>,
    pub logits: Matrix<f32>,
    /// `(layer, site, row)` of every patched activation.
    patched: Vec<(usize, Site, usize)>,
    d_model: usize,
    d_mlp: usize,
}

impl Cache {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn site_row(&self, site: Site, layer: usize, row: usize) -> &[f32] {
        let (buf, w) = self.site_buffer(site, layer);
        &buf[row * w..(row + 1) * w]
    }

    pub fn row_of(&self, seq: usize, position: usize) -> usize {
        self.starts[seq] + position
    }

    fn site_buffer(&self, site: Site, layer: usize) -> (&[f32], usize) {
        let lc = &self.layers[layer];
        match site {
            Site::Hidden => (&lc.h, self.d_model),
            Site::AttnOut => (&lc.a, self.d_model),
            Site::MlpOut => (&lc.m, self.d_model),
            Site::MlpKey => (&lc.key, self.d_mlp),
            Site::AttnKey => (&lc.z, self.d_model),
        }
    }

    pub fn into_trace(self, capture: SiteSet) -> ActivationTrace {
        let n = self.rows();
        let d = self.d_model;
        let mut sites: [Option<Vec<Matrix<f32>>>; 5] = Default::default();
        for site in Site::ALL {
            if !capture.contains(site) {
                continue;
            }
            let per_layer = (0..self.layers.len())
                .map(|l| {
                    let (buf, w) = self.site_buffer(site, l);
                    Matrix::from_vec(n, w, buf.to_vec()).expect("cache shape")
                })
                .collect();
            sites[site as usize] = Some(per_layer);
        }
        ActivationTrace {
            n_layers: self.layers.len(),
            n_positions: n,
            embed: Matrix::from_vec(n, d, self.embed).expect("cache shape"),
            sites,
        }
    }
}

fn apply_patches(
    buf: &mut [f32],
    width: usize,
    layer: usize,
    site: Site,
    patches: Option<&PatchSet>,
    log: &mut Vec<(usize, Site, usize)>,
) {
    let Some(ps) = patches else { return };
    for p in ps.iter() {
        if p.layer == layer && p.site == site {
            buf[p.position * width..(p.position + 1) * width].copy_from_slice(&p.value);
            log.push((layer, site, p.position));
        }
    }
}

/// Forward pass over packed sequences. Inputs must already be validated.
pub(crate) fn run(params: &ModelParams, seqs: &[&[u32]], opts: &RunOptions<'_>) -> Cache {
    let cfg = &params.config;
    let (d, dm, n_heads) = (cfg.d_model, cfg.d_mlp, cfg.n_heads);
    let hd = d / n_heads;

    let mut starts = Vec::with_capacity(seqs.len());
    let mut lens = Vec::with_capacity(seqs.len());
    let mut prob_offsets = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut prob_len = 0;
    for s in seqs {
        starts.push(tokens.len());
        lens.push(s.len());
        prob_offsets.push(prob_len);
        prob_len += n_heads * s.len() * s.len();
        tokens.extend_from_slice(s);
        positions.extend(0..s.len());
    }
    let n = tokens.len();

    let mut h = vec![0.0f32; n * d];
    for r in 0..n {
        let row = &mut h[r * d..(r + 1) * d];
        row.copy_from_slice(params.tok_emb.row(tokens[r] as usize));
        if let Some(noise) = opts.noise {
            for (pos, v) in &noise.entries {
                if *pos == r {
                    for (x, e) in row.iter_mut().zip(v) {
                        *x += e;
                    }
                }
            }
        }
        for (x, p) in row.iter_mut().zip(params.pos_emb.row(positions[r])) {
            *x += p;
        }
    }
    let embed = h.clone();
    let mut patched = Vec::new();
    let scale = 1.0 / libm::sqrtf(hd as f32);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let mut attn_in = vec![0.0; n * d];
        let mut attn_xhat = vec![0.0; n * d];
        let mut attn_rstd = vec![0.0; n];
        layer_norm(
            &h,
            n,
            lp.attn_norm.gain.data(),
            lp.attn_norm.bias.data(),
            &mut attn_in,
            &mut attn_xhat,
            &mut attn_rstd,
        );
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        linear(&attn_in, n, &lp.w_q, None, &mut q);
        linear(&attn_in, n, &lp.w_k, None, &mut k);
        linear(&attn_in, n, &lp.w_v, None, &mut v);

        let mut probs = vec![0.0f32; prob_len];
        let mut z = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; cfg.max_seq_len];
        for (si, (&s0, &len)) in starts.iter().zip(&lens).enumerate() {
            for head in 0..n_heads {
                let hs = head * hd;
                let pbase = prob_offsets[si] + head * len * len;
                for t in 0..len {
                    let qt = &q[(s0 + t) * d + hs..(s0 + t) * d + hs + hd];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=t {
                        let kj = &k[(s0 + j) * d + hs..(s0 + j) * d + hs + hd];
                        scores[j] = dot(qt, kj) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut sum = 0.0f32;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = libm::expf(*sc - max);
                        sum += *sc;
                    }
                    let prow = &mut probs[pbase + t * len..pbase + t * len + len];
                    for j in 0..=t {
                        prow[j] = scores[j] / sum;
                    }
                    let zt = &mut z[(s0 + t) * d + hs..(s0 + t) * d + hs + hd];
                    for j in 0..=t {
                        axpy(zt, prow[j], &v[(s0 + j) * d + hs..(s0 + j) * d + hs + hd]);
                    }
                }
            }
        }
        apply_patches(&mut z, d, l, Site::AttnKey, opts.patches, &mut patched);
        let mut a = vec![0.0; n * d];
        linear(&z, n, &lp.w_o, None, &mut a);
        apply_patches(&mut a, d, l, Site::AttnOut, opts.patches, &mut patched);

        let mut mlp_in = vec![0.0; n * d];
        let mut mlp_xhat = vec![0.0; n * d];
        let mut mlp_rstd = vec![0.0; n];
        layer_norm(
            &h,
            n,
            lp.mlp_norm.gain.data(),
            lp.mlp_norm.bias.data(),
            &mut mlp_in,
            &mut mlp_xhat,
            &mut mlp_rstd,
        );
        let mut pre = vec![0.0; n * dm];
        linear(&mlp_in, n, &lp.w_in, Some(lp.b_in.data()), &mut pre);
        let mut key = vec![0.0f32; n * dm];
        let mut gelu_tanh = vec![0.0f32; n * dm];
        for ((k, t), &x) in key.iter_mut().zip(gelu_tanh.iter_mut()).zip(&pre) {
            (*k, *t) = gelu(x);
        }
        apply_patches(&mut key, dm, l, Site::MlpKey, opts.patches, &mut patched);
        let mut m = vec![0.0; n * d];
        linear(&key, n, &lp.w_out, None, &mut m);
        apply_patches(&mut m, d, l, Site::MlpOut, opts.patches, &mut patched);

        let mut h_new = vec![0.0; n * d];
        for i in 0..n * d {
            h_new[i] = h[i] + a[i] + m[i];
        }
        apply_patches(&mut h_new, d, l, Site::Hidden, opts.patches, &mut patched);
        h = h_new.clone();
        layers.push(LayerCache {
            attn_in,
            attn_xhat,
            attn_rstd,
            q,
            k,
            v,
            probs,
            z,
            a,
            mlp_in,
            mlp_xhat,
            mlp_rstd,
            pre,
            gelu_tanh,
            key,
            m,
            h: h_new,
        });
    }

    let logit_rows: Vec<usize> = match opts.logit_rows {
        LogitRows::All => (0..n).collect(),
        LogitRows::LastOfEach => starts.iter().zip(&lens).map(|(s, l)| s + l - 1).collect(),
    };
    let nr = logit_rows.len();
    let mut gathered = vec![0.0f32; nr * d];
    for (i, &r) in logit_rows.iter().enumerate() {
        gathered[i * d..(i + 1) * d].copy_from_slice(&h[r * d..(r + 1) * d]);
    }
    let mut final_out = vec![0.0; nr * d];
    let mut final_xhat = vec![0.0; nr * d];
    let mut final_rstd = vec![0.0; nr];
    layer_norm(
        &gathered,
        nr,
        params.final_norm.gain.data(),
        params.final_norm.bias.data(),
        &mut final_out,
        &mut final_xhat,
        &mut final_rstd,
    );
    let unembed = params.output_embedding();
    let mut logits = Matrix::zeros(nr, cfg.vocab_size);
    linear(&final_out, nr, unembed, None, logits.data_mut());

    Cache {
        starts,
        lens,
        prob_offsets,
        tokens,
        positions,
        embed,
        layers,
        logit_rows,
        final_xhat,
        final_rstd,
        final_out,
        logits,
        patched,
        d_model: d,
        d_mlp: dm,
    }
}

pub struct BackwardResult {
    /// Gradient with respect to the residual stream where backward stopped,
    /// packed `rows × d_model`.
    pub residual_grad: Vec<f32>,
}

fn zero_patched(buf: &mut [f32], width: usize, layer: usize, site: Site, patched: &[(usize, Site, usize)]) {
    for &(l, s, row) in patched {
        if l == layer && s == site {
            buf[row * width..(row + 1) * width].fill(0.0);
        }
    }
}

/// Backpropagates `dlogits` (one row per logits row of `cache`).
///
/// With `stop_after = Some(L)` only blocks above `L` are processed and the
/// returned gradient is with respect to `h^L`. Parameter gradients are
/// accumulated into `grads` when given; patched activations block gradient flow.
pub(crate) fn backward(
    params: &ModelParams,
    cache: &Cache,
    dlogits: &Matrix<f32>,
    stop_after: Option<usize>,
    mut grads: Option<&mut ModelParams>,
) -> BackwardResult {
    let cfg = &params.config;
    let (d, dm, n_heads) = (cfg.d_model, cfg.d_mlp, cfg.n_heads);
    let hd = d / n_heads;
    let n = cache.rows();
    let nr = cache.logit_rows.len();
    let scale = 1.0 / libm::sqrtf(hd as f32);

    let unembed = params.output_embedding();
    if let Some(g) = grads.as_deref_mut() {
        let target = match &mut g.unembed {
            Some(u) => u,
            None => &mut g.tok_emb,
        };
        linear_backward_weight(dlogits.data(), &cache.final_out, nr, target);
    }
    let mut dfinal = vec![0.0f32; nr * d];
    linear_backward_input(dlogits.data(), nr, unembed, &mut dfinal);
    let mut dgathered = vec![0.0f32; nr * d];
    {
        let dparams = grads
            .as_deref_mut()
            .map(|g| (g.final_norm.gain.data_mut(), g.final_norm.bias.data_mut()));
        // split borrow: gain and bias live in distinct fields
        let dparams = dparams.map(|(a, b)| (a as &mut [f32], b as &mut [f32]));
        layer_norm_backward(
            &dfinal,
            &cache.final_xhat,
            &cache.final_rstd,
            nr,
            params.final_norm.gain.data(),
            &mut dgathered,
            dparams,
        );
    }
    let mut dh = vec![0.0f32; n * d];
    for (i, &r) in cache.logit_rows.iter().enumerate() {
        for (x, g) in dh[r * d..(r + 1) * d].iter_mut().zip(&dgathered[i * d..(i + 1) * d]) {
            *x += g;
        }
    }

    let lowest = stop_after.map_or(0, |l| l + 1);
    for l in (lowest..cfg.n_layers).rev() {
        let lp = &params.layers[l];
        let lc = &cache.layers[l];
        zero_patched(&mut dh, d, l, Site::Hidden, &cache.patched);
        let mut dprev = dh.clone();

        // MLP branch
        let mut dmo = dh.clone();
        zero_patched(&mut dmo, d, l, Site::MlpOut, &cache.patched);
        if let Some(g) = grads.as_deref_mut() {
            linear_backward_weight(&dmo, &lc.key, n, &mut g.layers[l].w_out);
        }
        let mut dkey = vec![0.0f32; n * dm];
        linear_backward_input(&dmo, n, &lp.w_out, &mut dkey);
        zero_patched(&mut dkey, dm, l, Site::MlpKey, &cache.patched);
        let dpre: Vec<f32> = dkey
            .iter()
            .zip(&lc.pre)
            .zip(&lc.gelu_tanh)
            .map(|((g, &x), &t)| g * gelu_grad(x, t))
            .collect();
        if let Some(g) = grads.as_deref_mut() {
            let gl = &mut g.layers[l];
            linear_backward_weight(&dpre, &lc.mlp_in, n, &mut gl.w_in);
            let db = gl.b_in.data_mut();
            for t in 0..n {
                for (b, x) in db.iter_mut().zip(&dpre[t * dm..(t + 1) * dm]) {
                    *b += x;
                }
            }
        }
        let mut dmlp_in = vec![0.0f32; n * d];
        linear_backward_input(&dpre, n, &lp.w_in, &mut dmlp_in);
        {
            let dparams = grads.as_deref_mut().map(|g| {
                let norm = &mut g.layers[l].mlp_norm;
                (norm.gain.data_mut() as &mut [f32], norm.bias.data_mut() as &mut [f32])
            });
            layer_norm_backward(
                &dmlp_in,
                &lc.mlp_xhat,
                &lc.mlp_rstd,
                n,
                lp.mlp_norm.gain.data(),
                &mut dprev,
                dparams,
            );
        }

        // attention branch
        let mut dao = dh.clone();
        zero_patched(&mut dao, d, l, Site::AttnOut, &cache.patched);
        if let Some(g) = grads.as_deref_mut() {
            linear_backward_weight(&dao, &lc.z, n, &mut g.layers[l].w_o);
        }
        let mut dz = vec![0.0f32; n * d];
        linear_backward_input(&dao, n, &lp.w_o, &mut dz);
        zero_patched(&mut dz, d, l, Site::AttnKey, &cache.patched);
        let mut dq = vec![0.0f32; n * d];
        let mut dk = vec![0.0f32; n * d];
        let mut dv = vec![0.0f32; n * d];
        let mut dp = vec![0.0f32; cfg.max_seq_len];
        for (si, (&s0, &len)) in cache.starts.iter().zip(&cache.lens).enumerate() {
            for head in 0..n_heads {
                let hs = head * hd;
                let pbase = cache.prob_offsets[si] + head * len * len;
                for t in 0..len {
                    let rt = (s0 + t) * d + hs;
                    let dzt = &dz[rt..rt + hd];
                    if dzt.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let prow = &lc.probs[pbase + t * len..pbase + t * len + len];
                    let mut weighted = 0.0f32;
                    for j in 0..=t {
                        let rj = (s0 + j) * d + hs;
                        dp[j] = dot(dzt, &lc.v[rj..rj + hd]);
                        weighted += prow[j] * dp[j];
                        axpy(&mut dv[rj..rj + hd], prow[j], dzt);
                    }
                    for j in 0..=t {
                        let rj = (s0 + j) * d + hs;
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds != 0.0 {
                            axpy(&mut dq[rt..rt + hd], ds, &lc.k[rj..rj + hd]);
                            axpy(&mut dk[rj..rj + hd], ds, &lc.q[rt..rt + hd]);
                        }
                    }
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let gl = &mut g.layers[l];
            linear_backward_weight(&dq, &lc.attn_in, n, &mut gl.w_q);
            linear_backward_weight(&dk, &lc.attn_in, n, &mut gl.w_k);
            linear_backward_weight(&dv, &lc.attn_in, n, &mut gl.w_v);
        }
        let mut dattn_in = vec![0.0f32; n * d];
        linear_backward_input(&dq, n, &lp.w_q, &mut dattn_in);
        linear_backward_input(&dk, n, &lp.w_k, &mut dattn_in);
        linear_backward_input(&dv, n, &lp.w_v, &mut dattn_in);
        {
            let dparams = grads.as_deref_mut().map(|g| {
                let norm = &mut g.layers[l].attn_norm;
                (norm.gain.data_mut() as &mut [f32], norm.bias.data_mut() as &mut [f32])
            });
            layer_norm_backward(
                &dattn_in,
                &lc.attn_xhat,
                &lc.attn_rstd,
                n,
                lp.attn_norm.gain.data(),
                &mut dprev,
                dparams,
            );
        }
        dh = dprev;
    }

    if stop_after.is_none() {
        if let Some(g) = grads {
            for r in 0..n {
                let dr = &dh[r * d..(r + 1) * d];
                axpy(g.tok_emb.row_mut(cache.tokens[r] as usize), 1.0, dr);
                axpy(g.pos_emb.row_mut(cache.positions[r]), 1.0, dr);
            }
        }
    }
    BackwardResult { residual_grad: dh }
}
