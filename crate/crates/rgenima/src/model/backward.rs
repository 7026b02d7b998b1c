//! Exact analytic gradients of the NLL objective with respect to every
//! weight tensor, including the image path through the connector and RiT.
//!
//! Gradients accumulate into a `Params`-shaped container so the optimizer
//! and the finite-difference check can walk the same tensor registry.

use super::forward::{gelu_grad, Cache, ForwardTrace};
use super::linalg::{matmul, matmul_at, matmul_bt};
use super::params::LayerParams;
use super::{ModelConfig, ModelError, Params};

/// Layer-norm backward: returns dx and accumulates dgain/dbias.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xhr = &xhat[i * d..(i + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            m1 += dxh;
            m2 += dxh * xhr[j];
            dgain[j] += dyr[j] * xhr[j];
            dbias[j] += dyr[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let r = rstd[i];
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            dx[i * d + j] = r * (dxh - m1 - xhr[j] * m2);
        }
    }
    dx
}

fn add_col_sums(dy: &[f64], n: usize, d: usize, acc: &mut [f64]) {
    for i in 0..n {
        for j in 0..d {
            acc[j] += dy[i * d + j];
        }
    }
}

/// Backward through one pre-norm block. `probs` are the forward attention
/// probabilities (head-resolved); returns dx_in.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_backward(
    dx_out: &[f64],
    cache: &super::forward::BlockCache,
    probs: &[Vec<f64>],
    layer: &LayerParams,
    grads: &mut LayerParams,
    cfg: &ModelConfig,
    n: usize,
) -> Vec<f64> {
    let d = cfg.d_model;
    let dff = cfg.d_ff();
    let h = cfg.n_heads;
    let dk = cfg.d_k();

    // feed-forward branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
    let mut dx_mid = dx_out.to_vec();
    add_col_sums(dx_out, n, d, &mut grads.b2);
    grads
        .w2
        .iter_mut()
        .zip(matmul_at(&cache.ff_act, dx_out, n, dff, d))
        .for_each(|(g, v)| *g += v);
    let d_act = matmul_bt(dx_out, &layer.w2, n, d, dff);
    let mut d_pre = d_act;
    for (dp, &a) in d_pre.iter_mut().zip(&cache.ff_pre) {
        *dp *= gelu_grad(a);
    }
    add_col_sums(&d_pre, n, dff, &mut grads.b1);
    // recompute ln2 output from xhat
    let mut h2 = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            h2[i * d + j] = layer.ln2_g[j] * cache.ln2_xhat[i * d + j] + layer.ln2_b[j];
        }
    }
    grads
        .w1
        .iter_mut()
        .zip(matmul_at(&h2, &d_pre, n, d, dff))
        .for_each(|(g, v)| *g += v);
    let d_h2 = matmul_bt(&d_pre, &layer.w1, n, dff, d);
    let d_from_ln2 = layer_norm_backward(
        &d_h2,
        &cache.ln2_xhat,
        &cache.ln2_rstd,
        &layer.ln2_g,
        n,
        d,
        &mut grads.ln2_g,
        &mut grads.ln2_b,
    );
    for (a, b) in dx_mid.iter_mut().zip(&d_from_ln2) {
        *a += b;
    }

    // attention branch: x_mid = x_in + Wo concat(heads(P V))
    let mut dx_in = dx_mid.clone();
    grads
        .wo
        .iter_mut()
        .zip(matmul_at(&cache.attn.concat, &dx_mid, n, d, d))
        .for_each(|(g, v)| *g += v);
    let d_concat = matmul_bt(&dx_mid, &layer.wo, n, d, d);

    let mut dq = vec![0.0; n * d];
    let mut dkm = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let scale = 1.0 / (dk as f64).sqrt();
    for head in 0..h {
        let off = head * dk;
        let p = &probs[head];
        // head slices as compact [n, dk] buffers
        let slice = |m: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * dk];
            for i in 0..n {
                out[i * dk..(i + 1) * dk].copy_from_slice(&m[i * d + off..i * d + off + dk]);
            }
            out
        };
        let d_o = slice(&d_concat);
        let v_h = slice(&cache.attn.v);
        let q_h = slice(&cache.attn.q);
        let k_h = slice(&cache.attn.k);

        let dp = matmul_bt(&d_o, &v_h, n, dk, n);
        let mut dv_h = matmul_at(p, &d_o, n, n, dk);
        // softmax backward: dS = P .* (dP - rowsum(dP .* P)), then scale
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let prow = &p[i * n..(i + 1) * n];
            let dprow = &dp[i * n..(i + 1) * n];
            let dot: f64 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
            for j in 0..n {
                ds[i * n + j] = prow[j] * (dprow[j] - dot) * scale;
            }
        }
        let dq_h = matmul(&ds, &k_h, n, n, dk);
        let dk_h = matmul_at(&ds, &q_h, n, n, dk);
        for i in 0..n {
            for j in 0..dk {
                dq[i * d + off + j] += dq_h[i * dk + j];
                dkm[i * d + off + j] += dk_h[i * dk + j];
                dv[i * d + off + j] += dv_h[i * dk + j];
            }
        }
        dv_h.clear();
    }

    // recompute ln1 output
    let mut h1 = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            h1[i * d + j] = layer.ln1_g[j] * cache.ln1_xhat[i * d + j] + layer.ln1_b[j];
        }
    }
    grads.wq.iter_mut().zip(matmul_at(&h1, &dq, n, d, d)).for_each(|(g, v)| *g += v);
    grads.wk.iter_mut().zip(matmul_at(&h1, &dkm, n, d, d)).for_each(|(g, v)| *g += v);
    grads.wv.iter_mut().zip(matmul_at(&h1, &dv, n, d, d)).for_each(|(g, v)| *g += v);
    let mut d_h1 = matmul_bt(&dq, &layer.wq, n, d, d);
    for (a, b) in d_h1.iter_mut().zip(matmul_bt(&dkm, &layer.wk, n, d, d)) {
        *a += b;
    }
    for (a, b) in d_h1.iter_mut().zip(matmul_bt(&dv, &layer.wv, n, d, d)) {
        *a += b;
    }
    let d_from_ln1 = layer_norm_backward(
        &d_h1,
        &cache.ln1_xhat,
        &cache.ln1_rstd,
        &layer.ln1_g,
        n,
        d,
        &mut grads.ln1_g,
        &mut grads.ln1_b,
    );
    for (a, b) in dx_in.iter_mut().zip(&d_from_ln1) {
        *a += b;
    }
    dx_in
}

/// Gradient of the mean-over-targets NLL for one forward pass. Gradients
/// accumulate into `grads` (scaled by `weight`), so batch averaging is a
/// matter of calling this once per record with weight 1/batch.
pub fn backward_into(
    trace: &ForwardTrace,
    cache: &Cache,
    params: &Params,
    grads: &mut Params,
    weight: f64,
) -> Result<(), ModelError> {
    if trace.loss_positions.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let cfg = &params.config;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let n = trace.seq_len;

    // d logits: (softmax - onehot) / n_targets at supervised positions
    let mut dlogits = vec![0.0; n * v];
    let inv = weight / trace.loss_positions.len() as f64;
    for (&pos, &y) in trace.loss_positions.iter().zip(&trace.targets) {
        let row = &trace.logits[pos * v..(pos + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let drow = &mut dlogits[pos * v..(pos + 1) * v];
        for j in 0..v {
            drow[j] = exps[j] / z * inv;
        }
        drow[y as usize] -= inv;
    }

    // LM head
    grads
        .lm_head_w
        .iter_mut()
        .zip(matmul_at(&cache.final_out, &dlogits, n, d, v))
        .for_each(|(g, x)| *g += x);
    add_col_sums(&dlogits, n, v, &mut grads.lm_head_b);
    let d_final_out = matmul_bt(&dlogits, &params.lm_head_w, n, v, d);

    // final layer norm
    let mut dx = layer_norm_backward(
        &d_final_out,
        &cache.final_xhat,
        &cache.final_rstd,
        &params.final_ln_g,
        n,
        d,
        &mut grads.final_ln_g,
        &mut grads.final_ln_b,
    );

    // decoder stack, reversed
    for (i, layer) in params.text_layers.iter().enumerate().rev() {
        dx = block_backward(
            &dx,
            &cache.blocks[i],
            &trace.attn[i],
            layer,
            &mut grads.text_layers[i],
            cfg,
            n,
        );
    }

    // embeddings: token rows, positions, and the image block
    let mut d_h_image = cache.image_range.map(|_| vec![0.0; cfg.n_rois * d]);
    for pos in 0..n {
        let row = &dx[pos * d..(pos + 1) * d];
        for j in 0..d {
            grads.pos_emb[pos * d + j] += row[j];
        }
        match cache.token_map[pos] {
            Some(tok) => {
                let out = &mut grads.tok_emb[tok as usize * d..(tok as usize + 1) * d];
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += r;
                }
            }
            None => {
                let (start, _) = cache.image_range.expect("image position implies range");
                let r = pos - start;
                let dh = d_h_image.as_mut().expect("image grad buffer");
                for j in 0..d {
                    dh[r * d + j] += row[j];
                }
            }
        }
    }

    // image path: connector, RiT blocks, patch projection, ROI positions
    if let (Some(dh), Some(rit)) = (d_h_image, cache.rit.as_ref()) {
        let n_r = cfg.n_rois;
        grads
            .conn_w
            .iter_mut()
            .zip(matmul_at(&rit.rit_out, &dh, n_r, d, d))
            .for_each(|(g, x)| *g += x);
        add_col_sums(&dh, n_r, d, &mut grads.conn_b);
        let mut dx = matmul_bt(&dh, &params.conn_w, n_r, d, d);
        for (i, layer) in params.rit_layers.iter().enumerate().rev() {
            let probs = &rit.blocks[i].attn.probs;
            dx = block_backward(
                &dx,
                &rit.blocks[i],
                probs,
                layer,
                &mut grads.rit_layers[i],
                cfg,
                n_r,
            );
        }
        for (g, x) in grads.rit_pos.iter_mut().zip(&dx) {
            *g += x;
        }
        let flat = cfg.patch_flat();
        grads
            .patch_w
            .iter_mut()
            .zip(matmul_at(&rit.std_patches, &dx, n_r, flat, d))
            .for_each(|(g, x)| *g += x);
        add_col_sums(&dx, n_r, d, &mut grads.patch_b);
    }
    Ok(())
}

/// Gradients of `nll_loss` with respect to every weight tensor.
pub fn backward(
    trace: &ForwardTrace,
    cache: &Cache,
    params: &Params,
) -> Result<Params, ModelError> {
    let mut grads = Params::zeros(&params.config);
    backward_into(trace, cache, params, &mut grads, 1.0)?;
    Ok(grads)
}
