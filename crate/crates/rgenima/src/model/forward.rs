//! Forward pass: RiT image encoding, anchored multimodal fusion, the
//! causal text decoder, and the NLL objective.
//!
//! The anchor token never reaches the decoder as a token: its position is
//! expanded in place to the N image-token embeddings, so an anchored
//! sequence has length |prompt| - 1 + N (+ targets when supervised).

use super::attention::{attention_forward, AttnInternals, AttnWeights};
use super::linalg::matmul;
use super::params::LayerParams;
use super::vocab::{Vocab, EOS, IMG};
use super::{ModelConfig, ModelError, Params};
use crate::genome::prompt::{label_prompt_spans, PromptSpan};
use crate::parcel::RoiPatchSet;

/// Role of one combined-sequence position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeqSpan {
    Template,
    /// Position inside the named gene's clause.
    Gene(String),
    /// Image token for the ROI at this index of the ROI table order.
    ImageRoi(usize),
    /// Supervised answer position (label sentence and closing <EOS>).
    Target,
}

/// Tokenized model input, before anchor expansion.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// Prompt tokens, then target tokens and <EOS> when supervised.
    pub tokens: Vec<u32>,
    /// Per-token roles; the anchor position carries `Template`.
    pub roles: Vec<SeqSpan>,
    /// Index of the <IMG> token within `tokens`, when anchored.
    pub anchor_index: Option<usize>,
    /// Number of supervised tokens at the tail (targets + <EOS>).
    pub n_targets: usize,
}

/// Tokenize a prompt (and optional target sentence) into a model input.
pub fn build_model_input(
    prompt_text: &str,
    target_text: Option<&str>,
    vocab: &Vocab,
) -> Result<ModelInput, ModelError> {
    let prompt_ids = vocab.tokenize(prompt_text)?;
    let prompt_spans = label_prompt_spans(prompt_text)
        .map_err(|e| ModelError::ShapeMismatch(format!("prompt spans: {e}")))?;
    let anchors = prompt_ids.iter().filter(|&&t| t == IMG).count();
    if anchors > 1 {
        return Err(ModelError::AnchorMismatch(format!("{anchors} anchor tokens in prompt")));
    }
    let anchor_index = prompt_ids.iter().position(|&t| t == IMG);

    let mut tokens = prompt_ids;
    let mut roles: Vec<SeqSpan> = prompt_spans
        .into_iter()
        .map(|s| match s {
            PromptSpan::Template | PromptSpan::Anchor => SeqSpan::Template,
            PromptSpan::Gene(g) => SeqSpan::Gene(g),
        })
        .collect();
    let mut n_targets = 0;
    if let Some(t) = target_text {
        let target_ids = vocab.tokenize(t)?;
        n_targets = target_ids.len() + 1;
        tokens.extend_from_slice(&target_ids);
        tokens.push(EOS);
        roles.extend(std::iter::repeat(SeqSpan::Target).take(n_targets));
    }
    Ok(ModelInput { tokens, roles, anchor_index, n_targets })
}

/// Head-resolved attention, spans, and logits of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub spans: Vec<SeqSpan>,
    /// attn[layer][head] is row-major [seq_len, seq_len].
    pub attn: Vec<Vec<Vec<f64>>>,
    /// Row-major [seq_len, vocab_size].
    pub logits: Vec<f64>,
    /// Positions whose logits score the corresponding entry of `targets`.
    pub loss_positions: Vec<usize>,
    /// Supervised target tokens, tail <EOS> included.
    pub targets: Vec<u32>,
}

/// Per-block cached activations for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Vec<f64>,
    pub ln1_xhat: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub attn: AttnInternals,
    pub x_mid: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub ff_pre: Vec<f64>,
    pub ff_act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RitCache {
    /// Standardized flattened patches, [N, S^3].
    pub std_patches: Vec<f64>,
    /// Patch tokens plus ROI positions, the first block's input.
    pub x0: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    /// Block-stack output, the connector's input.
    pub rit_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Cache {
    /// Token id per combined position; image positions carry None.
    pub token_map: Vec<Option<u32>>,
    pub e0: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    pub final_in: Vec<f64>,
    pub final_xhat: Vec<f64>,
    pub final_rstd: Vec<f64>,
    pub final_out: Vec<f64>,
    /// Combined positions [start, start+N) occupied by image tokens.
    pub image_range: Option<(usize, usize)>,
    pub rit: Option<RitCache>,
}

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const STANDARDIZE_EPS: f64 = 1e-6;

/// Zero-mean unit-variance standardization with epsilon guard; constant
/// inputs map to the zero vector.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + STANDARDIZE_EPS).sqrt();
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// Row-wise layer norm; returns (y, xhat, rstd).
pub(crate) fn layer_norm(
    x: &[f64],
    n: usize,
    d: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            y[i * d + j] = gain[j] * xh + bias[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// One pre-norm transformer block: attention then feed-forward, each with
/// a residual connection.
pub(crate) fn block_forward(
    x: &[f64],
    n: usize,
    layer: &LayerParams,
    cfg: &ModelConfig,
    causal: bool,
) -> Result<(Vec<f64>, BlockCache), ModelError> {
    let d = cfg.d_model;
    let dff = cfg.d_ff();
    let (h, ln1_xhat, ln1_rstd) = layer_norm(x, n, d, &layer.ln1_g, &layer.ln1_b);
    let weights = AttnWeights {
        wq: &layer.wq,
        wk: &layer.wk,
        wv: &layer.wv,
        wo: &layer.wo,
        d_model: d,
        n_heads: cfg.n_heads,
    };
    let (attn_y, attn) = attention_forward(&weights, &h, n, &h, n, causal)?;
    let mut x_mid = x.to_vec();
    super::linalg::add_inplace(&mut x_mid, &attn_y);

    let (h2, ln2_xhat, ln2_rstd) = layer_norm(&x_mid, n, d, &layer.ln2_g, &layer.ln2_b);
    let mut ff_pre = matmul(&h2, &layer.w1, n, d, dff);
    for i in 0..n {
        for j in 0..dff {
            ff_pre[i * dff + j] += layer.b1[j];
        }
    }
    let ff_act: Vec<f64> = ff_pre.iter().map(|&a| gelu(a)).collect();
    let mut ff_out = matmul(&ff_act, &layer.w2, n, dff, d);
    for i in 0..n {
        for j in 0..d {
            ff_out[i * d + j] += layer.b2[j];
        }
    }
    let mut x_out = x_mid.clone();
    super::linalg::add_inplace(&mut x_out, &ff_out);

    Ok((
        x_out,
        BlockCache {
            x_in: x.to_vec(),
            ln1_xhat,
            ln1_rstd,
            attn,
            x_mid,
            ln2_xhat,
            ln2_rstd,
            ff_pre,
            ff_act,
        },
    ))
}

/// Embed a patch set: token_i = W_patch . standardize(flatten(patch_i)) +
/// b_patch. Absent (all-zero) patches run through the same projection.
pub fn roi_patch_embed(p: &RoiPatchSet, params: &Params) -> Result<Vec<f64>, ModelError> {
    let cfg = &params.config;
    if p.patch_size as usize != cfg.patch_size || p.patches.len() != cfg.n_rois {
        return Err(ModelError::ShapeMismatch(format!(
            "patch set {}x{} vs config {}x{}",
            p.patches.len(),
            p.patch_size,
            cfg.n_rois,
            cfg.patch_size
        )));
    }
    let flat = cfg.patch_flat();
    let d = cfg.d_model;
    let mut tokens = vec![0.0; cfg.n_rois * d];
    for (i, patch) in p.patches.iter().enumerate() {
        if patch.len() != flat {
            return Err(ModelError::ShapeMismatch(format!("patch {i} has {} voxels", patch.len())));
        }
        let std = standardize(patch);
        let out = &mut tokens[i * d..(i + 1) * d];
        out.copy_from_slice(&params.patch_b);
        for (k, &s) in std.iter().enumerate() {
            if s != 0.0 {
                let wrow = &params.patch_w[k * d..(k + 1) * d];
                for (o, &w) in out.iter_mut().zip(wrow) {
                    *o += s * w;
                }
            }
        }
    }
    Ok(tokens)
}

/// RiT: patch embedding + learned ROI positions, a bidirectional
/// transformer stack, then the linear connector into the decoder space.
pub fn rit_encode(p: &RoiPatchSet, params: &Params) -> Result<(Vec<f64>, RitCache), ModelError> {
    let cfg = &params.config;
    let n = cfg.n_rois;
    let d = cfg.d_model;
    let flat = cfg.patch_flat();
    let mut std_patches = vec![0.0; n * flat];
    for (i, patch) in p.patches.iter().enumerate() {
        std_patches[i * flat..(i + 1) * flat].copy_from_slice(&standardize(patch));
    }
    let mut x0 = roi_patch_embed(p, params)?;
    super::linalg::add_inplace(&mut x0, &params.rit_pos);

    let mut x = x0.clone();
    let mut blocks = Vec::with_capacity(cfg.n_layers_rit);
    for layer in &params.rit_layers {
        let (next, cache) = block_forward(&x, n, layer, cfg, false)?;
        x = next;
        blocks.push(cache);
    }
    let rit_out = x;
    let mut h_image = matmul(&rit_out, &params.conn_w, n, d, d);
    for i in 0..n {
        for j in 0..d {
            h_image[i * d + j] += params.conn_b[j];
        }
    }
    Ok((h_image, RitCache { std_patches, x0, blocks, rit_out }))
}

/// Forward through the causal decoder with optional anchored image tokens.
pub fn forward_with_cache(
    input: &ModelInput,
    h_image: Option<&[f64]>,
    params: &Params,
) -> Result<(ForwardTrace, Cache), ModelError> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n_rois = cfg.n_rois;
    match (input.anchor_index, h_image) {
        (Some(_), Some(h)) if h.len() != n_rois * d => {
            return Err(ModelError::ShapeMismatch(format!(
                "H_image has {} values, expected {}",
                h.len(),
                n_rois * d
            )));
        }
        (Some(_), None) => {
            return Err(ModelError::AnchorMismatch("anchored prompt without H_image".into()))
        }
        (None, Some(_)) => {
            return Err(ModelError::AnchorMismatch("H_image without anchor token".into()))
        }
        _ => {}
    }

    // anchor expansion: combined length = tokens - 1 + N when anchored
    let n = match input.anchor_index {
        Some(_) => input.tokens.len() - 1 + n_rois,
        None => input.tokens.len(),
    };
    if n == 0 {
        return Err(ModelError::EmptyTrace);
    }
    if n > cfg.max_seq_len {
        return Err(ModelError::ShapeMismatch(format!(
            "sequence {n} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }

    let mut e0 = vec![0.0; n * d];
    let mut token_map: Vec<Option<u32>> = Vec::with_capacity(n);
    let mut spans: Vec<SeqSpan> = Vec::with_capacity(n);
    let mut image_range = None;
    {
        let mut pos = 0usize;
        for (ti, &tok) in input.tokens.iter().enumerate() {
            if input.anchor_index == Some(ti) {
                let h = h_image.expect("anchor checked above");
                image_range = Some((pos, pos + n_rois));
                for r in 0..n_rois {
                    let row = &mut e0[pos * d..(pos + 1) * d];
                    row.copy_from_slice(&h[r * d..(r + 1) * d]);
                    token_map.push(None);
                    spans.push(SeqSpan::ImageRoi(r));
                    pos += 1;
                }
            } else {
                let row = &mut e0[pos * d..(pos + 1) * d];
                row.copy_from_slice(&params.tok_emb[tok as usize * d..(tok as usize + 1) * d]);
                token_map.push(Some(tok));
                spans.push(input.roles[ti].clone());
                pos += 1;
            }
        }
        debug_assert_eq!(pos, n);
    }
    for i in 0..n {
        for j in 0..d {
            e0[i * d + j] += params.pos_emb[i * d + j];
        }
    }

    let mut x = e0.clone();
    let mut blocks = Vec::with_capacity(cfg.n_layers_text);
    let mut attn_trace = Vec::with_capacity(cfg.n_layers_text);
    for layer in &params.text_layers {
        let (next, cache) = block_forward(&x, n, layer, cfg, true)?;
        x = next;
        attn_trace.push(cache.attn.probs.clone());
        blocks.push(cache);
    }
    let final_in = x;
    let (final_out, final_xhat, final_rstd) =
        layer_norm(&final_in, n, d, &params.final_ln_g, &params.final_ln_b);
    let mut logits = matmul(&final_out, &params.lm_head_w, n, d, cfg.vocab_size);
    for i in 0..n {
        for j in 0..cfg.vocab_size {
            logits[i * cfg.vocab_size + j] += params.lm_head_b[j];
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteActivation("logits".into()));
    }

    // supervised positions: logits at p-1 score the target token at p
    let mut loss_positions = Vec::new();
    let mut targets = Vec::new();
    for p in 1..n {
        if spans[p] == SeqSpan::Target {
            loss_positions.push(p - 1);
            targets.push(token_map[p].expect("target positions hold tokens"));
        }
    }

    let trace = ForwardTrace {
        seq_len: n,
        spans,
        attn: attn_trace,
        logits,
        loss_positions,
        targets,
    };
    let cache = Cache {
        token_map,
        e0,
        blocks,
        final_in,
        final_xhat,
        final_rstd,
        final_out,
        image_range,
        rit: None,
    };
    Ok((trace, cache))
}

/// Forward pass returning only the trace.
pub fn forward_multimodal(
    input: &ModelInput,
    h_image: Option<&[f64]>,
    params: &Params,
) -> Result<ForwardTrace, ModelError> {
    forward_with_cache(input, h_image, params).map(|(t, _)| t)
}

/// Mean NLL over the supervised positions: -log softmax(logit)[y_t],
/// averaged over target tokens only.
pub fn nll_loss(trace: &ForwardTrace, targets: &[u32]) -> Result<f64, ModelError> {
    if targets.is_empty() || trace.loss_positions.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    if targets.len() != trace.loss_positions.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} targets for {} supervised positions",
            targets.len(),
            trace.loss_positions.len()
        )));
    }
    let v = trace.logits.len() / trace.seq_len;
    let mut total = 0.0;
    for (&pos, &y) in trace.loss_positions.iter().zip(targets) {
        let row = &trace.logits[pos * v..(pos + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
    }
    Ok(total / targets.len() as f64)
}
