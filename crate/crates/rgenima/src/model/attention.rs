//! Scaled dot-product attention: the shared multi-head kernel behind both
//! the self-attention and cross-modal attention operations.

use super::linalg::{matmul, softmax_row};
use super::ModelError;

/// Borrowed attention projection weights, each [d_model, d_model] with
/// head k owning the column slice k*d_k..(k+1)*d_k.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub d_model: usize,
    pub n_heads: usize,
}

impl<'a> AttnWeights<'a> {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnInternals {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-head attention probabilities, each [n_q, n_k].
    pub probs: Vec<Vec<f64>>,
    /// Head-concatenated context [n_q, d_model], before the output
    /// projection.
    pub concat: Vec<f64>,
}

/// Multi-head scaled dot-product attention with optional causal mask.
/// Queries come from `x_q` [n_q, d], keys and values from `x_kv` [n_k, d].
pub fn attention_forward(
    w: &AttnWeights,
    x_q: &[f64],
    n_q: usize,
    x_kv: &[f64],
    n_k: usize,
    causal: bool,
) -> Result<(Vec<f64>, AttnInternals), ModelError> {
    let d = w.d_model;
    let h = w.n_heads;
    let dk = w.d_k();
    if x_q.len() != n_q * d || x_kv.len() != n_k * d {
        return Err(ModelError::ShapeMismatch(format!(
            "attention inputs {}x{} vs d_model {d}",
            x_q.len(),
            x_kv.len()
        )));
    }
    if causal && n_q != n_k {
        return Err(ModelError::ShapeMismatch("causal mask needs square attention".into()));
    }
    let q = matmul(x_q, w.wq, n_q, d, d);
    let k = matmul(x_kv, w.wk, n_k, d, d);
    let v = matmul(x_kv, w.wv, n_k, d, d);
    let scale = 1.0 / (dk as f64).sqrt();

    let mut probs = Vec::with_capacity(h);
    let mut concat = vec![0.0; n_q * d];
    for head in 0..h {
        let off = head * dk;
        let mut p = vec![0.0; n_q * n_k];
        for i in 0..n_q {
            let qrow = &q[i * d + off..i * d + off + dk];
            let row = &mut p[i * n_k..(i + 1) * n_k];
            let limit = if causal { i + 1 } else { n_k };
            for (j, rv) in row.iter_mut().enumerate().take(limit) {
                let krow = &k[j * d + off..j * d + off + dk];
                *rv = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
            }
            if causal {
                for rv in row.iter_mut().skip(limit) {
                    *rv = f64::NEG_INFINITY;
                }
            }
            softmax_row(row);
            if row.iter().any(|p| !p.is_finite()) {
                return Err(ModelError::NonFiniteActivation("attention probabilities".into()));
            }
        }
        // context = P * V_head
        for i in 0..n_q {
            let out = &mut concat[i * d + off..i * d + off + dk];
            for j in 0..n_k {
                let pij = p[i * n_k + j];
                if pij != 0.0 {
                    let vrow = &v[j * d + off..j * d + off + dk];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += pij * vv;
                    }
                }
            }
        }
        probs.push(p);
    }
    let y = matmul(&concat, w.wo, n_q, d, d);
    Ok((y, AttnInternals { q, k, v, probs, concat }))
}

/// Self-attention over one sequence: Y = concat_heads(softmax(QKᵀ/√d_k +
/// mask)·V)·W_out. Returns the output and the per-head attention matrices.
pub fn self_attention(
    x: &[f64],
    n: usize,
    w: &AttnWeights,
    causal: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
    let (y, internals) = attention_forward(w, x, n, x, n, causal)?;
    Ok((y, internals.probs))
}

/// Cross-modal attention: one modality provides queries, the other keys
/// and values. A has |F_q| rows and |F_kv| columns per head.
pub fn cross_attention(
    f_q: &[f64],
    n_q: usize,
    f_kv: &[f64],
    n_k: usize,
    w: &AttnWeights,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
    let (y, internals) = attention_forward(w, f_q, n_q, f_kv, n_k, false)?;
    Ok((y, internals.probs))
}
