//! Two-stage training.
//!
//! Stage 1 trains the RiT encoder on 4-way stage classification through a
//! temporary mean-pool linear head. Stage 2 freezes the RiT weights
//! bit-exactly (asserted) and trains embeddings, decoder, and connector
//! on the generative NLL objective. Adam moments 0.9/0.999, mean-reduction
//! loss, everything sequential and seed-deterministic.

use std::collections::HashMap;

use rand::Rng;

use super::backward::{backward_into, block_backward};
use super::forward::{
    block_forward, forward_with_cache, nll_loss, rit_encode, roi_patch_embed, ModelInput,
};
use super::linalg::{add_inplace, matmul_at, softmax_row};
use super::{ModelConfig, ModelError, Params};
use crate::genome::Stage;
use crate::parcel::RoiPatchSet;
use crate::rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub stage1_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            stage1_epochs: 10,
            epochs: 4,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// One training record: a tokenized input plus the subject's patch set
/// when the record is anchored.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub subject_id: String,
    pub stage: Stage,
    pub input: ModelInput,
    pub patch_set: Option<RoiPatchSet>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

struct Adam {
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    fn new(cfg: &ModelConfig) -> Self {
        Adam { m: Params::zeros(cfg), v: Params::zeros(cfg), t: 0 }
    }

    /// One update over the tensors selected by `include`.
    fn step<F: Fn(&str) -> bool>(
        &mut self,
        params: &mut Params,
        grads: &Params,
        tc: &TrainConfig,
        include: F,
    ) {
        self.t += 1;
        let (b1, b2) = tc.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let grad_tensors = grads.tensors();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        for (pi, (name, w)) in params.tensors_mut().into_iter().enumerate() {
            if !include(&name) {
                continue;
            }
            let g = grad_tensors[pi].1;
            let m = &mut m_tensors[pi].1;
            let v = &mut v_tensors[pi].1;
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= tc.lr * mhat / (vhat.sqrt() + tc.adam_eps);
            }
        }
    }
}

fn adam_update_vec(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    tc: &TrainConfig,
) {
    let (b1, b2) = tc.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        w[i] -= tc.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + tc.adam_eps);
    }
}

fn shuffled_indices<Rn: Rng>(n: usize, r: &mut Rn) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Stage 1: train RiT weights on 4-way classification with a temporary
/// mean-pool linear head; returns the per-step loss curve.
fn train_stage1(
    params: &mut Params,
    items: &[&TrainItem],
    tc: &TrainConfig,
) -> Result<Vec<f64>, ModelError> {
    let cfg = params.config;
    let d = cfg.d_model;
    let n_r = cfg.n_rois;
    // temporary head, dropped after this stage
    let mut head_rng = rng::stream(tc.seed, "stage1-head", 0);
    let bound = (6.0 / (d + 4) as f64).sqrt();
    let mut w_cls: Vec<f64> = (0..d * 4).map(|_| head_rng.gen_range(-bound..bound)).collect();
    let mut b_cls = vec![0.0; 4];
    let mut adam = Adam::new(&cfg);
    let (mut m_w, mut v_w) = (vec![0.0; d * 4], vec![0.0; d * 4]);
    let (mut m_b, mut v_b) = (vec![0.0; 4], vec![0.0; 4]);

    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..tc.stage1_epochs {
        let mut order_rng = rng::stream(tc.seed, "stage1-epoch", epoch as u64);
        let order = shuffled_indices(items.len(), &mut order_rng);
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let mut grads = Params::zeros(&cfg);
            let mut gw = vec![0.0; d * 4];
            let mut gb = vec![0.0; 4];
            let mut batch_loss = 0.0;
            let weight = 1.0 / chunk.len() as f64;
            for &ix in chunk {
                let item = items[ix];
                let ps = item.patch_set.as_ref().expect("stage-1 items are anchored");
                // forward: embed -> RiT blocks -> mean pool -> head
                let mut x = roi_patch_embed(ps, params)?;
                add_inplace(&mut x, &params.rit_pos);
                let flat = cfg.patch_flat();
                let mut std_patches = vec![0.0; n_r * flat];
                for (i, patch) in ps.patches.iter().enumerate() {
                    std_patches[i * flat..(i + 1) * flat]
                        .copy_from_slice(&super::forward::standardize(patch));
                }
                let x0 = x.clone();
                let mut caches = Vec::with_capacity(cfg.n_layers_rit);
                for layer in &params.rit_layers {
                    let (next, cache) = block_forward(&x, n_r, layer, &cfg, false)?;
                    x = next;
                    caches.push(cache);
                }
                let mut pooled = vec![0.0; d];
                for i in 0..n_r {
                    for j in 0..d {
                        pooled[j] += x[i * d + j] / n_r as f64;
                    }
                }
                let mut logits = vec![0.0; 4];
                for c in 0..4 {
                    logits[c] = b_cls[c]
                        + pooled.iter().enumerate().map(|(j, &p)| p * w_cls[j * 4 + c]).sum::<f64>();
                }
                let mut probs = logits.clone();
                softmax_row(&mut probs);
                let y = item.stage.index();
                batch_loss -= probs[y].ln() * weight;

                // backward
                let mut dlogits = probs;
                dlogits[y] -= 1.0;
                for dl in dlogits.iter_mut() {
                    *dl *= weight;
                }
                for j in 0..d {
                    for c in 0..4 {
                        gw[j * 4 + c] += pooled[j] * dlogits[c];
                    }
                }
                add_inplace(&mut gb, &dlogits);
                let mut dpooled = vec![0.0; d];
                for (j, dp) in dpooled.iter_mut().enumerate() {
                    *dp = (0..4).map(|c| dlogits[c] * w_cls[j * 4 + c]).sum();
                }
                let mut dx = vec![0.0; n_r * d];
                for i in 0..n_r {
                    for j in 0..d {
                        dx[i * d + j] = dpooled[j] / n_r as f64;
                    }
                }
                for (i, layer) in params.rit_layers.iter().enumerate().rev() {
                    let probs = caches[i].attn.probs.clone();
                    dx = block_backward(
                        &dx,
                        &caches[i],
                        &probs,
                        layer,
                        &mut grads.rit_layers[i],
                        &cfg,
                        n_r,
                    );
                }
                add_inplace(&mut grads.rit_pos, &dx);
                grads
                    .patch_w
                    .iter_mut()
                    .zip(matmul_at(&std_patches, &dx, n_r, flat, d))
                    .for_each(|(g, v)| *g += v);
                for i in 0..n_r {
                    for j in 0..d {
                        grads.patch_b[j] += dx[i * d + j];
                    }
                }
                let _ = x0;
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::DivergedLoss(step as usize));
            }
            adam.step(params, &grads, tc, Params::is_rit_tensor);
            step += 1;
            adam_update_vec(&mut w_cls, &gw, &mut m_w, &mut v_w, step, tc);
            adam_update_vec(&mut b_cls, &gb, &mut m_b, &mut v_b, step, tc);
            losses.push(batch_loss);
        }
    }
    Ok(losses)
}

/// Full two-stage training over prepared items.
pub fn train(
    items: &[TrainItem],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if items.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    cfg.validate()?;
    let mut params = Params::init(cfg, rng::derive_seed(tc.seed, "params-init", 0))?;

    // stage 1 sees one anchored item per subject
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let stage1_items: Vec<&TrainItem> = items
        .iter()
        .filter(|it| it.patch_set.is_some())
        .filter(|it| seen.insert(it.subject_id.as_str(), ()).is_none())
        .collect();
    let stage1_losses = if stage1_items.is_empty() {
        Vec::new()
    } else {
        train_stage1(&mut params, &stage1_items, tc)?
    };

    // freeze: snapshot RiT tensors, assert bit-exact equality afterwards
    let rit_snapshot: Vec<(String, Vec<f64>)> = params
        .tensors()
        .into_iter()
        .filter(|(n, _)| Params::is_rit_tensor(n))
        .map(|(n, t)| (n, t.clone()))
        .collect();

    // RiT activations are fixed in stage 2; cache them once per subject.
    // The connector keeps training, so its output is recomputed per step
    // from the cached block-stack output.
    let mut rit_cache_by_subject: HashMap<String, super::forward::RitCache> = HashMap::new();
    for it in items {
        if let Some(ps) = &it.patch_set {
            if !rit_cache_by_subject.contains_key(&it.subject_id) {
                let (_, cache) = rit_encode(ps, &params)?;
                rit_cache_by_subject.insert(it.subject_id.clone(), cache);
            }
        }
    }
    let connector_out = |rit_out: &[f64], params: &Params| -> Vec<f64> {
        let d = cfg.d_model;
        let n_r = cfg.n_rois;
        let mut h = super::linalg::matmul(rit_out, &params.conn_w, n_r, d, d);
        for i in 0..n_r {
            for j in 0..d {
                h[i * d + j] += params.conn_b[j];
            }
        }
        h
    };

    let mut adam = Adam::new(cfg);
    let mut stage2_losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut order_rng = rng::stream(tc.seed, "stage2-epoch", epoch as u64);
        let order = shuffled_indices(items.len(), &mut order_rng);
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let mut grads = Params::zeros(cfg);
            let mut batch_loss = 0.0;
            let weight = 1.0 / chunk.len() as f64;
            for &ix in chunk {
                let item = &items[ix];
                let cached = item.patch_set.as_ref().map(|_| {
                    rit_cache_by_subject
                        .get(&item.subject_id)
                        .expect("rit cache covers anchored subjects")
                });
                let h_image = cached.map(|rc| connector_out(&rc.rit_out, &params));
                let (trace, mut cache) =
                    forward_with_cache(&item.input, h_image.as_deref(), &params)?;
                if let Some(rit_cache) = cached {
                    cache.rit = Some(rit_cache.clone());
                }
                batch_loss += nll_loss(&trace, &trace.targets)? * weight;
                backward_into(&trace, &cache, &params, &mut grads, weight)?;
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::DivergedLoss(step));
            }
            adam.step(&mut params, &grads, tc, |name| !Params::is_rit_tensor(name));
            stage2_losses.push(batch_loss);
            step += 1;
        }
    }

    for (name, snap) in &rit_snapshot {
        let current = params
            .tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .expect("tensor registry is stable");
        assert_eq!(&current, snap, "stage-1 tensor {name} changed during stage 2");
    }

    Ok(TrainOutcome { params, stage1_losses, stage2_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::prompt::{build_prompt, serialize_genome};
    use crate::genome::synth::SynthSpec;
    use crate::genome::{GeneBlock, SubjectGenome};
    use crate::model::forward::build_model_input;
    use crate::model::vocab::Vocab;

    fn items(vocab: &Vocab, cfg: &ModelConfig) -> Vec<TrainItem> {
        let mut r = crate::rng::from_seed(9);
        [("s1", Stage::Ad, 2u8), ("s2", Stage::Nc, 0u8)]
            .into_iter()
            .map(|(id, stage, g)| {
                let genome = SubjectGenome {
                    blocks: vec![
                        GeneBlock { gene: "GENE01".into(), snps: vec![("rs01_1".into(), Some(g))] },
                        GeneBlock { gene: "GENE02".into(), snps: vec![("rs02_1".into(), Some(1))] },
                    ],
                };
                let text = serialize_genome(&genome).unwrap();
                let prompt = build_prompt(&text, true, Some(stage.as_str()), id).unwrap();
                let input =
                    build_model_input(&prompt.text, prompt.target.as_deref(), vocab).unwrap();
                let patch_set = RoiPatchSet {
                    subject_id: id.into(),
                    patch_size: cfg.patch_size as u32,
                    patches: (0..cfg.n_rois)
                        .map(|_| {
                            (0..cfg.patch_flat())
                                .map(|_| r.gen_range(-1.0..1.0) + f64::from(g))
                                .collect()
                        })
                        .collect(),
                    present_mask: vec![true; cfg.n_rois],
                };
                TrainItem { subject_id: id.into(), stage, input, patch_set: Some(patch_set) }
            })
            .collect()
    }

    fn tiny_cfg(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_text: 1,
            n_layers_rit: 1,
            patch_size: 2,
            n_rois: 2,
            max_seq_len: 160,
            vocab_size: vocab.len(),
        }
    }

    #[test]
    fn zero_lr_leaves_params_at_init() {
        let vocab = Vocab::build(&SynthSpec::default_panel(2, 1));
        let cfg = tiny_cfg(&vocab);
        let tc = TrainConfig {
            lr: 0.0,
            stage1_epochs: 2,
            epochs: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&items(&vocab, &cfg), &cfg, &tc).unwrap();
        let init = Params::init(&cfg, rng::derive_seed(5, "params-init", 0)).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let vocab = Vocab::build(&SynthSpec::default_panel(2, 1));
        let cfg = tiny_cfg(&vocab);
        let tc = TrainConfig {
            stage1_epochs: 2,
            epochs: 3,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&items(&vocab, &cfg), &cfg, &tc).unwrap();
        let b = train(&items(&vocab, &cfg), &cfg, &tc).unwrap();
        assert_eq!(a.stage1_losses, b.stage1_losses);
        assert_eq!(a.stage2_losses, b.stage2_losses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn memorizes_a_single_subject() {
        let vocab = Vocab::build(&SynthSpec::default_panel(2, 1));
        let cfg = tiny_cfg(&vocab);
        let all = items(&vocab, &cfg);
        let one = vec![all[0].clone()];
        let tc = TrainConfig {
            lr: 5e-3,
            stage1_epochs: 5,
            epochs: 200,
            batch_size: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&one, &cfg, &tc).unwrap();
        let last = *out.stage2_losses.last().unwrap();
        assert!(last < 0.05, "memorization loss {last}");
    }
}
