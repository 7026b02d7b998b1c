//! Weight tensors, initialization, and the RGMA checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::rng;

pub const RGMA_MAGIC: &[u8; 4] = b"RGMA";
pub const RGMA_VERSION: u16 = 1;

/// One transformer block's weights. Attention projections are [d,d]
/// (columns chunked per head), feed-forward expands to 4d.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dff = cfg.d_ff();
        LayerParams {
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * dff],
            b1: vec![0.0; dff],
            w2: vec![0.0; dff * d],
            b2: vec![0.0; d],
        }
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub text_layers: Vec<LayerParams>,
    pub final_ln_g: Vec<f64>,
    pub final_ln_b: Vec<f64>,
    pub lm_head_w: Vec<f64>,
    pub lm_head_b: Vec<f64>,
    pub patch_w: Vec<f64>,
    pub patch_b: Vec<f64>,
    pub rit_pos: Vec<f64>,
    pub rit_layers: Vec<LayerParams>,
    pub conn_w: Vec<f64>,
    pub conn_b: Vec<f64>,
}

impl Params {
    /// All-zero tensors; the gradient and optimizer-moment container.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        Params {
            config: *cfg,
            tok_emb: vec![0.0; v * d],
            pos_emb: vec![0.0; cfg.max_seq_len * d],
            text_layers: (0..cfg.n_layers_text).map(|_| LayerParams::zeros(cfg)).collect(),
            final_ln_g: vec![0.0; d],
            final_ln_b: vec![0.0; d],
            lm_head_w: vec![0.0; d * v],
            lm_head_b: vec![0.0; v],
            patch_w: vec![0.0; cfg.patch_flat() * d],
            patch_b: vec![0.0; d],
            rit_pos: vec![0.0; cfg.n_rois * d],
            rit_layers: (0..cfg.n_layers_rit).map(|_| LayerParams::zeros(cfg)).collect(),
            conn_w: vec![0.0; d * d],
            conn_b: vec![0.0; d],
        }
    }

    /// Seed-deterministic initialization: Xavier-uniform projections,
    /// 0.02-scaled normal embeddings, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut p = Params::zeros(cfg);
        for (name, tensor, kind) in p.tensor_specs_mut() {
            let mut r = rng::stream(seed, "init", fnv(&name));
            match kind {
                TensorKind::Projection { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for w in tensor.iter_mut() {
                        *w = r.gen_range(-bound..bound);
                    }
                }
                TensorKind::Embedding => {
                    for w in tensor.iter_mut() {
                        *w = 0.02 * gauss(&mut r);
                    }
                }
                TensorKind::Gain => tensor.fill(1.0),
                TensorKind::Bias => tensor.fill(0.0),
            }
        }
        Ok(p)
    }

    /// Named views over every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.text_layers.iter().enumerate() {
            for (suffix, t) in layer_fields(l) {
                out.push((format!("text.{i}.{suffix}"), t));
            }
        }
        out.push(("final_ln_g".into(), &self.final_ln_g));
        out.push(("final_ln_b".into(), &self.final_ln_b));
        out.push(("lm_head_w".into(), &self.lm_head_w));
        out.push(("lm_head_b".into(), &self.lm_head_b));
        out.push(("patch_w".into(), &self.patch_w));
        out.push(("patch_b".into(), &self.patch_b));
        out.push(("rit_pos".into(), &self.rit_pos));
        for (i, l) in self.rit_layers.iter().enumerate() {
            for (suffix, t) in layer_fields(l) {
                out.push((format!("rit.{i}.{suffix}"), t));
            }
        }
        out.push(("conn_w".into(), &self.conn_w));
        out.push(("conn_b".into(), &self.conn_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.tensor_specs_mut().into_iter().map(|(n, t, _)| (n, t)).collect()
    }

    /// True when RiT-side tensors (patch projection, RiT positions and
    /// blocks) own the named tensor; these freeze after stage-1 training.
    pub fn is_rit_tensor(name: &str) -> bool {
        name.starts_with("rit.") || name == "patch_w" || name == "patch_b" || name == "rit_pos"
    }

    fn tensor_specs_mut(&mut self) -> Vec<(String, &mut Vec<f64>, TensorKind)> {
        let cfg = self.config;
        let d = cfg.d_model;
        let dff = cfg.d_ff();
        let v = cfg.vocab_size;
        let mut out: Vec<(String, &mut Vec<f64>, TensorKind)> = vec![
            ("tok_emb".into(), &mut self.tok_emb, TensorKind::Embedding),
            ("pos_emb".into(), &mut self.pos_emb, TensorKind::Embedding),
        ];
        for (i, l) in self.text_layers.iter_mut().enumerate() {
            for (suffix, t, kind) in layer_fields_mut(l, d, dff) {
                out.push((format!("text.{i}.{suffix}"), t, kind));
            }
        }
        out.push(("final_ln_g".into(), &mut self.final_ln_g, TensorKind::Gain));
        out.push(("final_ln_b".into(), &mut self.final_ln_b, TensorKind::Bias));
        out.push((
            "lm_head_w".into(),
            &mut self.lm_head_w,
            TensorKind::Projection { fan_in: d, fan_out: v },
        ));
        out.push(("lm_head_b".into(), &mut self.lm_head_b, TensorKind::Bias));
        out.push((
            "patch_w".into(),
            &mut self.patch_w,
            TensorKind::Projection { fan_in: cfg.patch_flat(), fan_out: d },
        ));
        out.push(("patch_b".into(), &mut self.patch_b, TensorKind::Bias));
        out.push(("rit_pos".into(), &mut self.rit_pos, TensorKind::Embedding));
        for (i, l) in self.rit_layers.iter_mut().enumerate() {
            for (suffix, t, kind) in layer_fields_mut(l, d, dff) {
                out.push((format!("rit.{i}.{suffix}"), t, kind));
            }
        }
        out.push((
            "conn_w".into(),
            &mut self.conn_w,
            TensorKind::Projection { fan_in: d, fan_out: d },
        ));
        out.push(("conn_b".into(), &mut self.conn_b, TensorKind::Bias));
        out
    }

    pub fn assert_finite(&self) -> Result<(), ModelError> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteActivation(name));
            }
        }
        Ok(())
    }

    /// RGMA checkpoint: magic, version, config, then named tensors
    /// (u16 name length + UTF-8 name + u8 rank + u32 dims + f64 LE payload).
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(RGMA_MAGIC);
        bytes.extend_from_slice(&RGMA_VERSION.to_le_bytes());
        for field in [
            self.config.d_model,
            self.config.n_heads,
            self.config.n_layers_text,
            self.config.n_layers_rit,
            self.config.patch_size,
            self.config.n_rois,
            self.config.max_seq_len,
            self.config.vocab_size,
        ] {
            bytes.extend_from_slice(&(field as u32).to_le_bytes());
        }
        let tensors = self.tensors();
        bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(1); // rank: flat tensors with recorded length
            bytes.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *off + n > bytes.len() {
                return Err(ModelError::BadCheckpoint(format!("truncated at byte {}", *off)));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != RGMA_MAGIC {
            return Err(ModelError::BadCheckpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if version != RGMA_VERSION {
            return Err(ModelError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let mut fields = [0usize; 8];
        for f in &mut fields {
            *f = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        }
        let cfg = ModelConfig {
            d_model: fields[0],
            n_heads: fields[1],
            n_layers_text: fields[2],
            n_layers_rit: fields[3],
            patch_size: fields[4],
            n_rois: fields[5],
            max_seq_len: fields[6],
            vocab_size: fields[7],
        };
        cfg.validate()?;
        let n_tensors = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut p = Params::zeros(&cfg);
        let mut named: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| ModelError::BadCheckpoint("non-UTF-8 tensor name".into()))?;
            let rank = take(&mut off, 1)?[0] as usize;
            let mut len = 1usize;
            for _ in 0..rank {
                len *= u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            }
            let mut t = Vec::with_capacity(len);
            for _ in 0..len {
                t.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            named.push((name, t));
        }
        for (name, tensor) in p.tensors_mut() {
            let (_, loaded) = named
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing tensor {name}")))?;
            if loaded.len() != tensor.len() {
                return Err(ModelError::BadCheckpoint(format!(
                    "tensor {name}: {} values, expected {}",
                    loaded.len(),
                    tensor.len()
                )));
            }
            tensor.copy_from_slice(loaded);
        }
        p.assert_finite()?;
        Ok(p)
    }
}

enum TensorKind {
    Projection { fan_in: usize, fan_out: usize },
    Embedding,
    Gain,
    Bias,
}

fn layer_fields(l: &LayerParams) -> Vec<(&'static str, &Vec<f64>)> {
    vec![
        ("wq", &l.wq),
        ("wk", &l.wk),
        ("wv", &l.wv),
        ("wo", &l.wo),
        ("ln1_g", &l.ln1_g),
        ("ln1_b", &l.ln1_b),
        ("ln2_g", &l.ln2_g),
        ("ln2_b", &l.ln2_b),
        ("w1", &l.w1),
        ("b1", &l.b1),
        ("w2", &l.w2),
        ("b2", &l.b2),
    ]
}

fn layer_fields_mut(
    l: &mut LayerParams,
    d: usize,
    dff: usize,
) -> Vec<(&'static str, &mut Vec<f64>, TensorKind)> {
    vec![
        ("wq", &mut l.wq, TensorKind::Projection { fan_in: d, fan_out: d }),
        ("wk", &mut l.wk, TensorKind::Projection { fan_in: d, fan_out: d }),
        ("wv", &mut l.wv, TensorKind::Projection { fan_in: d, fan_out: d }),
        ("wo", &mut l.wo, TensorKind::Projection { fan_in: d, fan_out: d }),
        ("ln1_g", &mut l.ln1_g, TensorKind::Gain),
        ("ln1_b", &mut l.ln1_b, TensorKind::Bias),
        ("ln2_g", &mut l.ln2_g, TensorKind::Gain),
        ("ln2_b", &mut l.ln2_b, TensorKind::Bias),
        ("w1", &mut l.w1, TensorKind::Projection { fan_in: d, fan_out: dff }),
        ("b1", &mut l.b1, TensorKind::Bias),
        ("w2", &mut l.w2, TensorKind::Projection { fan_in: dff, fan_out: d }),
        ("b2", &mut l.b2, TensorKind::Bias),
    ]
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn gauss<R: Rng>(r: &mut R) -> f64 {
    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
