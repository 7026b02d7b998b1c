//! Greedy autoregressive decoding and label parsing.

use super::forward::{forward_multimodal, ModelInput, SeqSpan};
use super::vocab::{Vocab, EOS};
use super::{ModelError, Params};
use crate::genome::prompt::parse_target;

/// Decoding outcome: a parsed stage label, or an unparseable generation
/// (counted as wrong in evaluation, never an error).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Label(&'static str),
    Unparseable,
}

/// Argmax decoding until <EOS> or `max_len` generated tokens; ties break
/// toward the lowest token id. The label is parsed from the answer
/// pattern `This subject is <label> .`.
pub fn greedy_decode(
    prompt: &ModelInput,
    h_image: Option<&[f64]>,
    params: &Params,
    max_len: usize,
    vocab: &Vocab,
) -> Result<Verdict, ModelError> {
    let mut running = ModelInput {
        tokens: prompt.tokens.clone(),
        roles: prompt.roles.clone(),
        anchor_index: prompt.anchor_index,
        n_targets: 0,
    };
    let mut generated: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let trace = forward_multimodal(&running, h_image, params)?;
        let v = params.config.vocab_size;
        let row = &trace.logits[(trace.seq_len - 1) * v..trace.seq_len * v];
        let mut best = 0usize;
        for (j, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = j;
            }
        }
        let tok = best as u32;
        if tok == EOS {
            break;
        }
        generated.push(tok);
        running.tokens.push(tok);
        running.roles.push(SeqSpan::Target);
    }
    let text = vocab.detokenize(&generated)?;
    Ok(match parse_target(&text) {
        Some(label) => Verdict::Label(label),
        None => Verdict::Unparseable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::prompt::{build_prompt, serialize_genome};
    use crate::genome::synth::SynthSpec;
    use crate::genome::{GeneBlock, SubjectGenome};
    use crate::model::forward::build_model_input;
    use crate::model::ModelConfig;

    fn fixture() -> (Vocab, ModelInput, ModelConfig) {
        let panel = SynthSpec::default_panel(2, 1);
        let vocab = Vocab::build(&panel);
        let g = SubjectGenome {
            blocks: vec![
                GeneBlock { gene: "GENE01".into(), snps: vec![("rs01_1".into(), Some(1))] },
                GeneBlock { gene: "GENE02".into(), snps: vec![("rs02_1".into(), Some(2))] },
            ],
        };
        let text = serialize_genome(&g).unwrap();
        let prompt = build_prompt(&text, false, None, "t").unwrap();
        let input = build_model_input(&prompt.text, None, &vocab).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_text: 1,
            n_layers_rit: 1,
            patch_size: 2,
            n_rois: 2,
            max_seq_len: 160,
            vocab_size: vocab.len(),
        };
        (vocab, input, cfg)
    }

    /// Zero every weight, then drive the LM head from one-hot positional
    /// rows so each decode step emits a chosen token deterministically.
    fn rig_sequence(cfg: &ModelConfig, start_pos: usize, tokens: &[u32]) -> Params {
        let mut p = Params::zeros(cfg);
        p.final_ln_g.fill(1.0);
        for l in &mut p.text_layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
        }
        let d = cfg.d_model;
        assert!(tokens.len() <= d);
        for (k, &tok) in tokens.iter().enumerate() {
            let pos = start_pos + k;
            p.pos_emb[pos * d + k] = 1.0;
            p.lm_head_w[k * cfg.vocab_size + tok as usize] = 100.0;
        }
        p
    }

    #[test]
    fn rigged_head_emits_exact_label() {
        let (vocab, input, cfg) = fixture();
        let want = vocab.tokenize("This subject is AD .").unwrap();
        let mut seq = want.clone();
        seq.push(EOS);
        let params = rig_sequence(&cfg, input.tokens.len() - 1, &seq);
        let verdict = greedy_decode(&input, None, &params, 8, &vocab).unwrap();
        assert_eq!(verdict, Verdict::Label("AD"));
    }

    #[test]
    fn max_len_zero_is_unparseable() {
        let (vocab, input, cfg) = fixture();
        let params = Params::init(&cfg, 3).unwrap();
        let verdict = greedy_decode(&input, None, &params, 0, &vocab).unwrap();
        assert_eq!(verdict, Verdict::Unparseable);
    }

    #[test]
    fn decoding_is_deterministic() {
        let (vocab, input, cfg) = fixture();
        let params = Params::init(&cfg, 5).unwrap();
        let a = greedy_decode(&input, None, &params, 6, &vocab).unwrap();
        let b = greedy_decode(&input, None, &params, 6, &vocab).unwrap();
        assert_eq!(a, b);
    }
}
