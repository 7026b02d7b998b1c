//! Closed-world word-level vocabulary.
//!
//! The corpus grammar is closed: template words, punctuation, the genome
//! grammar symbols, digits 0-2, stage labels, and the panel's gene and
//! SNP identifiers. Reserved ids are fixed: <PAD>=0, <BOS>=1, <EOS>=2,
//! <IMG>=3.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::ModelError;
use crate::genome::prompt::{
    IMG_TOKEN, LABELS, TARGET_PREFIX, TEMPLATE_IMAGE_SENTENCE, TEMPLATE_PREFIX, TEMPLATE_SUFFIX,
};
use crate::genome::GenePanel;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMG: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        let expected = ["<PAD>", "<BOS>", "<EOS>", IMG_TOKEN];
        for (i, name) in expected.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*name) {
                return Err(ModelError::BadCheckpoint(format!(
                    "reserved token {i} must be {name}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(ModelError::BadCheckpoint(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Build the closed vocabulary for a gene panel.
    pub fn build(panel: &GenePanel) -> Self {
        let mut tokens: Vec<String> =
            vec!["<PAD>".into(), "<BOS>".into(), "<EOS>".into(), IMG_TOKEN.into()];
        let push = |word: &str, tokens: &mut Vec<String>| {
            if !tokens.iter().any(|t| t == word) {
                tokens.push(word.to_string());
            }
        };
        for section in [TEMPLATE_PREFIX, TEMPLATE_IMAGE_SENTENCE, TEMPLATE_SUFFIX, TARGET_PREFIX] {
            for word in section.split_whitespace() {
                if word != IMG_TOKEN {
                    push(word, &mut tokens);
                }
            }
        }
        for label in LABELS {
            push(label, &mut tokens);
        }
        for word in ["GENE", ":", "=", ";", "|", "0", "1", "2", "."] {
            push(word, &mut tokens);
        }
        for (gene, snps) in &panel.genes {
            push(gene, &mut tokens);
            for snp in snps {
                push(snp, &mut tokens);
            }
        }
        Vocab::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace-delimited word-level tokenization; the world is closed,
    /// so an unknown word is an error, not an OOV bucket.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| ModelError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, ModelError> {
        let words: Result<Vec<&str>, ModelError> = ids
            .iter()
            .map(|&id| {
                self.word(id).ok_or_else(|| ModelError::UnknownToken(format!("id {id}")))
            })
            .collect();
        Ok(words?.join(" "))
    }

    /// Newline-delimited tokens; line number = id.
    pub fn write_file(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}
