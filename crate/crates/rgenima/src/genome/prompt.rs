//! Prompt serialization: the genome text grammar and the instruction
//! template that couples genetic content with the image anchor.
//!
//! Every prompt is a single line of whitespace-separated tokens so the
//! closed-world tokenizer can split on spaces. Genome text follows the
//! grammar `GENE name : snp = v ; snp = v | GENE ...`; gene clauses are
//! joined by `|`, SNP entries inside a clause by `;`.

use super::{GeneBlock, GenomeError, SubjectGenome};

/// Reserved anchor token replaced by image embeddings at forward time.
pub const IMG_TOKEN: &str = "<IMG>";

pub const LABELS: [&str; 4] = ["NC", "SMC", "MCI", "AD"];

/// Instruction template, split around the genome insertion point and the
/// optional image sentence.
pub const TEMPLATE_PREFIX: &str = "A chat between a curious user and an artificial intelligence \
assistant . The assistant gives helpful , detailed , and polite answers . Genome Information :";

pub const TEMPLATE_IMAGE_SENTENCE: &str = "Brain Image : <IMG> .";

pub const TEMPLATE_SUFFIX: &str = "Your task is to classify the disease of the subject based on \
their Brain Image and Genome Information . Choose one of the following labels : [ NC , SMC , \
MCI , AD ] .";

/// Answer sentence prefix; decoding parses labels back out of it.
pub const TARGET_PREFIX: &str = "This subject is";

/// Serialized instruction record for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub text: String,
    /// Token index of the image anchor; present iff the record is multimodal.
    pub anchor_pos: Option<usize>,
    /// Supervised answer sentence, when a label is attached.
    pub target: Option<String>,
    pub subject_id: String,
}

/// Genome text per the grammar; fails on any missing genotype.
pub fn serialize_genome(g: &SubjectGenome) -> Result<String, GenomeError> {
    let mut clauses = Vec::with_capacity(g.blocks.len());
    for block in &g.blocks {
        let mut entries = Vec::with_capacity(block.snps.len());
        for (snp, cell) in &block.snps {
            let v = cell.ok_or_else(|| GenomeError::MissingGenotype { snp_id: snp.clone() })?;
            entries.push(format!("{snp} = {v}"));
        }
        clauses.push(format!("GENE {} : {}", block.gene, entries.join(" ; ")));
    }
    Ok(clauses.join(" | "))
}

/// Inverse of `serialize_genome`; accepts exactly the grammar it emits.
pub fn parse_genome(text: &str) -> Result<SubjectGenome, GenomeError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let (blocks, end) = parse_genome_tokens(&tokens, 0)?;
    if end != tokens.len() {
        return Err(GenomeError::Parse(format!("trailing tokens after genome at {end}")));
    }
    Ok(SubjectGenome { blocks })
}

/// Parse gene clauses starting at `start`; returns the blocks and the index
/// of the first token past the genome section. Used both by `parse_genome`
/// and by span labeling inside full prompts, where the template continues
/// after the genome.
pub fn parse_genome_tokens(
    tokens: &[&str],
    start: usize,
) -> Result<(Vec<GeneBlock>, usize), GenomeError> {
    let mut blocks = Vec::new();
    let mut i = start;
    loop {
        if tokens.get(i) != Some(&"GENE") {
            if blocks.is_empty() {
                return Err(GenomeError::Parse(format!("expected GENE at token {i}")));
            }
            return Ok((blocks, i));
        }
        let gene = *tokens
            .get(i + 1)
            .ok_or_else(|| GenomeError::Parse("missing gene name".into()))?;
        if tokens.get(i + 2) != Some(&":") {
            return Err(GenomeError::Parse(format!("expected ':' after gene {gene}")));
        }
        i += 3;
        let mut snps = Vec::new();
        loop {
            let snp = *tokens
                .get(i)
                .ok_or_else(|| GenomeError::Parse("missing snp id".into()))?;
            if tokens.get(i + 1) != Some(&"=") {
                return Err(GenomeError::Parse(format!("expected '=' after snp {snp}")));
            }
            let v = match tokens.get(i + 2) {
                Some(&"0") => 0u8,
                Some(&"1") => 1,
                Some(&"2") => 2,
                other => {
                    return Err(GenomeError::Parse(format!("bad genotype value {other:?}")))
                }
            };
            snps.push((snp.to_string(), Some(v)));
            i += 3;
            if tokens.get(i) == Some(&";") {
                i += 1;
            } else {
                break;
            }
        }
        blocks.push(GeneBlock { gene: gene.to_string(), snps });
        if tokens.get(i) == Some(&"|") {
            i += 1;
        } else {
            return Ok((blocks, i));
        }
    }
}

/// Instantiate the instruction template around a serialized genome.
pub fn build_prompt(
    genome_text: &str,
    multimodal: bool,
    label: Option<&str>,
    subject_id: &str,
) -> Result<PromptRecord, GenomeError> {
    assert!(!genome_text.is_empty(), "genome text must be nonempty");
    if let Some(l) = label {
        if !LABELS.contains(&l) {
            return Err(GenomeError::UnknownLabel(l.to_string()));
        }
    }
    let text = if multimodal {
        format!("{TEMPLATE_PREFIX} {genome_text} {TEMPLATE_IMAGE_SENTENCE} {TEMPLATE_SUFFIX}")
    } else {
        format!("{TEMPLATE_PREFIX} {genome_text} {TEMPLATE_SUFFIX}")
    };
    let anchor_pos = multimodal.then(|| {
        text.split_whitespace().position(|t| t == IMG_TOKEN).expect("anchor present")
    });
    let target = label.map(|l| format!("{TARGET_PREFIX} {l} ."));
    Ok(PromptRecord { text, anchor_pos, target, subject_id: subject_id.to_string() })
}

/// Parse the decoded answer sentence back to a label.
pub fn parse_target(text: &str) -> Option<&'static str> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "This" || tokens[1] != "subject" || tokens[2] != "is" {
        return None;
    }
    if tokens[4] != "." {
        return None;
    }
    LABELS.iter().find(|l| **l == tokens[3]).copied()
}

/// Per-token role inside a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptSpan {
    Template,
    /// Token belongs to the named gene's clause.
    Gene(String),
    /// The image anchor token.
    Anchor,
}

/// Label every prompt token: template words, gene-clause membership, and
/// the anchor. Clause separators `|` count as template.
pub fn label_prompt_spans(prompt_text: &str) -> Result<Vec<PromptSpan>, GenomeError> {
    let tokens: Vec<&str> = prompt_text.split_whitespace().collect();
    let prefix_len = TEMPLATE_PREFIX.split_whitespace().count();
    if tokens.len() < prefix_len {
        return Err(GenomeError::Parse("prompt shorter than template prefix".into()));
    }
    let (blocks, genome_end) = parse_genome_tokens(&tokens, prefix_len)?;
    let mut spans = vec![PromptSpan::Template; tokens.len()];
    let mut i = prefix_len;
    for block in &blocks {
        // GENE name : id = v (; id = v)*
        let clause_len = 3 + block.snps.len() * 3 + (block.snps.len() - 1);
        for s in spans.iter_mut().skip(i).take(clause_len) {
            *s = PromptSpan::Gene(block.gene.clone());
        }
        i += clause_len;
        if tokens.get(i) == Some(&"|") {
            i += 1; // separator stays template
        }
    }
    debug_assert_eq!(i, genome_end);
    for (j, t) in tokens.iter().enumerate() {
        if *t == IMG_TOKEN {
            spans[j] = PromptSpan::Anchor;
        }
    }
    Ok(spans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{GenePanel, GenotypeMatrix, Stage};

    fn genome() -> SubjectGenome {
        SubjectGenome {
            blocks: vec![
                GeneBlock {
                    gene: "G1".into(),
                    snps: vec![("rs1".into(), Some(2)), ("rs2".into(), Some(0))],
                },
                GeneBlock { gene: "G2".into(), snps: vec![("rs3".into(), Some(1))] },
            ],
        }
    }

    #[test]
    fn grammar_instances() {
        let single = SubjectGenome {
            blocks: vec![GeneBlock { gene: "G1".into(), snps: vec![("rs1".into(), Some(2))] }],
        };
        assert_eq!(serialize_genome(&single).unwrap(), "GENE G1 : rs1 = 2");
        assert_eq!(
            serialize_genome(&genome()).unwrap(),
            "GENE G1 : rs1 = 2 ; rs2 = 0 | GENE G2 : rs3 = 1"
        );
    }

    #[test]
    fn missing_genotype_is_an_error() {
        let g = SubjectGenome {
            blocks: vec![GeneBlock { gene: "G1".into(), snps: vec![("rs1".into(), None)] }],
        };
        assert!(matches!(serialize_genome(&g), Err(GenomeError::MissingGenotype { .. })));
    }

    #[test]
    fn serialize_parse_round_trip() {
        let g = genome();
        let text = serialize_genome(&g).unwrap();
        assert_eq!(parse_genome(&text).unwrap(), g);

        // random genomes round-trip too
        use rand::Rng;
        let mut rng = crate::rng::from_seed(5);
        for _ in 0..50 {
            let n_genes = rng.gen_range(1..6);
            let blocks: Vec<GeneBlock> = (0..n_genes)
                .map(|gi| GeneBlock {
                    gene: format!("GENE{gi:02}"),
                    snps: (0..rng.gen_range(1..5))
                        .map(|si| (format!("rs{gi}_{si}"), Some(rng.gen_range(0..=2u8))))
                        .collect(),
                })
                .collect();
            let g = SubjectGenome { blocks };
            assert_eq!(parse_genome(&serialize_genome(&g).unwrap()).unwrap(), g);
        }
    }

    #[test]
    fn prompt_anchor_rules() {
        let text = serialize_genome(&genome()).unwrap();
        let unimodal = build_prompt(&text, false, None, "s1").unwrap();
        assert!(!unimodal.text.contains(IMG_TOKEN));
        assert!(unimodal.anchor_pos.is_none());
        assert!(unimodal.target.is_none());

        let multimodal = build_prompt(&text, true, Some("AD"), "s1").unwrap();
        let count = multimodal
            .text
            .split_whitespace()
            .filter(|t| *t == IMG_TOKEN)
            .count();
        assert_eq!(count, 1);
        let pos = multimodal.anchor_pos.unwrap();
        assert_eq!(
            multimodal.text.split_whitespace().nth(pos).unwrap(),
            IMG_TOKEN
        );
        // target ends with the tokens [This, subject, is, AD, .]
        assert_eq!(multimodal.target.as_deref(), Some("This subject is AD ."));
        assert_eq!(parse_target(multimodal.target.as_deref().unwrap()), Some("AD"));

        assert!(matches!(
            build_prompt(&text, false, Some("XX"), "s1"),
            Err(GenomeError::UnknownLabel(_))
        ));
    }

    #[test]
    fn span_labels_partition_the_prompt() {
        let text = serialize_genome(&genome()).unwrap();
        let p = build_prompt(&text, true, Some("MCI"), "s1").unwrap();
        let spans = label_prompt_spans(&p.text).unwrap();
        let tokens: Vec<&str> = p.text.split_whitespace().collect();
        assert_eq!(spans.len(), tokens.len());
        assert_eq!(spans[p.anchor_pos.unwrap()], PromptSpan::Anchor);
        // G1 clause: GENE G1 : rs1 = 2 ; rs2 = 0 -> 10 tokens
        let g1: Vec<usize> = spans
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == PromptSpan::Gene("G1".into()))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(g1.len(), 10);
        assert_eq!(tokens[g1[0]], "GENE");
        assert_eq!(tokens[g1[1]], "G1");
        let g2 = spans.iter().filter(|s| **s == PromptSpan::Gene("G2".into())).count();
        assert_eq!(g2, 6); // GENE G2 : rs3 = 1
        // the '|' separator stays template
        let sep = tokens.iter().position(|t| *t == "|").unwrap();
        assert_eq!(spans[sep], PromptSpan::Template);
    }

    #[test]
    fn spans_work_for_matrix_derived_genomes() {
        let panel = GenePanel::new(vec![
            ("APOE".into(), vec!["rs429358".into(), "rs7412".into()]),
            ("BIN1".into(), vec!["rs744373".into()]),
        ])
        .unwrap();
        let m = GenotypeMatrix {
            subjects: vec!["s9".into()],
            stages: vec![Some(Stage::Mci)],
            columns: panel.flat_columns(),
            rows: vec![vec![Some(1), Some(2), Some(0)]],
        };
        let text = serialize_genome(&m.subject_genome(0)).unwrap();
        let p = build_prompt(&text, false, Some("MCI"), "s9").unwrap();
        let spans = label_prompt_spans(&p.text).unwrap();
        assert!(spans.iter().any(|s| *s == PromptSpan::Gene("APOE".into())));
        assert!(spans.iter().any(|s| *s == PromptSpan::Gene("BIN1".into())));
        assert!(!spans.iter().any(|s| *s == PromptSpan::Anchor));
    }
}
