//! Dataset assembly: gene-order permutation augmentation and the three
//! data configurations (gene-only, image-gene, mixture).
//!
//! Splitting is subject-level and stage-stratified: all augmented copies
//! of one subject land on the same side, so near-duplicate prompts can
//! never straddle the train/test boundary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{build_prompt, serialize_genome};
use super::{GenomeError, Stage, SubjectGenome};
use crate::rng;

/// Permute gene-block order with a seed-determined Fisher-Yates shuffle;
/// intra-block SNP order and values never change.
pub fn permute_gene_blocks(g: &SubjectGenome, seed: u64) -> SubjectGenome {
    let n = g.blocks.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::from_seed(seed);
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    SubjectGenome { blocks: order.into_iter().map(|i| g.blocks[i].clone()).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetMode {
    GeneOnly,
    ImageGene,
    Mixture,
}

impl DatasetMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gene_only" => Some(DatasetMode::GeneOnly),
            "image_gene" => Some(DatasetMode::ImageGene),
            "mixture" => Some(DatasetMode::Mixture),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetMode::GeneOnly => "gene_only",
            DatasetMode::ImageGene => "image_gene",
            DatasetMode::Mixture => "mixture",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Fraction of each stage's subjects held out for the test side.
    pub test_subject_fraction: f64,
}

/// One serialized training/evaluation record. A single JSON line on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub subject_id: String,
    pub prompt: String,
    pub target: String,
    pub anchored: bool,
    pub patch_set: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

/// Subject-side input to the dataset builder.
#[derive(Debug, Clone)]
pub struct CohortSubject {
    pub id: String,
    pub stage: Stage,
    pub genome: SubjectGenome,
    pub patch_set_path: Option<String>,
}

/// Build augmented train/test record sets under one of the three modes.
pub fn build_dataset(
    subjects: &[CohortSubject],
    cfg: &DatasetConfig,
) -> Result<Dataset, GenomeError> {
    if subjects.is_empty() {
        return Err(GenomeError::InsufficientSubjects("no subjects".into()));
    }
    let mut sorted: Vec<&CohortSubject> = subjects.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    {
        let mut seen = BTreeSet::new();
        for s in &sorted {
            if !seen.insert(&s.id) {
                return Err(GenomeError::Parse(format!("duplicate subject id {}", s.id)));
            }
        }
    }

    // stage-stratified subject split
    let mut train_subjects: Vec<&CohortSubject> = Vec::new();
    let mut test_subjects: Vec<&CohortSubject> = Vec::new();
    for (si, stage) in super::STAGES.iter().enumerate() {
        let mut members: Vec<&CohortSubject> =
            sorted.iter().copied().filter(|s| s.stage == *stage).collect();
        if members.is_empty() {
            continue;
        }
        let mut r = rng::stream(cfg.seed, "subject-split", si as u64);
        for i in (1..members.len()).rev() {
            let j = r.gen_range(0..=i);
            members.swap(i, j);
        }
        let n_test = ((members.len() as f64 * cfg.test_subject_fraction).ceil() as usize)
            .min(members.len().saturating_sub(1));
        test_subjects.extend(members.iter().take(n_test));
        train_subjects.extend(members.iter().skip(n_test));
    }
    train_subjects.sort_by(|a, b| a.id.cmp(&b.id));
    test_subjects.sort_by(|a, b| a.id.cmp(&b.id));
    if train_subjects.is_empty() {
        return Err(GenomeError::InsufficientSubjects("empty train side".into()));
    }
    if cfg.test_count > 0 && test_subjects.is_empty() {
        return Err(GenomeError::InsufficientSubjects(
            "test records requested but no subjects could be held out".into(),
        ));
    }

    let train = build_side(&train_subjects, cfg, cfg.train_count, "train")?;
    let test = build_side(&test_subjects, cfg, cfg.test_count, "test")?;
    Ok(Dataset { train, test })
}

fn build_side(
    subjects: &[&CohortSubject],
    cfg: &DatasetConfig,
    count: usize,
    side: &str,
) -> Result<Vec<DatasetRecord>, GenomeError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if subjects.is_empty() {
        return Err(GenomeError::InsufficientSubjects(format!("no {side} subjects")));
    }
    let n_paired = match cfg.mode {
        DatasetMode::GeneOnly => 0,
        DatasetMode::ImageGene => count,
        DatasetMode::Mixture => count.div_ceil(2),
    };
    let mut records = Vec::with_capacity(count);
    let mut seen_orders: Vec<BTreeSet<Vec<usize>>> =
        vec![BTreeSet::new(); subjects.len()];
    let mut copy_counter = vec![0u64; subjects.len()];
    for k in 0..count {
        let si = k % subjects.len();
        let subject = subjects[si];
        let anchored = k < n_paired;
        if anchored && subject.patch_set_path.is_none() {
            return Err(GenomeError::MissingPatchSet(subject.id.clone()));
        }
        // draw a block order not yet used for this subject; bounded retry,
        // then accept repeats (single-gene panels admit only one order)
        let genome = {
            let mut chosen = None;
            for _ in 0..64 {
                let c = copy_counter[si];
                copy_counter[si] += 1;
                let seed =
                    rng::derive_seed(cfg.seed, &format!("augment-{side}-{}", subject.id), c);
                let g = permute_gene_blocks(&subject.genome, seed);
                let order: Vec<usize> = g
                    .blocks
                    .iter()
                    .map(|b| {
                        subject
                            .genome
                            .blocks
                            .iter()
                            .position(|ob| ob.gene == b.gene)
                            .expect("permutation preserves genes")
                    })
                    .collect();
                if seen_orders[si].insert(order) {
                    chosen = Some(g);
                    break;
                }
                chosen = Some(g);
            }
            chosen.expect("at least one draw")
        };
        let text = serialize_genome(&genome)?;
        let prompt =
            build_prompt(&text, anchored, Some(subject.stage.as_str()), &subject.id)?;
        records.push(DatasetRecord {
            subject_id: subject.id.clone(),
            prompt: prompt.text,
            target: prompt.target.expect("label supplied"),
            anchored,
            patch_set: if anchored { subject.patch_set_path.clone() } else { None },
        });
    }
    // mixture interleaves paired and unpaired records by a seeded shuffle
    if cfg.mode == DatasetMode::Mixture {
        let mut r = rng::stream(cfg.seed, "mixture-shuffle", u64::from(side == "test"));
        for i in (1..records.len()).rev() {
            let j = r.gen_range(0..=i);
            records.swap(i, j);
        }
    }
    Ok(records)
}

/// Newline-delimited records, one JSON object per line.
pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<(), GenomeError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, GenomeError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line)
                .map_err(|e| GenomeError::Parse(format!("record line {}: {e}", i + 1)))?,
        );
    }
    Ok(records)
}
