//! Genetic data pipeline: panel and genotype containers, SNP quality
//! control, gene-block permutation augmentation, prompt serialization,
//! dataset assembly, and the synthetic cohort generator.

pub mod dataset;
pub mod prompt;
pub mod qc;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

pub use dataset::{build_dataset, permute_gene_blocks, Dataset, DatasetConfig, DatasetMode, DatasetRecord};
pub use prompt::{build_prompt, parse_genome, serialize_genome, PromptRecord};
pub use qc::{column_maf, column_missingness, hwe_exact_p, impute_column, run_qc, QcReport};
pub use synth::{synth_cohort, Cohort, PlantedEffect, SynthSpec};

/// Diagnostic stage labels, in canonical class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Nc,
    Smc,
    Mci,
    Ad,
}

pub const STAGES: [Stage; 4] = [Stage::Nc, Stage::Smc, Stage::Mci, Stage::Ad];

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Nc => "NC",
            Stage::Smc => "SMC",
            Stage::Mci => "MCI",
            Stage::Ad => "AD",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "NC" => Some(Stage::Nc),
            "SMC" => Some(Stage::Smc),
            "MCI" => Some(Stage::Mci),
            "AD" => Some(Stage::Ad),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Stage::Nc => 0,
            Stage::Smc => 1,
            Stage::Mci => 2,
            Stage::Ad => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub enum GenomeError {
    EmptyColumn,
    AllMissing,
    NegativeCount,
    MissingGenotype { snp_id: String },
    UnknownLabel(String),
    InsufficientSubjects(String),
    MissingPatchSet(String),
    UnknownPlantTarget(String),
    BadThreshold(String),
    BadPanel(String),
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for GenomeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenomeError::EmptyColumn => write!(f, "empty genotype column"),
            GenomeError::AllMissing => write!(f, "column has no observed genotypes"),
            GenomeError::NegativeCount => write!(f, "negative genotype count"),
            GenomeError::MissingGenotype { snp_id } => {
                write!(f, "missing genotype for {snp_id}")
            }
            GenomeError::UnknownLabel(l) => write!(f, "unknown label {l:?}"),
            GenomeError::InsufficientSubjects(msg) => write!(f, "insufficient subjects: {msg}"),
            GenomeError::MissingPatchSet(id) => write!(f, "subject {id} has no patch set"),
            GenomeError::UnknownPlantTarget(msg) => write!(f, "unknown plant target: {msg}"),
            GenomeError::BadThreshold(msg) => write!(f, "bad threshold: {msg}"),
            GenomeError::BadPanel(msg) => write!(f, "bad panel: {msg}"),
            GenomeError::Parse(msg) => write!(f, "parse error: {msg}"),
            GenomeError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for GenomeError {}

impl From<std::io::Error> for GenomeError {
    fn from(e: std::io::Error) -> Self {
        GenomeError::Io(e)
    }
}

/// Words with grammatical meaning inside serialized genomes; panel
/// identifiers may not collide with them.
const RESERVED_WORDS: [&str; 8] = ["GENE", ":", "=", ";", "|", "<IMG>", "[", "]"];

/// Ordered gene panel: each gene owns an ordered, immutable SNP list.
#[derive(Debug, Clone, PartialEq)]
pub struct GenePanel {
    pub genes: Vec<(String, Vec<String>)>,
}

impl GenePanel {
    pub fn new(genes: Vec<(String, Vec<String>)>) -> Result<Self, GenomeError> {
        let mut gene_names = BTreeSet::new();
        let mut snp_ids = BTreeSet::new();
        for (gene, snps) in &genes {
            validate_identifier(gene)?;
            if !gene_names.insert(gene.clone()) {
                return Err(GenomeError::BadPanel(format!("duplicate gene {gene}")));
            }
            if snps.is_empty() {
                return Err(GenomeError::BadPanel(format!("gene {gene} has no SNPs")));
            }
            for snp in snps {
                validate_identifier(snp)?;
                if !snp_ids.insert(snp.clone()) {
                    return Err(GenomeError::BadPanel(format!("duplicate snp {snp}")));
                }
            }
        }
        Ok(GenePanel { genes })
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn n_snps(&self) -> usize {
        self.genes.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn gene_names(&self) -> Vec<String> {
        self.genes.iter().map(|(g, _)| g.clone()).collect()
    }

    /// Flattened (gene, snp) column order.
    pub fn flat_columns(&self) -> Vec<(String, String)> {
        let mut cols = Vec::with_capacity(self.n_snps());
        for (gene, snps) in &self.genes {
            for snp in snps {
                cols.push((gene.clone(), snp.clone()));
            }
        }
        cols
    }

    pub fn gene_index(&self, name: &str) -> Option<usize> {
        self.genes.iter().position(|(g, _)| g == name)
    }

    /// Headerless TSV, `gene_name\tsnp_id` per row, panel order = file order.
    pub fn write_tsv(&self, path: &Path) -> Result<(), GenomeError> {
        let mut out = String::new();
        for (gene, snp) in self.flat_columns() {
            out.push_str(&format!("{gene}\t{snp}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self, GenomeError> {
        let text = fs::read_to_string(path)?;
        let mut genes: Vec<(String, Vec<String>)> = Vec::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (gene, snp) = line
                .split_once('\t')
                .ok_or_else(|| GenomeError::Parse(format!("bad panel row {line:?}")))?;
            match genes.last_mut() {
                Some((g, snps)) if g == gene => snps.push(snp.to_string()),
                _ => genes.push((gene.to_string(), vec![snp.to_string()])),
            }
        }
        GenePanel::new(genes)
    }
}

fn validate_identifier(s: &str) -> Result<(), GenomeError> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(GenomeError::BadPanel(format!("bad identifier {s:?}")));
    }
    if RESERVED_WORDS.contains(&s) {
        return Err(GenomeError::BadPanel(format!("identifier {s:?} is a reserved word")));
    }
    Ok(())
}

/// Genotype cell: alternate-allele count 0/1/2, or missing.
pub type Genotype = Option<u8>;

/// Cohort genotype matrix, rows = subjects, columns = panel flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    pub subjects: Vec<String>,
    pub stages: Vec<Option<Stage>>,
    /// (gene, snp_id) per column, in panel flattening order.
    pub columns: Vec<(String, String)>,
    /// Row-major cells: `rows[subject][column]`.
    pub rows: Vec<Vec<Genotype>>,
}

impl GenotypeMatrix {
    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.stages.len() != self.subjects.len() || self.rows.len() != self.subjects.len() {
            return Err(GenomeError::Parse("row metadata length mismatch".into()));
        }
        for row in &self.rows {
            if row.len() != self.columns.len() {
                return Err(GenomeError::Parse("row width mismatch".into()));
            }
            for cell in row {
                if let Some(v) = cell {
                    if *v > 2 {
                        return Err(GenomeError::Parse(format!("genotype {v} outside 0..=2")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_snps(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, idx: usize) -> Vec<Genotype> {
        self.rows.iter().map(|r| r[idx]).collect()
    }

    /// Gene-block genome for one subject row; column order is preserved,
    /// consecutive columns of one gene form a block.
    pub fn subject_genome(&self, row: usize) -> SubjectGenome {
        let mut blocks: Vec<GeneBlock> = Vec::new();
        for (col, (gene, snp)) in self.columns.iter().enumerate() {
            let cell = self.rows[row][col];
            match blocks.last_mut() {
                Some(b) if &b.gene == gene => b.snps.push((snp.clone(), cell)),
                _ => blocks.push(GeneBlock { gene: gene.clone(), snps: vec![(snp.clone(), cell)] }),
            }
        }
        SubjectGenome { blocks }
    }

    /// TSV: header `subject_id\tstage\t` then `GENE:RSID` columns; cells
    /// `0`/`1`/`2`/`NA`; unknown stage written as `NA`.
    pub fn write_tsv(&self, path: &Path) -> Result<(), GenomeError> {
        let mut out = String::from("subject_id\tstage");
        for (gene, snp) in &self.columns {
            out.push('\t');
            out.push_str(&format!("{gene}:{snp}"));
        }
        out.push('\n');
        for (i, subject) in self.subjects.iter().enumerate() {
            out.push_str(subject);
            out.push('\t');
            out.push_str(self.stages[i].map_or("NA", Stage::as_str));
            for cell in &self.rows[i] {
                out.push('\t');
                match cell {
                    Some(v) => out.push_str(&v.to_string()),
                    None => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self, GenomeError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| GenomeError::Parse("empty file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("subject_id") || fields.next() != Some("stage") {
            return Err(GenomeError::Parse("expected header 'subject_id\\tstage\\t...'".into()));
        }
        let mut columns = Vec::new();
        for f in fields {
            let (gene, snp) = f
                .split_once(':')
                .ok_or_else(|| GenomeError::Parse(format!("bad column name {f:?}")))?;
            columns.push((gene.to_string(), snp.to_string()));
        }
        let mut subjects = Vec::new();
        let mut stages = Vec::new();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let subject =
                fields.next().ok_or_else(|| GenomeError::Parse("missing subject_id".into()))?;
            let stage =
                fields.next().ok_or_else(|| GenomeError::Parse("missing stage".into()))?;
            let stage = if stage == "NA" {
                None
            } else {
                Some(
                    Stage::parse(stage)
                        .ok_or_else(|| GenomeError::Parse(format!("bad stage {stage:?}")))?,
                )
            };
            let mut row = Vec::with_capacity(columns.len());
            for cell in fields {
                row.push(match cell {
                    "NA" => None,
                    "0" => Some(0),
                    "1" => Some(1),
                    "2" => Some(2),
                    other => {
                        return Err(GenomeError::Parse(format!("bad genotype {other:?}")))
                    }
                });
            }
            if row.len() != columns.len() {
                return Err(GenomeError::Parse(format!(
                    "subject {subject}: {} cells for {} columns",
                    row.len(),
                    columns.len()
                )));
            }
            subjects.push(subject.to_string());
            stages.push(stage);
            rows.push(row);
        }
        let m = GenotypeMatrix { subjects, stages, columns, rows };
        m.validate()?;
        Ok(m)
    }

    /// Panel restricted to the columns that survived filtering.
    pub fn derived_panel(&self) -> Result<GenePanel, GenomeError> {
        let mut genes: Vec<(String, Vec<String>)> = Vec::new();
        for (gene, snp) in &self.columns {
            match genes.last_mut() {
                Some((g, snps)) if g == gene => snps.push(snp.clone()),
                _ => genes.push((gene.clone(), vec![snp.clone()])),
            }
        }
        GenePanel::new(genes)
    }
}

/// One gene's ordered SNP block for one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneBlock {
    pub gene: String,
    pub snps: Vec<(String, Genotype)>,
}

/// Ordered gene blocks of one subject; block order is the only mutable
/// aspect (permutation augmentation), intra-block order never changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectGenome {
    pub blocks: Vec<GeneBlock>,
}

/// QC thresholds; each must lie strictly inside (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcThresholds {
    pub missingness_max: f64,
    pub maf_min: f64,
    pub hwe_p_min: f64,
}

impl QcThresholds {
    pub fn new(missingness_max: f64, maf_min: f64, hwe_p_min: f64) -> Result<Self, GenomeError> {
        for (name, v) in [
            ("missingness_max", missingness_max),
            ("maf_min", maf_min),
            ("hwe_p_min", hwe_p_min),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(GenomeError::BadThreshold(format!("{name} = {v} not in (0,1)")));
            }
        }
        Ok(QcThresholds { missingness_max, maf_min, hwe_p_min })
    }

    /// Paper defaults: >95% missing removed, MAF < 0.05 removed, HWE
    /// p < 1e-6 removed.
    pub fn paper_defaults() -> Self {
        QcThresholds { missingness_max: 0.95, maf_min: 0.05, hwe_p_min: 1e-6 }
    }
}

/// Newline-delimited gene names.
pub fn read_gene_set(path: &Path) -> Result<Vec<String>, GenomeError> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub fn write_gene_set(genes: &[String], path: &Path) -> Result<(), GenomeError> {
    let mut out = String::new();
    for g in genes {
        out.push_str(g);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_panel() -> GenePanel {
        GenePanel::new(vec![
            ("G1".into(), vec!["rs1".into(), "rs2".into()]),
            ("G2".into(), vec!["rs3".into()]),
        ])
        .unwrap()
    }

    #[test]
    fn panel_rejects_duplicates_and_reserved_words() {
        assert!(GenePanel::new(vec![
            ("G1".into(), vec!["rs1".into()]),
            ("G1".into(), vec!["rs2".into()]),
        ])
        .is_err());
        assert!(GenePanel::new(vec![("GENE".into(), vec!["rs1".into()])]).is_err());
        assert!(GenePanel::new(vec![("G1".into(), vec!["rs 1".into()])]).is_err());
    }

    #[test]
    fn panel_tsv_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("panel.tsv");
        let panel = small_panel();
        panel.write_tsv(&p).unwrap();
        assert_eq!(GenePanel::read_tsv(&p).unwrap(), panel);
    }

    #[test]
    fn genotype_tsv_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("geno.tsv");
        let m = GenotypeMatrix {
            subjects: vec!["s1".into(), "s2".into()],
            stages: vec![Some(Stage::Ad), None],
            columns: small_panel().flat_columns(),
            rows: vec![vec![Some(0), Some(1), Some(2)], vec![None, Some(2), Some(0)]],
        };
        m.write_tsv(&p).unwrap();
        assert_eq!(GenotypeMatrix::read_tsv(&p).unwrap(), m);
    }

    #[test]
    fn subject_genome_groups_blocks_in_column_order() {
        let m = GenotypeMatrix {
            subjects: vec!["s1".into()],
            stages: vec![Some(Stage::Nc)],
            columns: small_panel().flat_columns(),
            rows: vec![vec![Some(0), Some(1), Some(2)]],
        };
        let g = m.subject_genome(0);
        assert_eq!(g.blocks.len(), 2);
        assert_eq!(g.blocks[0].gene, "G1");
        assert_eq!(g.blocks[0].snps, vec![("rs1".into(), Some(0)), ("rs2".into(), Some(1))]);
        assert_eq!(g.blocks[1].gene, "G2");
    }

    #[test]
    fn thresholds_must_be_fractions() {
        assert!(QcThresholds::new(0.95, 0.05, 1e-6).is_ok());
        assert!(QcThresholds::new(1.0, 0.05, 1e-6).is_err());
        assert!(QcThresholds::new(0.95, 0.0, 1e-6).is_err());
    }
}
