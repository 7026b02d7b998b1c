//! SNP quality control: missingness, allele-frequency imputation, MAF
//! filtering, and the exact Hardy-Weinberg test.
//!
//! Steps run in the fixed order missingness -> imputation -> MAF -> HWE.
//! Comparisons follow the threshold phrasing exactly: missingness is
//! dropped when strictly above the cutoff, MAF and HWE when strictly
//! below theirs.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{GenomeError, Genotype, GenotypeMatrix, QcThresholds};

/// Fraction of missing cells in a column.
pub fn column_missingness(col: &[Genotype]) -> Result<f64, GenomeError> {
    if col.is_empty() {
        return Err(GenomeError::EmptyColumn);
    }
    let missing = col.iter().filter(|c| c.is_none()).count();
    Ok(missing as f64 / col.len() as f64)
}

/// Alternate-allele frequency over non-missing cells.
fn alt_allele_freq(col: &[Genotype]) -> Option<f64> {
    let mut alt = 0u64;
    let mut n = 0u64;
    for cell in col.iter().flatten() {
        alt += u64::from(*cell);
        n += 1;
    }
    (n > 0).then(|| alt as f64 / (2 * n) as f64)
}

/// Replace missing cells by the expected genotype round(2*p_alt), rounding
/// half away from zero.
pub fn impute_column(col: &[Genotype]) -> Result<Vec<u8>, GenomeError> {
    if col.is_empty() {
        return Err(GenomeError::EmptyColumn);
    }
    let p_alt = alt_allele_freq(col).ok_or(GenomeError::AllMissing)?;
    let fill = (2.0 * p_alt).round() as u8;
    Ok(col.iter().map(|c| c.unwrap_or(fill)).collect())
}

/// Minor allele frequency min(p_alt, 1 - p_alt). Run after imputation.
pub fn column_maf(col: &[u8]) -> Result<f64, GenomeError> {
    if col.is_empty() {
        return Err(GenomeError::EmptyColumn);
    }
    let alt: u64 = col.iter().map(|&c| u64::from(c)).sum();
    let p = alt as f64 / (2 * col.len() as u64) as f64;
    Ok(p.min(1.0 - p))
}

/// Cumulative ln-factorial table: table[k] = ln(k!).
fn ln_factorials(up_to: usize) -> Vec<f64> {
    let mut t = vec![0.0; up_to + 1];
    for k in 1..=up_to {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

/// Exact two-sided Hardy-Weinberg test on genotype counts.
///
/// Conditions on the minor-allele count: enumerates every feasible
/// heterozygote count of matching parity, evaluates its conditional
/// probability, and sums the probabilities that do not exceed the observed
/// count's probability (1e-12 slack for float comparison).
pub fn hwe_exact_p(n_aa: i64, n_ab: i64, n_bb: i64) -> Result<f64, GenomeError> {
    if n_aa < 0 || n_ab < 0 || n_bb < 0 {
        return Err(GenomeError::NegativeCount);
    }
    let (n_aa, n_ab, n_bb) = (n_aa as usize, n_ab as usize, n_bb as usize);
    let n = n_aa + n_ab + n_bb;
    if n == 0 {
        return Err(GenomeError::EmptyColumn);
    }
    let a_alleles = 2 * n_aa + n_ab;
    let b_alleles = 2 * n_bb + n_ab;
    let minor = a_alleles.min(b_alleles);
    let obs_het = n_ab;

    let lf = ln_factorials(2 * n);
    let ln2 = std::f64::consts::LN_2;
    // ln P(het = h | n, minor), Levene-Haldane conditional distribution
    let ln_prob = |h: usize| -> f64 {
        let minor_hom = (minor - h) / 2;
        let major_hom = n - h - minor_hom;
        lf[n] - lf[minor_hom] - lf[h] - lf[major_hom] + h as f64 * ln2 + lf[minor]
            + lf[2 * n - minor]
            - lf[2 * n]
    };

    let mut probs = Vec::new();
    let mut h = minor % 2;
    while h <= minor {
        probs.push((h, ln_prob(h).exp()));
        h += 2;
    }
    let total: f64 = probs.iter().map(|(_, p)| p).sum();
    debug_assert!((total - 1.0).abs() < 1e-10, "conditional mass {total} != 1");

    let p_obs = probs
        .iter()
        .find(|(h, _)| *h == obs_het)
        .map(|(_, p)| *p)
        .expect("observed het count is always feasible");
    let p: f64 = probs.iter().filter(|(_, q)| *q <= p_obs + 1e-12).map(|(_, q)| q).sum();
    Ok(p.min(1.0))
}

/// Full conditional heterozygote distribution for a genotype triple;
/// exposed for the mass-sums-to-one invariant check.
pub fn hwe_het_distribution(n_aa: i64, n_ab: i64, n_bb: i64) -> Result<Vec<(usize, f64)>, GenomeError> {
    if n_aa < 0 || n_ab < 0 || n_bb < 0 {
        return Err(GenomeError::NegativeCount);
    }
    let (n_aa, n_ab, n_bb) = (n_aa as usize, n_ab as usize, n_bb as usize);
    let n = n_aa + n_ab + n_bb;
    if n == 0 {
        return Err(GenomeError::EmptyColumn);
    }
    let minor = (2 * n_aa + n_ab).min(2 * n_bb + n_ab);
    let lf = ln_factorials(2 * n);
    let ln2 = std::f64::consts::LN_2;
    let mut probs = Vec::new();
    let mut h = minor % 2;
    while h <= minor {
        let minor_hom = (minor - h) / 2;
        let major_hom = n - h - minor_hom;
        let lp = lf[n] - lf[minor_hom] - lf[h] - lf[major_hom] + h as f64 * ln2 + lf[minor]
            + lf[2 * n - minor]
            - lf[2 * n];
        probs.push((h, lp.exp()));
        h += 2;
    }
    Ok(probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    Missingness,
    Maf,
    Hwe,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Missingness => "missingness",
            DropReason::Maf => "maf",
            DropReason::Hwe => "hwe",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QcDrop {
    pub snp_id: String,
    pub reason: DropReason,
    pub statistic: f64,
}

#[derive(Debug, Clone, Default)]
pub struct QcReport {
    pub dropped: Vec<QcDrop>,
}

impl QcReport {
    /// TSV `snp_id\treason\tstatistic`.
    pub fn write_tsv(&self, path: &Path) -> Result<(), GenomeError> {
        let mut out = String::from("snp_id\treason\tstatistic\n");
        for d in &self.dropped {
            out.push_str(&format!("{}\t{}\t{}\n", d.snp_id, d.reason.as_str(), d.statistic));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

enum ColumnOutcome {
    Keep(Vec<u8>),
    Drop(DropReason, f64),
}

fn qc_column(col: &[Genotype], t: &QcThresholds) -> Result<ColumnOutcome, GenomeError> {
    let missingness = column_missingness(col)?;
    if missingness > t.missingness_max {
        return Ok(ColumnOutcome::Drop(DropReason::Missingness, missingness));
    }
    let imputed = impute_column(col)?;
    let maf = column_maf(&imputed)?;
    if maf < t.maf_min {
        return Ok(ColumnOutcome::Drop(DropReason::Maf, maf));
    }
    let n_aa = imputed.iter().filter(|&&g| g == 0).count() as i64;
    let n_ab = imputed.iter().filter(|&&g| g == 1).count() as i64;
    let n_bb = imputed.iter().filter(|&&g| g == 2).count() as i64;
    let p = hwe_exact_p(n_aa, n_ab, n_bb)?;
    if p < t.hwe_p_min {
        return Ok(ColumnOutcome::Drop(DropReason::Hwe, p));
    }
    Ok(ColumnOutcome::Keep(imputed))
}

/// Apply the three QC steps in order and return the filtered, imputed
/// matrix plus a report naming every dropped SNP with reason and statistic.
pub fn run_qc(
    m: &GenotypeMatrix,
    t: &QcThresholds,
) -> Result<(GenotypeMatrix, QcReport), GenomeError> {
    m.validate()?;
    if m.subjects.is_empty() {
        return Err(GenomeError::EmptyColumn);
    }
    let outcomes: Vec<Result<ColumnOutcome, GenomeError>> = (0..m.n_snps())
        .into_par_iter()
        .map(|c| qc_column(&m.column(c), t))
        .collect();

    let mut kept_cols: Vec<usize> = Vec::new();
    let mut kept_values: Vec<Vec<u8>> = Vec::new();
    let mut report = QcReport::default();
    for (c, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            ColumnOutcome::Keep(values) => {
                kept_cols.push(c);
                kept_values.push(values);
            }
            ColumnOutcome::Drop(reason, statistic) => report.dropped.push(QcDrop {
                snp_id: m.columns[c].1.clone(),
                reason,
                statistic,
            }),
        }
    }

    let columns: Vec<(String, String)> = kept_cols.iter().map(|&c| m.columns[c].clone()).collect();
    let rows: Vec<Vec<Genotype>> = (0..m.n_subjects())
        .map(|r| kept_values.iter().map(|col| Some(col[r])).collect())
        .collect();
    let filtered = GenotypeMatrix {
        subjects: m.subjects.clone(),
        stages: m.stages.clone(),
        columns,
        rows,
    };
    Ok((filtered, report))
}
