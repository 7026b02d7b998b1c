//! Bootstrap stability statistics, stable-feature selection, the exact
//! hypergeometric/Fisher enrichment test, and classification metrics.
//!
//! Stability of an ROI–gene pair is its bootstrap mean attention divided
//! by the width of the 95% percentile interval of replicate means: strong
//! and consistent associations score high.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::attribution::{GroupSamples, RoiGeneAttentionMap};
use crate::genome::Stage;
use crate::rng;

#[derive(Debug)]
pub enum StabilityError {
    EmptySample,
    TopKExceedsFeatures { top_k: usize, features: usize },
    InvalidTable(String),
    NotInUniverse(String),
    EmptyMatrix,
    BadConfig(String),
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for StabilityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StabilityError::EmptySample => write!(f, "empty sample"),
            StabilityError::TopKExceedsFeatures { top_k, features } => {
                write!(f, "top_k {top_k} exceeds {features} features")
            }
            StabilityError::InvalidTable(m) => write!(f, "invalid table: {m}"),
            StabilityError::NotInUniverse(g) => write!(f, "gene {g} not in universe"),
            StabilityError::EmptyMatrix => write!(f, "empty confusion matrix"),
            StabilityError::BadConfig(m) => write!(f, "bad config: {m}"),
            StabilityError::Parse(m) => write!(f, "parse error: {m}"),
            StabilityError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for StabilityError {}

impl From<std::io::Error> for StabilityError {
    fn from(e: std::io::Error) -> Self {
        StabilityError::Io(e)
    }
}

#[derive(Debug, Clone)]
pub struct StabilityConfig {
    /// Bootstrap replicate count B.
    pub n_bootstrap: usize,
    /// Percentile bounds of the confidence interval, in percent.
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// A feature is stable when it appears in strictly more than this
    /// fraction of iterations' top-k lists.
    pub selection_threshold: f64,
    pub top_k_genes: usize,
    pub top_k_rois: usize,
    /// Guard for zero-width confidence intervals.
    pub epsilon_width: f64,
    pub seed: u64,
}

impl StabilityConfig {
    pub fn new(n_bootstrap: usize, top_k_genes: usize, top_k_rois: usize, seed: u64) -> Self {
        StabilityConfig {
            n_bootstrap,
            ci_lo: 2.5,
            ci_hi: 97.5,
            selection_threshold: 0.5,
            top_k_genes,
            top_k_rois,
            epsilon_width: 1e-12,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        if self.n_bootstrap == 0 {
            return Err(StabilityError::BadConfig("n_bootstrap must be >= 1".into()));
        }
        if !(self.ci_lo > 0.0 && self.ci_lo < self.ci_hi && self.ci_hi < 100.0) {
            return Err(StabilityError::BadConfig(format!(
                "percentiles ({}, {}) must satisfy 0 < lo < hi < 100",
                self.ci_lo, self.ci_hi
            )));
        }
        if !(self.selection_threshold > 0.0 && self.selection_threshold < 1.0) {
            return Err(StabilityError::BadConfig("selection threshold must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Replicate means: replicate b draws n indices with replacement from a
/// stream seeded by `seed` mixed with b.
pub fn bootstrap_means(x: &[f64], b: usize, seed: u64) -> Result<Vec<f64>, StabilityError> {
    if x.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    let n = x.len();
    Ok((0..b)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::stream(seed, "bootstrap-replicate", rep as u64);
            let mut sum = 0.0;
            for _ in 0..n {
                sum += x[r.gen_range(0..n)];
            }
            sum / n as f64
        })
        .collect())
}

/// Linear-interpolation percentile on the order statistics:
/// rank h = (n-1)p/100, result = v[⌊h⌋] + frac(h)·(v[⌊h⌋+1] - v[⌊h⌋]).
pub fn percentile(values: &[f64], p: f64) -> Result<f64, StabilityError> {
    if values.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n || frac == 0.0 {
        return Ok(sorted[lo.min(n - 1)]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

/// boot_mean / max(ci_width, eps).
pub fn stability_score(boot_mean: f64, ci_lo_value: f64, ci_hi_value: f64, eps: f64) -> f64 {
    boot_mean / (ci_hi_value - ci_lo_value).max(eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRecord {
    pub roi_id: u32,
    pub gene: String,
    pub boot_mean: f64,
    pub ci_lo_value: f64,
    pub ci_hi_value: f64,
    pub stability: f64,
}

/// Full bootstrap stability table per stage; records sorted descending by
/// stability, ties broken by (roi_id, gene).
pub fn stability_table(
    groups: &[GroupSamples],
    cfg: &StabilityConfig,
) -> Result<BTreeMap<Stage, Vec<StabilityRecord>>, StabilityError> {
    cfg.validate()?;
    let mut out = BTreeMap::new();
    for group in groups {
        let pairs: Vec<(&(u32, String), &Vec<f64>)> = group.samples.iter().collect();
        let records: Result<Vec<StabilityRecord>, StabilityError> = pairs
            .par_iter()
            .map(|((roi_id, gene), sample)| {
                let pair_seed = rng::derive_seed(
                    cfg.seed,
                    &format!("stability/{}/{}/{}", group.stage, roi_id, gene),
                    0,
                );
                let reps = bootstrap_means(sample, cfg.n_bootstrap, pair_seed)?;
                let boot_mean = reps.iter().sum::<f64>() / reps.len() as f64;
                let ci_lo_value = percentile(&reps, cfg.ci_lo)?;
                let ci_hi_value = percentile(&reps, cfg.ci_hi)?;
                assert!(ci_lo_value <= ci_hi_value);
                let lo = reps.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = reps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(boot_mean >= lo - 1e-12 && boot_mean <= hi + 1e-12);
                Ok(StabilityRecord {
                    roi_id: *roi_id,
                    gene: gene.clone(),
                    boot_mean,
                    ci_lo_value,
                    ci_hi_value,
                    stability: stability_score(
                        boot_mean,
                        ci_lo_value,
                        ci_hi_value,
                        cfg.epsilon_width,
                    ),
                })
            })
            .collect();
        let mut records = records?;
        records.sort_by(|a, b| {
            b.stability
                .partial_cmp(&a.stability)
                .expect("finite stability")
                .then(a.roi_id.cmp(&b.roi_id))
                .then(a.gene.cmp(&b.gene))
        });
        out.insert(group.stage, records);
    }
    Ok(out)
}

/// Stable-feature selection output: per-feature appearance frequencies
/// across iterations, and the strictly-above-threshold selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedFeatures {
    /// (feature, frequency) sorted by descending frequency, then name.
    pub frequencies: Vec<(String, f64)>,
    /// Features with frequency strictly above the threshold.
    pub selected: Vec<String>,
}

/// Per iteration, rank features by score (ties by name ascending) and keep
/// the top k; a feature is stable iff it appears in strictly more than
/// threshold·B iterations.
pub fn select_stable_features(
    features: &[String],
    per_iteration_scores: &[Vec<f64>],
    top_k: usize,
    threshold: f64,
) -> Result<SelectedFeatures, StabilityError> {
    if per_iteration_scores.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    if top_k > features.len() {
        return Err(StabilityError::TopKExceedsFeatures {
            top_k,
            features: features.len(),
        });
    }
    let b = per_iteration_scores.len();
    let mut counts = vec![0usize; features.len()];
    for scores in per_iteration_scores {
        if scores.len() != features.len() {
            return Err(StabilityError::InvalidTable(format!(
                "iteration scored {} of {} features",
                scores.len(),
                features.len()
            )));
        }
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.sort_by(|&i, &j| {
            scores[j]
                .partial_cmp(&scores[i])
                .expect("finite scores")
                .then(features[i].cmp(&features[j]))
        });
        for &i in order.iter().take(top_k) {
            counts[i] += 1;
        }
    }
    let mut frequencies: Vec<(String, f64)> = features
        .iter()
        .zip(&counts)
        .map(|(f, &c)| (f.clone(), c as f64 / b as f64))
        .collect();
    frequencies.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    let selected = frequencies
        .iter()
        .filter(|(_, freq)| *freq * b as f64 > threshold * b as f64)
        .map(|(f, _)| f.clone())
        .collect();
    Ok(SelectedFeatures { frequencies, selected })
}

/// Gene importance per subject: mean attention over ROIs. Per iteration the
/// subject set is resampled and the top-k genes retained.
pub fn gene_stability_selection(
    maps: &[RoiGeneAttentionMap],
    gene_names: &[String],
    cfg: &StabilityConfig,
) -> Result<SelectedFeatures, StabilityError> {
    if maps.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    cfg.validate()?;
    let mut sorted: Vec<&RoiGeneAttentionMap> = maps.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    // per-subject per-gene importance matrix
    let importance: Vec<Vec<f64>> = sorted
        .iter()
        .map(|m| {
            gene_names
                .iter()
                .map(|g| {
                    let (sum, n) = m
                        .weights
                        .iter()
                        .filter(|((_, gene), _)| gene == g)
                        .fold((0.0, 0usize), |(s, n), (_, &w)| (s + w, n + 1));
                    sum / n.max(1) as f64
                })
                .collect()
        })
        .collect();
    let n_subj = importance.len();
    let iterations: Vec<Vec<f64>> = (0..cfg.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(cfg.seed, "gene-selection", b as u64);
            let mut scores = vec![0.0; gene_names.len()];
            for _ in 0..n_subj {
                let s = r.gen_range(0..n_subj);
                for (acc, v) in scores.iter_mut().zip(&importance[s]) {
                    *acc += v / n_subj as f64;
                }
            }
            scores
        })
        .collect();
    select_stable_features(gene_names, &iterations, cfg.top_k_genes, cfg.selection_threshold)
}

/// Stage-specific ROI importance: mean attention over genes, resampled
/// within the stage's subjects.
pub fn roi_stability_selection(
    maps: &[RoiGeneAttentionMap],
    roi_ids: &[u32],
    stage: Stage,
    cfg: &StabilityConfig,
) -> Result<SelectedFeatures, StabilityError> {
    cfg.validate()?;
    let mut members: Vec<&RoiGeneAttentionMap> =
        maps.iter().filter(|m| m.stage == stage).collect();
    if members.is_empty() {
        return Err(StabilityError::EmptySample);
    }
    members.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let importance: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            roi_ids
                .iter()
                .map(|&roi| {
                    let (sum, n) = m
                        .weights
                        .iter()
                        .filter(|((r, _), _)| *r == roi)
                        .fold((0.0, 0usize), |(s, n), (_, &w)| (s + w, n + 1));
                    sum / n.max(1) as f64
                })
                .collect()
        })
        .collect();
    let names: Vec<String> = roi_ids.iter().map(|r| r.to_string()).collect();
    let n_subj = importance.len();
    let iterations: Vec<Vec<f64>> = (0..cfg.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(cfg.seed, &format!("roi-selection-{stage}"), b as u64);
            let mut scores = vec![0.0; roi_ids.len()];
            for _ in 0..n_subj {
                let s = r.gen_range(0..n_subj);
                for (acc, v) in scores.iter_mut().zip(&importance[s]) {
                    *acc += v / n_subj as f64;
                }
            }
            scores
        })
        .collect();
    select_stable_features(&names, &iterations, cfg.top_k_rois, cfg.selection_threshold)
}

/// Upper tail P(X >= a) of the hypergeometric(N, K, n) distribution,
/// exact summation over the feasible range with log-factorial arithmetic.
pub fn hypergeom_tail(a: u64, k: u64, n: u64, total: u64) -> Result<f64, StabilityError> {
    if k > total || n > total {
        return Err(StabilityError::InvalidTable(format!(
            "K={k}, n={n} exceed universe {total}"
        )));
    }
    if a > k.min(n) {
        return Err(StabilityError::InvalidTable(format!(
            "a={a} exceeds min(K,n)={}",
            k.min(n)
        )));
    }
    let lf = {
        let mut t = vec![0.0f64; total as usize + 1];
        for i in 1..t.len() {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    };
    let ln_choose = |n: u64, r: u64| -> f64 {
        lf[n as usize] - lf[r as usize] - lf[(n - r) as usize]
    };
    let k_min = n.saturating_sub(total - k);
    let k_max = k.min(n);
    if a <= k_min {
        return Ok(1.0); // full tail
    }
    let denom = ln_choose(total, n);
    let mut p = 0.0;
    for x in a..=k_max {
        p += (ln_choose(k, x) + ln_choose(total - k, n - x) - denom).exp();
    }
    Ok(p.min(1.0))
}

/// Full hypergeometric point-mass vector, for the mass-sums-to-one check.
pub fn hypergeom_distribution(k: u64, n: u64, total: u64) -> Result<Vec<(u64, f64)>, StabilityError> {
    if k > total || n > total {
        return Err(StabilityError::InvalidTable("margins exceed universe".into()));
    }
    let k_min = n.saturating_sub(total - k);
    let k_max = k.min(n);
    let mut out = Vec::new();
    for x in k_min..=k_max {
        let tail_here = hypergeom_tail(x, k, n, total)?;
        let tail_next =
            if x < k_max { hypergeom_tail(x + 1, k, n, total)? } else { 0.0 };
        out.push((x, tail_here - tail_next));
    }
    Ok(out)
}

/// 2x2 enrichment contingency table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyTable {
    /// selected ∩ reference
    pub a: u64,
    /// selected \ reference
    pub b: u64,
    /// reference \ selected
    pub c: u64,
    /// neither
    pub d: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentResult {
    pub table: ContingencyTable,
    pub p: f64,
    pub odds_ratio: f64,
    /// True when a zero cell forced the Haldane-Anscombe +0.5 correction.
    pub corrected: bool,
}

/// One-sided ("greater") Fisher exact enrichment of `selected` against
/// `reference` within `universe`. The odds ratio is the sample
/// cross-product ratio, +0.5 on every cell when any cell is zero.
pub fn fisher_enrichment(
    selected: &[String],
    reference: &[String],
    universe: &[String],
) -> Result<EnrichmentResult, StabilityError> {
    use std::collections::BTreeSet;
    let uni: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    for g in selected.iter().chain(reference) {
        if !uni.contains(g.as_str()) {
            return Err(StabilityError::NotInUniverse(g.clone()));
        }
    }
    let sel: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    let refs: BTreeSet<&str> = reference.iter().map(String::as_str).collect();
    let a = sel.intersection(&refs).count() as u64;
    let b = (sel.len() as u64) - a;
    let c = (refs.len() as u64) - a;
    let d = uni.len() as u64 - a - b - c;
    let table = ContingencyTable { a, b, c, d };
    let p = hypergeom_tail(a, refs.len() as u64, sel.len() as u64, uni.len() as u64)?;
    let corrected = a == 0 || b == 0 || c == 0 || d == 0;
    let (fa, fb, fc, fd) = if corrected {
        (a as f64 + 0.5, b as f64 + 0.5, c as f64 + 0.5, d as f64 + 0.5)
    } else {
        (a as f64, b as f64, c as f64, d as f64)
    };
    Ok(EnrichmentResult { table, p, odds_ratio: (fa * fd) / (fb * fc), corrected })
}

/// Single-line structured text: `a,b,c,d,p,odds_ratio,corrected_flag`.
pub fn write_enrichment(r: &EnrichmentResult, path: &Path) -> Result<(), StabilityError> {
    let line = format!(
        "{{\"a\":{},\"b\":{},\"c\":{},\"d\":{},\"p\":{},\"odds_ratio\":{},\"corrected\":{}}}\n",
        r.table.a, r.table.b, r.table.c, r.table.d, r.p, r.odds_ratio, r.corrected
    );
    fs::write(path, line)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// True when any denominator was zero and reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy, macro-F1 and per-class precision/recall/F1/specificity from a
/// confusion matrix (rows = true class, columns = predicted class).
/// Zero-denominator cells yield 0 with the class flagged.
pub fn classification_metrics(
    confusion: &[Vec<u64>],
    class_names: &[String],
) -> Result<MetricsReport, StabilityError> {
    let k = class_names.len();
    if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
        return Err(StabilityError::InvalidTable(format!(
            "confusion matrix must be {k}x{k}"
        )));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(StabilityError::EmptyMatrix);
    }
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let fp: u64 = (0..k).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
        let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| confusion[c][j]).sum();
        let tn = total - tp - fp - fn_;
        let mut zero_division = false;
        let mut ratio = |num: u64, den: u64| -> f64 {
            if den == 0 {
                zero_division = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let specificity = ratio(tn, tn + fp);
        let f1 = if precision + recall == 0.0 {
            zero_division = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1, specificity, zero_division });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        class_names: class_names.to_vec(),
        per_class,
        accuracy: trace as f64 / total as f64,
        macro_f1,
    })
}

/// TSV: one row per class plus an ALL summary row carrying accuracy and
/// macro-F1.
pub fn write_metrics_tsv(report: &MetricsReport, path: &Path) -> Result<(), StabilityError> {
    let mut out = String::from(
        "class\tprecision\trecall\tf1\tspecificity\taccuracy\tmacro_f1\tzero_division\n",
    );
    for (name, m) in report.class_names.iter().zip(&report.per_class) {
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t\t\t{}\n",
            m.precision, m.recall, m.f1, m.specificity, m.zero_division
        ));
    }
    out.push_str(&format!("ALL\t\t\t\t\t{}\t{}\t\n", report.accuracy, report.macro_f1));
    fs::write(path, out)?;
    Ok(())
}

/// Stability TSV: `stage\troi_id\tgene\tboot_mean\tci_lo\tci_hi\tstability\trank`.
pub fn write_stability_tsv(
    tables: &BTreeMap<Stage, Vec<StabilityRecord>>,
    path: &Path,
) -> Result<(), StabilityError> {
    let mut out = String::from("stage\troi_id\tgene\tboot_mean\tci_lo\tci_hi\tstability\trank\n");
    for (stage, records) in tables {
        for (rank, r) in records.iter().enumerate() {
            out.push_str(&format!(
                "{stage}\t{}\t{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{}\n",
                r.roi_id,
                r.gene,
                r.boot_mean,
                r.ci_lo_value,
                r.ci_hi_value,
                r.stability,
                rank + 1
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_stability_tsv(
    path: &Path,
) -> Result<BTreeMap<Stage, Vec<StabilityRecord>>, StabilityError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = "stage\troi_id\tgene\tboot_mean\tci_lo\tci_hi\tstability\trank";
    if lines.next() != Some(header) {
        return Err(StabilityError::Parse("bad stability header".into()));
    }
    let mut out: BTreeMap<Stage, Vec<StabilityRecord>> = BTreeMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(StabilityError::Parse(format!("bad row {line:?}")));
        }
        let stage = Stage::parse(f[0])
            .ok_or_else(|| StabilityError::Parse(format!("bad stage {:?}", f[0])))?;
        let parse_f64 = |s: &str| -> Result<f64, StabilityError> {
            s.parse().map_err(|_| StabilityError::Parse(format!("bad number {s:?}")))
        };
        out.entry(stage).or_default().push(StabilityRecord {
            roi_id: f[1].parse().map_err(|_| StabilityError::Parse("bad roi id".into()))?,
            gene: f[2].to_string(),
            boot_mean: parse_f64(f[3])?,
            ci_lo_value: parse_f64(f[4])?,
            ci_hi_value: parse_f64(f[5])?,
            stability: parse_f64(f[6])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_constant_and_single_samples() {
        let reps = bootstrap_means(&[3.25, 3.25, 3.25], 50, 7).unwrap();
        assert!(reps.iter().all(|&m| m == 3.25));
        let reps = bootstrap_means(&[1.5], 40, 7).unwrap();
        assert!(reps.iter().all(|&m| m == 1.5));
        assert!(matches!(bootstrap_means(&[], 5, 7), Err(StabilityError::EmptySample)));
    }

    #[test]
    fn bootstrap_grand_mean_approaches_sample_mean() {
        let reps = bootstrap_means(&[0.0, 1.0], 10_000, 13).unwrap();
        let grand = reps.iter().sum::<f64>() / reps.len() as f64;
        assert!((grand - 0.5).abs() < 0.02, "grand mean {grand}");
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let x = [0.4, 1.2, -0.3, 2.2, 0.0];
        assert_eq!(bootstrap_means(&x, 200, 5).unwrap(), bootstrap_means(&x, 200, 5).unwrap());
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        let v = [7.0, 1.0, 9.0, 3.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 9.0);
        let v = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert!((percentile(&v, 97.5).unwrap() - 49.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_is_monotone_and_bounded() {
        use rand::Rng;
        let mut r = crate::rng::from_seed(31);
        let v: Vec<f64> = (0..37).map(|_| r.gen_range(-5.0..5.0)).collect();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut prev = f64::NEG_INFINITY;
        for p in 0..=100 {
            let q = percentile(&v, p as f64).unwrap();
            assert!(q >= prev);
            assert!(q >= lo && q <= hi);
            prev = q;
        }
    }

    #[test]
    fn stability_score_examples() {
        assert_eq!(stability_score(0.4, 0.3, 0.5, 1e-12), 2.0);
        let c = 0.7;
        assert_eq!(stability_score(c, 0.2, 0.2, 1e-12), c * 1e12);
        assert_eq!(stability_score(0.0, 0.1, 0.9, 1e-12), 0.0);
    }

    fn group(stage: Stage, entries: Vec<((u32, &str), Vec<f64>)>) -> GroupSamples {
        GroupSamples {
            stage,
            samples: entries
                .into_iter()
                .map(|((r, g), v)| ((r, g.to_string()), v))
                .collect(),
        }
    }

    #[test]
    fn constant_pairs_hit_the_eps_sentinel_and_tie_break() {
        let g = group(
            Stage::Ad,
            vec![((2, "gb"), vec![0.5; 6]), ((1, "ga"), vec![0.5; 6]), ((1, "gb"), vec![0.5; 6])],
        );
        let cfg = StabilityConfig::new(50, 1, 1, 3);
        let t = stability_table(&[g], &cfg).unwrap();
        let records = &t[&Stage::Ad];
        assert!(records.iter().all(|r| r.stability == 0.5 * 1e12));
        let order: Vec<(u32, &str)> =
            records.iter().map(|r| (r.roi_id, r.gene.as_str())).collect();
        assert_eq!(order, vec![(1, "ga"), (1, "gb"), (2, "gb")]);
    }

    #[test]
    fn tight_ci_outranks_wide_ci_at_equal_mean() {
        use rand::Rng;
        let mut r = crate::rng::from_seed(41);
        let tight: Vec<f64> = (0..40).map(|_| 1.0 + r.gen_range(-0.01..0.01)).collect();
        let wide: Vec<f64> = (0..40).map(|_| 1.0 + r.gen_range(-0.5..0.5)).collect();
        let g = group(Stage::Mci, vec![((1, "tight"), tight), ((2, "wide"), wide)]);
        let cfg = StabilityConfig::new(400, 1, 1, 9);
        let t = stability_table(&[g], &cfg).unwrap();
        assert_eq!(t[&Stage::Mci][0].gene, "tight");
    }

    #[test]
    fn selection_basics_and_strict_boundary() {
        let features: Vec<String> = ["fa", "fb", "fc"].iter().map(|s| s.to_string()).collect();
        // identical scores every iteration: deterministic top-2
        let scores = vec![vec![3.0, 2.0, 1.0]; 10];
        let out = select_stable_features(&features, &scores, 2, 0.5).unwrap();
        assert_eq!(out.selected, vec!["fa", "fb"]);
        assert_eq!(out.frequencies[0], ("fa".to_string(), 1.0));

        // feature in top-k exactly B/2 times: NOT selected under strict >
        let mut scores = Vec::new();
        for i in 0..10 {
            if i < 5 {
                scores.push(vec![3.0, 2.0, 1.0]); // fb in top-2
            } else {
                scores.push(vec![3.0, 0.0, 2.0]); // fc in top-2
            }
        }
        let out = select_stable_features(&features, &scores, 2, 0.5).unwrap();
        assert_eq!(out.selected, vec!["fa"]);

        assert!(matches!(
            select_stable_features(&features, &scores, 4, 0.5),
            Err(StabilityError::TopKExceedsFeatures { .. })
        ));
    }

    #[test]
    fn selection_recovers_a_randomized_fixture() {
        use rand::Rng;
        // 3 of 8 features forced into the top-3 in 80% of iterations
        let features: Vec<String> = (0..8).map(|i| format!("f{i}")).collect();
        let mut r = crate::rng::from_seed(51);
        let b = 500;
        let mut scores = Vec::with_capacity(b);
        for _ in 0..b {
            let mut row: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.0)).collect();
            if r.gen_bool(0.8) {
                row[1] += 10.0;
                row[4] += 10.0;
                row[6] += 10.0;
            }
            scores.push(row);
        }
        let out = select_stable_features(&features, &scores, 3, 0.5).unwrap();
        let mut sel = out.selected.clone();
        sel.sort();
        assert_eq!(sel, vec!["f1", "f4", "f6"]);
    }

    #[test]
    fn selection_is_invariant_to_iteration_order() {
        use rand::Rng;
        let features: Vec<String> = (0..5).map(|i| format!("f{i}")).collect();
        let mut r = crate::rng::from_seed(61);
        let scores: Vec<Vec<f64>> =
            (0..40).map(|_| (0..5).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let fwd = select_stable_features(&features, &scores, 2, 0.5).unwrap();
        let mut rev = scores.clone();
        rev.reverse();
        let bwd = select_stable_features(&features, &rev, 2, 0.5).unwrap();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn hypergeom_edges_and_paper_shape() {
        assert_eq!(hypergeom_tail(0, 45, 9, 105).unwrap(), 1.0);
        assert_eq!(hypergeom_tail(5, 5, 5, 5).unwrap(), 1.0);
        // paper-shaped table: sum_{k=7..9} C(45,k) C(60,9-k) / C(105,9)
        let p = hypergeom_tail(7, 45, 9, 105).unwrap();
        assert!((p - 0.0313).abs() < 1e-3, "p = {p}");
        // non-increasing in a, tail(0) = 1
        let mut prev = 1.0;
        for a in 0..=9u64 {
            let p = hypergeom_tail(a, 45, 9, 105).unwrap();
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn hypergeom_mass_sums_to_one() {
        for (k, n, total) in [(45, 9, 105), (3, 7, 10), (10, 10, 20), (1, 1, 2)] {
            let dist = hypergeom_distribution(k, n, total).unwrap();
            let mass: f64 = dist.iter().map(|(_, p)| p).sum();
            assert!((mass - 1.0).abs() < 1e-10, "mass {mass} for ({k},{n},{total})");
        }
    }

    fn genes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn fisher_edge_cases() {
        let uni = genes(&["g1", "g2", "g3", "g4"]);
        // selected = reference = universe
        let r = fisher_enrichment(&uni, &uni, &uni).unwrap();
        assert_eq!(r.table, ContingencyTable { a: 4, b: 0, c: 0, d: 0 });
        assert_eq!(r.p, 1.0);
        assert!(r.corrected);

        // disjoint selected/reference
        let r = fisher_enrichment(&genes(&["g1"]), &genes(&["g2"]), &uni).unwrap();
        assert_eq!(r.table.a, 0);
        assert_eq!(r.p, 1.0);

        assert!(matches!(
            fisher_enrichment(&genes(&["nope"]), &genes(&["g1"]), &uni),
            Err(StabilityError::NotInUniverse(_))
        ));
    }

    #[test]
    fn fisher_paper_shaped_table() {
        // universe 105, reference 45, selected 9, overlap 7
        let universe: Vec<String> = (0..105).map(|i| format!("g{i:03}")).collect();
        let reference: Vec<String> = universe[..45].to_vec();
        let mut selected: Vec<String> = universe[..7].to_vec();
        selected.extend_from_slice(&universe[45..47]);
        let r = fisher_enrichment(&selected, &reference, &universe).unwrap();
        assert_eq!(r.table, ContingencyTable { a: 7, b: 2, c: 38, d: 58 });
        assert!(!r.corrected);
        assert!((r.odds_ratio - (7.0 * 58.0) / (2.0 * 38.0)).abs() < 1e-12);
        assert!((r.odds_ratio - 5.342).abs() < 1e-3);
        assert!((r.p - 0.0313).abs() < 1e-3);
    }

    #[test]
    fn metrics_diagonal_and_hand_computed() {
        let names = genes(&["NC", "SMC", "MCI", "AD"]);
        let mut diag = vec![vec![0u64; 4]; 4];
        for c in 0..4 {
            diag[c][c] = 5 + c as u64;
        }
        let r = classification_metrics(&diag, &names).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        for m in &r.per_class {
            assert_eq!(m.precision, 1.0);
            assert_eq!(m.recall, 1.0);
            assert_eq!(m.f1, 1.0);
            assert_eq!(m.specificity, 1.0);
        }

        // [[5,5],[0,10]] embedded in 2 active classes
        let names2 = genes(&["x", "y"]);
        let m = classification_metrics(&[vec![5, 5], vec![0, 10]], &names2).unwrap();
        let c0 = &m.per_class[0];
        assert_eq!(c0.precision, 1.0);
        assert_eq!(c0.recall, 0.5);
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-12);
        let c1 = &m.per_class[1];
        assert!((c1.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c1.recall, 1.0);
        assert!((c1.f1 - 0.8).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.75);

        // all mass in one predicted column: that class's TN = 0
        let m = classification_metrics(&[vec![5, 0], vec![10, 0]], &names2).unwrap();
        assert_eq!(m.per_class[0].specificity, 0.0);
    }

    #[test]
    fn macro_f1_is_bounded_by_class_f1s() {
        use rand::Rng;
        let names = genes(&["NC", "SMC", "MCI", "AD"]);
        let mut r = crate::rng::from_seed(71);
        for _ in 0..30 {
            let confusion: Vec<Vec<u64>> =
                (0..4).map(|_| (0..4).map(|_| r.gen_range(0..20)).collect()).collect();
            if confusion.iter().flatten().sum::<u64>() == 0 {
                continue;
            }
            let m = classification_metrics(&confusion, &names).unwrap();
            let lo = m.per_class.iter().map(|c| c.f1).fold(f64::INFINITY, f64::min);
            let hi = m.per_class.iter().map(|c| c.f1).fold(f64::NEG_INFINITY, f64::max);
            assert!(m.macro_f1 >= lo - 1e-12 && m.macro_f1 <= hi + 1e-12);
        }
    }

    #[test]
    fn stability_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stab.tsv");
        let mut tables = BTreeMap::new();
        tables.insert(
            Stage::Ad,
            vec![StabilityRecord {
                roi_id: 3,
                gene: "ga".into(),
                boot_mean: 0.25,
                ci_lo_value: 0.2,
                ci_hi_value: 0.3,
                stability: 2.5,
            }],
        );
        write_stability_tsv(&tables, &p).unwrap();
        assert_eq!(read_stability_tsv(&p).unwrap(), tables);
    }
}
