//! Attention-rollout attribution: collapses a forward trace's layered
//! attention into one end-to-end relevance matrix and extracts per-subject
//! ROI–gene weights from its image-row × gene-column blocks.
//!
//! Rollout uses the residual-aware form: per layer, heads are averaged,
//! mixed half-and-half with the identity, row-renormalized, and the
//! per-layer matrices are multiplied last-layer-first.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::genome::Stage;
use crate::model::{ForwardTrace, SeqSpan};
use crate::volume::RoiTable;

#[derive(Debug)]
pub enum AttributionError {
    EmptyTrace,
    MissingSpan(String),
    EmptyGroup(Stage),
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for AttributionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributionError::EmptyTrace => write!(f, "trace has no attention layers"),
            AttributionError::MissingSpan(m) => write!(f, "missing span: {m}"),
            AttributionError::EmptyGroup(s) => write!(f, "no subjects in stage {s}"),
            AttributionError::Parse(m) => write!(f, "parse error: {m}"),
            AttributionError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for AttributionError {}

impl From<std::io::Error> for AttributionError {
    fn from(e: std::io::Error) -> Self {
        AttributionError::Io(e)
    }
}

/// Row-stochastic relevance matrix over combined sequence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl RolloutMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn assert_stochastic(&self, tol: f64) {
        for i in 0..self.n {
            let row = &self.values[i * self.n..(i + 1) * self.n];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < tol, "row {i} sums to {sum}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

/// Average heads, mix with identity, renormalize rows: one layer's
/// residual-aware transition matrix.
fn layer_transition(heads: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    let h = heads.len() as f64;
    for head in heads {
        for (tv, &a) in t.iter_mut().zip(head) {
            *tv += a / h;
        }
    }
    for i in 0..n {
        let row = &mut t[i * n..(i + 1) * n];
        for v in row.iter_mut() {
            *v *= 0.5;
        }
        row[i] += 0.5;
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    t
}

fn mat_product(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[k * n..(k + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// Attention rollout: R = T_L · T_{L-1} · ... · T_1.
pub fn attention_rollout(trace: &ForwardTrace) -> Result<RolloutMatrix, AttributionError> {
    if trace.attn.is_empty() {
        return Err(AttributionError::EmptyTrace);
    }
    let n = trace.seq_len;
    let mut rollout = layer_transition(&trace.attn[0], n);
    for layer in &trace.attn[1..] {
        let t = layer_transition(layer, n);
        rollout = mat_product(&t, &rollout, n);
    }
    Ok(RolloutMatrix { n, values: rollout })
}

/// Per-subject ROI–gene attention weights a(s,r,g).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGeneAttentionMap {
    pub subject_id: String,
    pub stage: Stage,
    /// (roi_id, gene) -> mean rollout mass from that ROI's image row block
    /// to that gene's token columns. Every pair of the tables is present.
    pub weights: BTreeMap<(u32, String), f64>,
}

/// a(r,g) = mean over image positions of ROI r and genetic positions of
/// gene g of rollout[i][j]. Template and target positions are ignored.
pub fn roi_gene_weights(
    rollout: &RolloutMatrix,
    spans: &[SeqSpan],
    roi_table: &RoiTable,
    gene_names: &[String],
    subject_id: &str,
    stage: Stage,
) -> Result<RoiGeneAttentionMap, AttributionError> {
    if spans.len() != rollout.n {
        return Err(AttributionError::MissingSpan(format!(
            "{} spans for {} positions",
            spans.len(),
            rollout.n
        )));
    }
    let mut image_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut gene_cols: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, span) in spans.iter().enumerate() {
        match span {
            SeqSpan::ImageRoi(r) => image_rows.entry(*r).or_default().push(pos),
            SeqSpan::Gene(g) => gene_cols.entry(g.as_str()).or_default().push(pos),
            _ => {}
        }
    }
    if image_rows.is_empty() {
        return Err(AttributionError::MissingSpan("no image positions in trace".into()));
    }
    let mut weights = BTreeMap::new();
    for (ri, (roi_id, _)) in roi_table.entries.iter().enumerate() {
        let rows = image_rows.get(&ri).ok_or_else(|| {
            AttributionError::MissingSpan(format!("roi index {ri} absent from spans"))
        })?;
        for gene in gene_names {
            let cols = gene_cols.get(gene.as_str()).ok_or_else(|| {
                AttributionError::MissingSpan(format!("gene {gene} absent from spans"))
            })?;
            let mut sum = 0.0;
            for &i in rows {
                for &j in cols {
                    sum += rollout.at(i, j);
                }
            }
            weights.insert((*roi_id, gene.clone()), sum / (rows.len() * cols.len()) as f64);
        }
    }
    Ok(RoiGeneAttentionMap { subject_id: subject_id.to_string(), stage, weights })
}

/// Ordered per-pair sample X(r,g) over one diagnostic group's subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSamples {
    pub stage: Stage,
    /// (roi_id, gene) -> a(s,r,g) in subject-id order.
    pub samples: BTreeMap<(u32, String), Vec<f64>>,
}

/// Collect a(s,r,g) across the subjects of one stage, ordered by subject
/// id for determinism.
pub fn aggregate_group(
    maps: &[RoiGeneAttentionMap],
    stage: Stage,
) -> Result<GroupSamples, AttributionError> {
    let mut members: Vec<&RoiGeneAttentionMap> =
        maps.iter().filter(|m| m.stage == stage).collect();
    if members.is_empty() {
        return Err(AttributionError::EmptyGroup(stage));
    }
    members.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut samples: BTreeMap<(u32, String), Vec<f64>> = BTreeMap::new();
    for m in members {
        for (pair, &w) in &m.weights {
            samples.entry(pair.clone()).or_default().push(w);
        }
    }
    Ok(GroupSamples { stage, samples })
}

/// Per-subject attribution over many traces, embarrassingly parallel.
pub fn attribute_all(
    inputs: Vec<(String, Stage, ForwardTrace)>,
    roi_table: &RoiTable,
    gene_names: &[String],
) -> Result<Vec<RoiGeneAttentionMap>, AttributionError> {
    inputs
        .into_par_iter()
        .map(|(subject_id, stage, trace)| {
            let rollout = attention_rollout(&trace)?;
            roi_gene_weights(&rollout, &trace.spans, roi_table, gene_names, &subject_id, stage)
        })
        .collect()
}

/// TSV `subject_id\tstage\troi_id\tgene\tweight`, weights at 17
/// significant digits for exact reload.
pub fn write_attention_tsv(
    maps: &[RoiGeneAttentionMap],
    path: &Path,
) -> Result<(), AttributionError> {
    let mut out = String::from("subject_id\tstage\troi_id\tgene\tweight\n");
    for m in maps {
        for ((roi_id, gene), w) in &m.weights {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.16e}\n",
                m.subject_id, m.stage, roi_id, gene, w
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_attention_tsv(path: &Path) -> Result<Vec<RoiGeneAttentionMap>, AttributionError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("subject_id\tstage\troi_id\tgene\tweight") => {}
        other => return Err(AttributionError::Parse(format!("bad header {other:?}"))),
    }
    let mut maps: Vec<RoiGeneAttentionMap> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(AttributionError::Parse(format!("bad row {line:?}")));
        }
        let stage = Stage::parse(fields[1])
            .ok_or_else(|| AttributionError::Parse(format!("bad stage {:?}", fields[1])))?;
        let roi_id: u32 = fields[2]
            .parse()
            .map_err(|_| AttributionError::Parse(format!("bad roi_id {:?}", fields[2])))?;
        let weight: f64 = fields[4]
            .parse()
            .map_err(|_| AttributionError::Parse(format!("bad weight {:?}", fields[4])))?;
        match maps.last_mut() {
            Some(m) if m.subject_id == fields[0] => {
                m.weights.insert((roi_id, fields[3].to_string()), weight);
            }
            _ => {
                let mut weights = BTreeMap::new();
                weights.insert((roi_id, fields[3].to_string()), weight);
                maps.push(RoiGeneAttentionMap {
                    subject_id: fields[0].to_string(),
                    stage,
                    weights,
                });
            }
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from_layers(n: usize, layers: Vec<Vec<Vec<f64>>>) -> ForwardTrace {
        ForwardTrace {
            seq_len: n,
            spans: vec![SeqSpan::Template; n],
            attn: layers,
            logits: vec![0.0; n],
            loss_positions: vec![],
            targets: vec![],
        }
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    #[test]
    fn identity_attention_rolls_out_to_identity() {
        let n = 4;
        let layers = vec![vec![identity(n); 2], vec![identity(n); 2]];
        let r = attention_rollout(&trace_from_layers(n, layers)).unwrap();
        assert_eq!(r.values, identity(n));
    }

    #[test]
    fn uniform_single_layer_has_closed_form() {
        let n = 5;
        let uniform = vec![1.0 / n as f64; n * n];
        let r = attention_rollout(&trace_from_layers(n, vec![vec![uniform; 2]])).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 0.5 + 0.5 / n as f64 } else { 0.5 / n as f64 };
                assert!((r.at(i, j) - expect).abs() < 1e-12);
            }
        }
        r.assert_stochastic(1e-9);
    }

    fn random_stochastic(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::from_seed(seed);
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut m[i * n..(i + 1) * n];
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
            }
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        m
    }

    #[test]
    fn two_layers_equal_explicit_product() {
        let n = 6;
        let a1 = random_stochastic(n, 1);
        let a2 = random_stochastic(n, 2);
        let r =
            attention_rollout(&trace_from_layers(n, vec![vec![a1.clone()], vec![a2.clone()]]))
                .unwrap();
        // direct product oracle with explicit loops
        let t = |a: &Vec<f64>| -> Vec<f64> {
            let mut t = vec![0.0; n * n];
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    t[i * n + j] = 0.5 * a[i * n + j] + if i == j { 0.5 } else { 0.0 };
                    sum += t[i * n + j];
                }
                for j in 0..n {
                    t[i * n + j] /= sum;
                }
            }
            t
        };
        let (t1, t2) = (t(&a1), t(&a2));
        for i in 0..n {
            for j in 0..n {
                let mut expect = 0.0;
                for k in 0..n {
                    expect += t2[i * n + k] * t1[k * n + j];
                }
                assert!((r.at(i, j) - expect).abs() < 1e-12);
            }
        }
        r.assert_stochastic(1e-9);
    }

    #[test]
    fn rollout_is_associative_over_layers() {
        let n = 5;
        let layers: Vec<Vec<Vec<f64>>> =
            (0..4).map(|s| vec![random_stochastic(n, 10 + s)]).collect();
        let full = attention_rollout(&trace_from_layers(n, layers.clone())).unwrap();
        let first3 = attention_rollout(&trace_from_layers(n, layers[..3].to_vec())).unwrap();
        let t4 = layer_transition(&layers[3], n);
        let manual = mat_product(&t4, &first3.values, n);
        for (a, b) in full.values.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
        full.assert_stochastic(1e-9);
    }

    fn table2() -> RoiTable {
        RoiTable::new(vec![(1, "r1".into()), (2, "r2".into())]).unwrap()
    }

    fn spans_2x2() -> Vec<SeqSpan> {
        vec![
            SeqSpan::Template,
            SeqSpan::Gene("ga".into()),
            SeqSpan::Gene("ga".into()),
            SeqSpan::Gene("gb".into()),
            SeqSpan::ImageRoi(0),
            SeqSpan::ImageRoi(1),
            SeqSpan::Target,
        ]
    }

    #[test]
    fn identity_rollout_gives_zero_cross_weights() {
        let n = 7;
        let rollout = RolloutMatrix { n, values: identity(n) };
        let genes = vec!["ga".to_string(), "gb".to_string()];
        let m =
            roi_gene_weights(&rollout, &spans_2x2(), &table2(), &genes, "s1", Stage::Ad).unwrap();
        assert_eq!(m.weights.len(), 4);
        assert!(m.weights.values().all(|&w| w == 0.0));
    }

    #[test]
    fn single_cell_case_and_block_means() {
        let n = 7;
        let mut values = vec![0.0; n * n];
        // fill distinct values; block means computed by hand below
        for (i, v) in values.iter_mut().enumerate() {
            *v = i as f64;
        }
        let rollout = RolloutMatrix { n, values: values.clone() };
        let genes = vec!["ga".to_string(), "gb".to_string()];
        let m =
            roi_gene_weights(&rollout, &spans_2x2(), &table2(), &genes, "s1", Stage::Ad).unwrap();
        // roi 1 rows {4}, ga cols {1,2}; gb col {3}
        let at = |i: usize, j: usize| values[i * n + j];
        assert_eq!(m.weights[&(1, "ga".into())], (at(4, 1) + at(4, 2)) / 2.0);
        assert_eq!(m.weights[&(1, "gb".into())], at(4, 3));
        assert_eq!(m.weights[&(2, "ga".into())], (at(5, 1) + at(5, 2)) / 2.0);
        assert_eq!(m.weights[&(2, "gb".into())], at(5, 3));
    }

    #[test]
    fn weights_are_linear_in_the_rollout() {
        use rand::Rng;
        let n = 7;
        let genes = vec!["ga".to_string(), "gb".to_string()];
        let mut rng = crate::rng::from_seed(21);
        let r1 = RolloutMatrix { n, values: (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect() };
        let r2 = RolloutMatrix { n, values: (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect() };
        for alpha in [0.0, 0.3, 1.0] {
            let mix = RolloutMatrix {
                n,
                values: r1
                    .values
                    .iter()
                    .zip(&r2.values)
                    .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                    .collect(),
            };
            let w1 =
                roi_gene_weights(&r1, &spans_2x2(), &table2(), &genes, "s", Stage::Nc).unwrap();
            let w2 =
                roi_gene_weights(&r2, &spans_2x2(), &table2(), &genes, "s", Stage::Nc).unwrap();
            let wm =
                roi_gene_weights(&mix, &spans_2x2(), &table2(), &genes, "s", Stage::Nc).unwrap();
            for (pair, &w) in &wm.weights {
                let expect = alpha * w1.weights[pair] + (1.0 - alpha) * w2.weights[pair];
                assert!((w - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_aggregation_orders_by_subject_id() {
        let genes = vec!["ga".to_string()];
        let mk = |id: &str, stage: Stage, w: f64| {
            let mut weights = BTreeMap::new();
            weights.insert((1u32, genes[0].clone()), w);
            RoiGeneAttentionMap { subject_id: id.into(), stage, weights }
        };
        let maps = vec![
            mk("s3", Stage::Ad, 0.3),
            mk("s1", Stage::Ad, 0.1),
            mk("s2", Stage::Ad, 0.2),
            mk("x1", Stage::Nc, 0.9),
        ];
        let g = aggregate_group(&maps, Stage::Ad).unwrap();
        assert_eq!(g.samples[&(1, "ga".into())], vec![0.1, 0.2, 0.3]);
        let single = aggregate_group(&maps, Stage::Nc).unwrap();
        assert_eq!(single.samples[&(1, "ga".into())].len(), 1);
        assert!(matches!(
            aggregate_group(&maps, Stage::Smc),
            Err(AttributionError::EmptyGroup(Stage::Smc))
        ));
    }

    #[test]
    fn attention_tsv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("attn.tsv");
        let mut weights = BTreeMap::new();
        weights.insert((1u32, "ga".to_string()), 0.123456789012345678);
        weights.insert((2u32, "gb".to_string()), 1e-17);
        let maps = vec![RoiGeneAttentionMap {
            subject_id: "s1".into(),
            stage: Stage::Mci,
            weights,
        }];
        write_attention_tsv(&maps, &p).unwrap();
        let back = read_attention_tsv(&p).unwrap();
        assert_eq!(back, maps);
    }
}
