//! Operator pipeline: each subcommand reads its upstream artifacts from
//! the output directory, runs one stage, and writes its own artifacts
//! under fixed names. Exit codes: 0 ok, 2 parse, 3 config, 4 empty
//! result, 5 missing artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attribution::{self, attribute_all};
use crate::config::RunConfig;
use crate::genome::{
    self, build_dataset, dataset::CohortSubject, read_gene_set, run_qc, synth_cohort,
    write_gene_set, DatasetConfig, DatasetMode, DatasetRecord, GenePanel, GenomeError,
    GenotypeMatrix, PlantedEffect, QcThresholds, Stage, SynthSpec, STAGES,
};
use crate::model::{
    self, build_model_input, forward_multimodal, greedy_decode, rit_encode, train, ModelConfig,
    ModelError, Params, TrainConfig, TrainItem, Verdict, Vocab,
};
use crate::parcel::{self, parcellate, read_patch_set, write_patch_set};
use crate::stability::{
    classification_metrics, fisher_enrichment, gene_stability_selection, read_stability_tsv,
    roi_stability_selection, stability_table, write_enrichment, write_metrics_tsv,
    write_stability_tsv, StabilityConfig, StabilityError,
};
use crate::volume::{self, RoiTable, VolumeError};

#[derive(Debug)]
pub enum PipelineError {
    Parse(String),
    Config(String),
    EmptyResult(String),
    MissingArtifact(String),
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Parse(_) => 2,
            PipelineError::Config(_) => 3,
            PipelineError::EmptyResult(_) => 4,
            PipelineError::MissingArtifact(_) => 5,
            PipelineError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Parse(m) => write!(f, "parse error: {m}"),
            PipelineError::Config(m) => write!(f, "config error: {m}"),
            PipelineError::EmptyResult(m) => write!(f, "empty result: {m}"),
            PipelineError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            PipelineError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<VolumeError> for PipelineError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::MissingArtifact(e.to_string())
            }
            VolumeError::Io(e) => PipelineError::Internal(e.to_string()),
            other => PipelineError::Parse(other.to_string()),
        }
    }
}

impl From<GenomeError> for PipelineError {
    fn from(e: GenomeError) -> Self {
        match e {
            GenomeError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::MissingArtifact(e.to_string())
            }
            GenomeError::Io(e) => PipelineError::Internal(e.to_string()),
            GenomeError::BadThreshold(m) => PipelineError::Config(m),
            GenomeError::UnknownPlantTarget(m) => PipelineError::Config(m),
            GenomeError::MissingPatchSet(m) => {
                PipelineError::MissingArtifact(format!("patch set for {m}"))
            }
            GenomeError::InsufficientSubjects(m) => PipelineError::EmptyResult(m),
            GenomeError::Parse(m) => PipelineError::Parse(m),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<parcel::ParcelError> for PipelineError {
    fn from(e: parcel::ParcelError) -> Self {
        match e {
            parcel::ParcelError::Volume(v) => v.into(),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::MissingArtifact(e.to_string())
            }
            ModelError::Io(e) => PipelineError::Internal(e.to_string()),
            ModelError::UnknownToken(w) => PipelineError::Parse(format!("unknown token {w:?}")),
            ModelError::BadCheckpoint(m) => PipelineError::Parse(m),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<attribution::AttributionError> for PipelineError {
    fn from(e: attribution::AttributionError) -> Self {
        match e {
            attribution::AttributionError::Io(ref io)
                if io.kind() == std::io::ErrorKind::NotFound =>
            {
                PipelineError::MissingArtifact(e.to_string())
            }
            attribution::AttributionError::Parse(m) => PipelineError::Parse(m),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<StabilityError> for PipelineError {
    fn from(e: StabilityError) -> Self {
        match e {
            StabilityError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::MissingArtifact(e.to_string())
            }
            StabilityError::Parse(m) => PipelineError::Parse(m),
            StabilityError::BadConfig(m) => PipelineError::Config(m),
            StabilityError::NotInUniverse(g) => {
                PipelineError::Parse(format!("gene {g} not in the panel universe"))
            }
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingArtifact(e.to_string())
        } else {
            PipelineError::Internal(e.to_string())
        }
    }
}

/// Fixed artifact layout under the output directory.
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out_dir: &str) -> Self {
        Paths { out: PathBuf::from(out_dir) }
    }

    pub fn roi_table(&self) -> PathBuf {
        self.out.join("cohort/roi_table.tsv")
    }
    pub fn panel(&self) -> PathBuf {
        self.out.join("cohort/panel.tsv")
    }
    pub fn labels(&self) -> PathBuf {
        self.out.join("cohort/labels.rvol")
    }
    pub fn volume(&self, id: &str) -> PathBuf {
        self.out.join(format!("cohort/volumes/{id}.rvol"))
    }
    /// Relative patch-set path as stored inside dataset records.
    pub fn patches_rel(id: &str) -> String {
        format!("cohort/patches/{id}.rps")
    }
    pub fn patches(&self, id: &str) -> PathBuf {
        self.out.join(Self::patches_rel(id))
    }
    pub fn genotypes(&self) -> PathBuf {
        self.out.join("cohort/genotypes.tsv")
    }
    pub fn reference_genes(&self) -> PathBuf {
        self.out.join("cohort/reference_genes.txt")
    }
    pub fn qc_report(&self) -> PathBuf {
        self.out.join("qc/qc_report.tsv")
    }
    pub fn genotypes_filtered(&self) -> PathBuf {
        self.out.join("qc/genotypes_filtered.tsv")
    }
    pub fn dataset_train(&self) -> PathBuf {
        self.out.join("dataset/train.jsonl")
    }
    pub fn dataset_test(&self) -> PathBuf {
        self.out.join("dataset/test.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("train/checkpoint.rgma")
    }
    pub fn vocab(&self) -> PathBuf {
        self.out.join("train/vocab.txt")
    }
    pub fn loss_curve(&self) -> PathBuf {
        self.out.join("train/loss_curve.tsv")
    }
    pub fn confusion(&self) -> PathBuf {
        self.out.join("eval/confusion.tsv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.out.join("eval/metrics.tsv")
    }
    pub fn attention(&self) -> PathBuf {
        self.out.join("attribute/attention.tsv")
    }
    pub fn stability(&self) -> PathBuf {
        self.out.join("stability/stability.tsv")
    }
    pub fn stable_genes(&self) -> PathBuf {
        self.out.join("stability/stable_genes.tsv")
    }
    pub fn stable_rois(&self) -> PathBuf {
        self.out.join("stability/stable_rois.tsv")
    }
    pub fn enrichment(&self) -> PathBuf {
        self.out.join("enrich/enrichment.txt")
    }
    pub fn plotdata(&self) -> PathBuf {
        self.out.join("plot/plotdata.csv")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.out.join("resolved_config.txt")
    }

    fn ensure_parent(&self, p: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(())
    }
}

/// Log the fully resolved config verbatim into the output directory.
pub fn write_resolved_config(cfg: &RunConfig) -> Result<(), PipelineError> {
    let paths = Paths::new(&cfg.out_dir);
    paths.ensure_parent(&paths.resolved_config())?;
    fs::write(paths.resolved_config(), cfg.resolved_text())?;
    Ok(())
}

fn planted_effects(cfg: &RunConfig) -> Vec<PlantedEffect> {
    cfg.planted
        .iter()
        .map(|p| PlantedEffect {
            stage: p.stage,
            roi_id: p.roi_id,
            gene: p.gene.clone(),
            effect: p.effect,
        })
        .collect()
}

/// Generate the synthetic cohort: atlas, volumes, patch sets, genotypes,
/// and the reference gene set.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let panel = SynthSpec::default_panel(cfg.n_genes, cfg.snps_per_gene);
    let roi_table = SynthSpec::default_roi_table(cfg.n_rois);
    let spec = SynthSpec {
        subjects_per_stage: cfg.subjects_per_stage,
        panel,
        roi_table,
        vol_dims: (cfg.vol_dim, cfg.vol_dim, cfg.vol_dim),
        planted: planted_effects(cfg),
        base_freq_range: (cfg.base_freq_lo, cfg.base_freq_hi),
        freq_shift_per_effect: cfg.freq_shift_per_effect,
        noise_sigma: cfg.noise_sigma,
    };
    let cohort = synth_cohort(&spec, cfg.seed)?;

    paths.ensure_parent(&paths.roi_table())?;
    cohort.roi_table.write_tsv(&paths.roi_table())?;
    cohort.panel.write_tsv(&paths.panel())?;
    volume::write_labels(&cohort.label_volume, &paths.labels())?;
    cohort.genotypes.write_tsv(&paths.genotypes())?;

    fs::create_dir_all(paths.out.join("cohort/volumes"))?;
    fs::create_dir_all(paths.out.join("cohort/patches"))?;
    let results: Vec<Result<(), PipelineError>> = cohort
        .subjects
        .par_iter()
        .zip(&cohort.volumes)
        .map(|((id, _), vol)| {
            volume::write_volume(vol, &paths.volume(id))?;
            let set = parcellate(
                vol,
                &cohort.label_volume,
                &cohort.roi_table,
                cfg.patch_size,
                id,
            )?;
            write_patch_set(&set, &paths.patches(id))?;
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    // reference set: planted genes plus a deterministic slice of the panel
    let mut reference: Vec<String> = Vec::new();
    for p in &cfg.planted {
        if !reference.contains(&p.gene) {
            reference.push(p.gene.clone());
        }
    }
    for (i, g) in cohort.panel.gene_names().into_iter().enumerate() {
        if i % 4 == 0 && !reference.contains(&g) {
            reference.push(g);
        }
    }
    write_gene_set(&reference, &paths.reference_genes())?;

    println!("wrote {}", paths.genotypes().display());
    println!("wrote {} subject volumes and patch sets", cohort.subjects.len());
    Ok(())
}

/// Run SNP quality control and write the filtered genotype matrix.
pub fn cmd_qc(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    if !paths.genotypes().exists() {
        return Err(PipelineError::MissingArtifact(format!(
            "{} (run synth first)",
            paths.genotypes().display()
        )));
    }
    let matrix = GenotypeMatrix::read_tsv(&paths.genotypes())?;
    let thresholds = QcThresholds::new(cfg.missingness_max, cfg.maf_min, cfg.hwe_p_min)?;
    let (filtered, report) = run_qc(&matrix, &thresholds)?;
    if filtered.n_snps() == 0 {
        return Err(PipelineError::EmptyResult("no SNPs survived QC".into()));
    }
    paths.ensure_parent(&paths.qc_report())?;
    report.write_tsv(&paths.qc_report())?;
    filtered.write_tsv(&paths.genotypes_filtered())?;
    println!("wrote {}", paths.qc_report().display());
    println!("wrote {}", paths.genotypes_filtered().display());
    println!("kept {} of {} SNPs", filtered.n_snps(), matrix.n_snps());
    Ok(())
}

fn load_subjects(
    paths: &Paths,
    matrix: &GenotypeMatrix,
) -> Result<Vec<CohortSubject>, PipelineError> {
    let mut subjects = Vec::with_capacity(matrix.n_subjects());
    for (row, id) in matrix.subjects.iter().enumerate() {
        let stage = matrix.stages[row].ok_or_else(|| {
            PipelineError::Parse(format!("subject {id} has no stage label"))
        })?;
        let patch_path = paths.patches(id);
        subjects.push(CohortSubject {
            id: id.clone(),
            stage,
            genome: matrix.subject_genome(row),
            patch_set_path: patch_path.exists().then(|| Paths::patches_rel(id)),
        });
    }
    Ok(subjects)
}

/// Build augmented train/test datasets under the configured mode.
pub fn cmd_dataset(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    if !paths.genotypes_filtered().exists() {
        return Err(PipelineError::MissingArtifact(format!(
            "{} (run qc first)",
            paths.genotypes_filtered().display()
        )));
    }
    let matrix = GenotypeMatrix::read_tsv(&paths.genotypes_filtered())?;
    let subjects = load_subjects(&paths, &matrix)?;
    let mode = DatasetMode::parse(&cfg.mode)
        .ok_or_else(|| PipelineError::Config(format!("unknown dataset mode {:?}", cfg.mode)))?;
    let dcfg = DatasetConfig {
        mode,
        train_count: cfg.train_count,
        test_count: cfg.test_count,
        seed: cfg.seed,
        test_subject_fraction: cfg.test_subject_fraction,
    };
    let dataset = build_dataset(&subjects, &dcfg)?;
    paths.ensure_parent(&paths.dataset_train())?;
    genome::dataset::write_dataset(&dataset.train, &paths.dataset_train())?;
    genome::dataset::write_dataset(&dataset.test, &paths.dataset_test())?;
    println!("wrote {} ({} records)", paths.dataset_train().display(), dataset.train.len());
    println!("wrote {} ({} records)", paths.dataset_test().display(), dataset.test.len());
    Ok(())
}

fn record_stage(record: &DatasetRecord) -> Result<Stage, PipelineError> {
    crate::genome::prompt::parse_target(&record.target)
        .and_then(Stage::parse)
        .ok_or_else(|| {
            PipelineError::Parse(format!("record {} has no parseable target", record.subject_id))
        })
}

fn seq_len_upper_bound(record: &DatasetRecord, n_rois: usize) -> usize {
    let prompt = record.prompt.split_whitespace().count();
    let target = record.target.split_whitespace().count() + 1;
    let image = if record.anchored { n_rois.saturating_sub(1) } else { 0 };
    prompt + target + image
}

/// Two-stage training over the train dataset; writes checkpoint, vocab,
/// and the loss curve.
pub fn cmd_train(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    for (p, hint) in [
        (paths.panel(), "synth"),
        (paths.roi_table(), "synth"),
        (paths.dataset_train(), "dataset"),
    ] {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} (run {hint} first)",
                p.display()
            )));
        }
    }
    let panel = GenePanel::read_tsv(&paths.panel())?;
    let roi_table = RoiTable::read_tsv(&paths.roi_table())?;
    let train_records = genome::dataset::read_dataset(&paths.dataset_train())?;
    let test_records = if paths.dataset_test().exists() {
        genome::dataset::read_dataset(&paths.dataset_test())?
    } else {
        Vec::new()
    };
    if train_records.is_empty() {
        return Err(PipelineError::EmptyResult("train dataset is empty".into()));
    }
    let vocab = Vocab::build(&panel);
    let n_rois = roi_table.len();
    let max_seq_len = train_records
        .iter()
        .chain(&test_records)
        .map(|r| seq_len_upper_bound(r, n_rois))
        .max()
        .unwrap_or(0)
        + cfg.max_decode_len
        + 4;
    let model_cfg = ModelConfig {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers_text: cfg.n_layers_text,
        n_layers_rit: cfg.n_layers_rit,
        patch_size: cfg.patch_size as usize,
        n_rois,
        max_seq_len,
        vocab_size: vocab.len(),
    };
    model_cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut patch_cache: BTreeMap<String, crate::parcel::RoiPatchSet> = BTreeMap::new();
    let mut items = Vec::with_capacity(train_records.len());
    for record in &train_records {
        let stage = record_stage(record)?;
        let input = build_model_input(&record.prompt, Some(&record.target), &vocab)?;
        let patch_set = match &record.patch_set {
            Some(rel) => Some(match patch_cache.get(&record.subject_id) {
                Some(ps) => ps.clone(),
                None => {
                    let ps = read_patch_set(&paths.out.join(rel), &record.subject_id)?;
                    patch_cache.insert(record.subject_id.clone(), ps.clone());
                    ps
                }
            }),
            None => None,
        };
        items.push(TrainItem { subject_id: record.subject_id.clone(), stage, input, patch_set });
    }
    let tcfg = TrainConfig {
        lr: cfg.lr,
        betas: (cfg.beta1, cfg.beta2),
        adam_eps: cfg.adam_eps,
        stage1_epochs: cfg.stage1_epochs,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let outcome = train(&items, &model_cfg, &tcfg)?;

    paths.ensure_parent(&paths.checkpoint())?;
    outcome.params.save(&paths.checkpoint())?;
    vocab.write_file(&paths.vocab())?;
    let mut curve = String::from("stage\tstep\tloss\n");
    for (i, l) in outcome.stage1_losses.iter().enumerate() {
        curve.push_str(&format!("1\t{i}\t{l}\n"));
    }
    for (i, l) in outcome.stage2_losses.iter().enumerate() {
        curve.push_str(&format!("2\t{i}\t{l}\n"));
    }
    fs::write(paths.loss_curve(), curve)?;
    println!("wrote {}", paths.checkpoint().display());
    println!("wrote {}", paths.loss_curve().display());
    if let Some(last) = outcome.stage2_losses.last() {
        println!("final stage-2 loss {last}");
    }
    Ok(())
}

fn load_image_cache(
    paths: &Paths,
    records: &[DatasetRecord],
    params: &Params,
) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
    let mut cache = BTreeMap::new();
    for record in records {
        if let Some(rel) = &record.patch_set {
            if !cache.contains_key(&record.subject_id) {
                let ps = read_patch_set(&paths.out.join(rel), &record.subject_id)?;
                let (h, _) = rit_encode(&ps, params)?;
                cache.insert(record.subject_id.clone(), h);
            }
        }
    }
    Ok(cache)
}

/// Evaluate the checkpoint on the test dataset: confusion matrix plus the
/// full metric report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    for (p, hint) in [
        (paths.checkpoint(), "train"),
        (paths.vocab(), "train"),
        (paths.dataset_test(), "dataset"),
    ] {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} (run {hint} first)",
                p.display()
            )));
        }
    }
    let params = Params::load(&paths.checkpoint())?;
    let vocab = Vocab::read_file(&paths.vocab())?;
    let records = genome::dataset::read_dataset(&paths.dataset_test())?;
    if records.is_empty() {
        return Err(PipelineError::EmptyResult("test dataset is empty".into()));
    }
    let image_cache = load_image_cache(&paths, &records, &params)?;

    let verdicts: Vec<Result<(Stage, Verdict), PipelineError>> = records
        .par_iter()
        .map(|record| {
            let stage = record_stage(record)?;
            let input = build_model_input(&record.prompt, None, &vocab)?;
            let h = record
                .anchored
                .then(|| image_cache.get(&record.subject_id).expect("cache covers anchored"));
            let verdict = greedy_decode(
                &input,
                h.map(Vec::as_slice),
                &params,
                cfg.max_decode_len,
                &vocab,
            )?;
            Ok((stage, verdict))
        })
        .collect();

    // rows: true stage; columns: predicted stage + unparseable
    let mut confusion4 = vec![vec![0u64; 4]; 4];
    let mut unparseable = vec![0u64; 4];
    let mut correct = 0u64;
    for v in verdicts {
        let (stage, verdict) = v?;
        match verdict {
            Verdict::Label(l) => {
                let p = Stage::parse(l).expect("decoded labels are stages");
                confusion4[stage.index()][p.index()] += 1;
                if p == stage {
                    correct += 1;
                }
            }
            Verdict::Unparseable => unparseable[stage.index()] += 1,
        }
    }
    paths.ensure_parent(&paths.confusion())?;
    let mut out = String::from("true\tNC\tSMC\tMCI\tAD\tUNPARSEABLE\n");
    for (si, stage) in STAGES.iter().enumerate() {
        out.push_str(stage.as_str());
        for p in 0..4 {
            out.push_str(&format!("\t{}", confusion4[si][p]));
        }
        out.push_str(&format!("\t{}\n", unparseable[si]));
    }
    fs::write(paths.confusion(), out)?;

    let class_names: Vec<String> = STAGES.iter().map(|s| s.as_str().to_string()).collect();
    let mut report = classification_metrics(&confusion4, &class_names)?;
    // unparseable generations count as wrong in accuracy
    report.accuracy = correct as f64 / records.len() as f64;
    write_metrics_tsv(&report, &paths.metrics())?;
    println!("wrote {}", paths.confusion().display());
    println!("wrote {}", paths.metrics().display());
    println!("accuracy {:.4} macro_f1 {:.4}", report.accuracy, report.macro_f1);
    Ok(())
}

/// Attention-rollout attribution over every subject with a patch set.
pub fn cmd_attribute(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    for (p, hint) in [
        (paths.checkpoint(), "train"),
        (paths.vocab(), "train"),
        (paths.genotypes_filtered(), "qc"),
        (paths.roi_table(), "synth"),
    ] {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} (run {hint} first)",
                p.display()
            )));
        }
    }
    let params = Params::load(&paths.checkpoint())?;
    let vocab = Vocab::read_file(&paths.vocab())?;
    let roi_table = RoiTable::read_tsv(&paths.roi_table())?;
    let matrix = GenotypeMatrix::read_tsv(&paths.genotypes_filtered())?;
    let gene_names = matrix.derived_panel()?.gene_names();

    let traces: Vec<Result<(String, Stage, model::ForwardTrace), PipelineError>> = (0..matrix
        .n_subjects())
        .into_par_iter()
        .map(|row| {
            let id = matrix.subjects[row].clone();
            let stage = matrix.stages[row].ok_or_else(|| {
                PipelineError::Parse(format!("subject {id} has no stage label"))
            })?;
            let genome_text = genome::prompt::serialize_genome(&matrix.subject_genome(row))
                .map_err(PipelineError::from)?;
            let prompt = genome::prompt::build_prompt(&genome_text, true, None, &id)?;
            let input = build_model_input(&prompt.text, None, &vocab)?;
            let ps = read_patch_set(&paths.patches(&id), &id)?;
            let (h, _) = rit_encode(&ps, &params)?;
            let trace = forward_multimodal(&input, Some(&h), &params)?;
            Ok((id, stage, trace))
        })
        .collect();
    let mut inputs = Vec::with_capacity(matrix.n_subjects());
    for t in traces {
        inputs.push(t?);
    }
    let maps = attribute_all(inputs, &roi_table, &gene_names)?;
    paths.ensure_parent(&paths.attention())?;
    attribution::write_attention_tsv(&maps, &paths.attention())?;
    println!("wrote {} ({} subjects)", paths.attention().display(), maps.len());
    Ok(())
}

fn stability_cfg(cfg: &RunConfig) -> StabilityConfig {
    StabilityConfig {
        n_bootstrap: cfg.n_bootstrap,
        ci_lo: cfg.ci_lo,
        ci_hi: cfg.ci_hi,
        selection_threshold: cfg.selection_threshold,
        top_k_genes: cfg.top_k_genes,
        top_k_rois: cfg.top_k_rois,
        epsilon_width: cfg.epsilon_width,
        seed: cfg.seed,
    }
}

/// Diagnostic groups analysed for stability, per the disease-progression
/// focus: SMC, MCI, AD.
const STABILITY_STAGES: [Stage; 3] = [Stage::Smc, Stage::Mci, Stage::Ad];

/// Bootstrap stability tables plus stable gene/ROI selection.
pub fn cmd_stability(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    if !paths.attention().exists() {
        return Err(PipelineError::MissingArtifact(format!(
            "{} (run attribute first)",
            paths.attention().display()
        )));
    }
    let maps = attribution::read_attention_tsv(&paths.attention())?;
    if maps.is_empty() {
        return Err(PipelineError::EmptyResult("attention export is empty".into()));
    }
    let scfg = stability_cfg(cfg);
    scfg.validate()?;

    let mut groups = Vec::new();
    for stage in STABILITY_STAGES {
        if maps.iter().any(|m| m.stage == stage) {
            groups.push(attribution::aggregate_group(&maps, stage)?);
        }
    }
    if groups.is_empty() {
        return Err(PipelineError::EmptyResult("no SMC/MCI/AD subjects to analyse".into()));
    }
    let tables = stability_table(&groups, &scfg)?;
    paths.ensure_parent(&paths.stability())?;
    write_stability_tsv(&tables, &paths.stability())?;

    let gene_names: Vec<String> = {
        let mut names: Vec<String> =
            maps[0].weights.keys().map(|(_, g)| g.clone()).collect();
        names.dedup();
        names.sort();
        names
    };
    let genes = gene_stability_selection(&maps, &gene_names, &scfg)?;
    let mut out = String::from("gene\tfrequency\tselected\n");
    for (g, f) in &genes.frequencies {
        out.push_str(&format!("{g}\t{f}\t{}\n", genes.selected.contains(g)));
    }
    fs::write(paths.stable_genes(), out)?;

    let roi_ids: Vec<u32> = {
        let mut ids: Vec<u32> = maps[0].weights.keys().map(|(r, _)| *r).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let mut out = String::from("stage\troi_id\tfrequency\tselected\n");
    for stage in STABILITY_STAGES {
        if !maps.iter().any(|m| m.stage == stage) {
            continue;
        }
        let rois = roi_stability_selection(&maps, &roi_ids, stage, &scfg)?;
        for (r, f) in &rois.frequencies {
            out.push_str(&format!("{stage}\t{r}\t{f}\t{}\n", rois.selected.contains(r)));
        }
    }
    fs::write(paths.stable_rois(), out)?;

    println!("wrote {}", paths.stability().display());
    println!("wrote {}", paths.stable_genes().display());
    println!("wrote {}", paths.stable_rois().display());
    Ok(())
}

fn read_stable_genes(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("gene\tfrequency\tselected") {
        return Err(PipelineError::Parse("bad stable_genes header".into()));
    }
    let mut selected = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(PipelineError::Parse(format!("bad stable_genes row {line:?}")));
        }
        if f[2] == "true" {
            selected.push(f[0].to_string());
        }
    }
    Ok(selected)
}

/// Per-stage stable ROI sets from the stable_rois artifact.
fn read_stable_rois(path: &Path) -> Result<BTreeMap<Stage, Vec<u32>>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("stage\troi_id\tfrequency\tselected") {
        return Err(PipelineError::Parse("bad stable_rois header".into()));
    }
    let mut out: BTreeMap<Stage, Vec<u32>> = BTreeMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(PipelineError::Parse(format!("bad stable_rois row {line:?}")));
        }
        let stage = Stage::parse(f[0])
            .ok_or_else(|| PipelineError::Parse(format!("bad stage {:?}", f[0])))?;
        if f[3] == "true" {
            let roi: u32 = f[1]
                .parse()
                .map_err(|_| PipelineError::Parse(format!("bad roi id {:?}", f[1])))?;
            out.entry(stage).or_default().push(roi);
        }
    }
    Ok(out)
}

/// Fisher enrichment of the stable gene set against the reference set
/// within the panel universe.
pub fn cmd_enrich(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let reference_path = if Path::new(&cfg.reference).is_absolute() {
        PathBuf::from(&cfg.reference)
    } else {
        paths.out.join(&cfg.reference)
    };
    for (p, hint) in [
        (paths.stable_genes(), "stability".to_string()),
        (paths.panel(), "synth".to_string()),
        (reference_path.clone(), format!("provide {}", cfg.reference)),
    ] {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} ({hint})",
                p.display()
            )));
        }
    }
    let selected = read_stable_genes(&paths.stable_genes())?;
    let reference = read_gene_set(&reference_path)?;
    let universe = GenePanel::read_tsv(&paths.panel())?.gene_names();
    let result = fisher_enrichment(&selected, &reference, &universe)?;
    paths.ensure_parent(&paths.enrichment())?;
    write_enrichment(&result, &paths.enrichment())?;
    println!("wrote {}", paths.enrichment().display());
    println!(
        "a={} b={} c={} d={} p={} odds_ratio={} corrected={}",
        result.table.a,
        result.table.b,
        result.table.c,
        result.table.d,
        result.p,
        result.odds_ratio,
        result.corrected
    );
    Ok(())
}

/// Manhattan-style plot data: contiguous ROI blocks, top-2 stability rows
/// per ROI flagged for annotation.
pub fn cmd_plotdata(cfg: &RunConfig) -> Result<(), PipelineError> {
    write_resolved_config(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    for (p, hint) in [(paths.stability(), "stability"), (paths.roi_table(), "synth")] {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} (run {hint} first)",
                p.display()
            )));
        }
    }
    let tables = read_stability_tsv(&paths.stability())?;
    let roi_table = RoiTable::read_tsv(&paths.roi_table())?;

    let filters: BTreeMap<Stage, Vec<u32>> = if cfg.rois == "stable" {
        if !paths.stable_rois().exists() {
            return Err(PipelineError::MissingArtifact(format!(
                "{} (run stability first)",
                paths.stable_rois().display()
            )));
        }
        read_stable_rois(&paths.stable_rois())?
    } else {
        let ids: Vec<u32> = cfg
            .rois
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| PipelineError::Config(format!("bad roi id {s:?}")))
            })
            .collect::<Result<_, _>>()?;
        tables.keys().map(|stage| (*stage, ids.clone())).collect()
    };
    for ids in filters.values() {
        for id in ids {
            if roi_table.index_of(*id).is_none() {
                return Err(PipelineError::Config(format!("roi {id} not in the ROI table")));
            }
        }
    }

    let mut out = String::from("roi_block_index,roi_id,gene,stability,stage,annotate_flag\n");
    for stage in STAGES {
        let Some(records) = tables.get(&stage) else { continue };
        let Some(filter) = filters.get(&stage) else { continue };
        // blocks ordered by the ROI table, contiguous indices per stage
        let mut block = 0usize;
        for roi_id in roi_table.ids() {
            if !filter.contains(&roi_id) {
                continue;
            }
            let mut rows: Vec<&crate::stability::StabilityRecord> =
                records.iter().filter(|r| r.roi_id == roi_id).collect();
            rows.sort_by(|a, b| {
                b.stability.partial_cmp(&a.stability).expect("finite").then(a.gene.cmp(&b.gene))
            });
            let annotate: Vec<&str> =
                rows.iter().take(2).map(|r| r.gene.as_str()).collect();
            rows.sort_by(|a, b| a.gene.cmp(&b.gene));
            for r in rows {
                out.push_str(&format!(
                    "{block},{roi_id},{},{:.16e},{stage},{}\n",
                    r.gene,
                    r.stability,
                    annotate.contains(&r.gene.as_str())
                ));
            }
            block += 1;
        }
    }
    paths.ensure_parent(&paths.plotdata())?;
    fs::write(paths.plotdata(), out)?;
    println!("wrote {}", paths.plotdata().display());
    Ok(())
}
