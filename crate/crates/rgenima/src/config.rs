//! Sectioned key=value run configuration.
//!
//! Unknown sections or keys are rejected outright. Every run writes the
//! fully resolved configuration back out; feeding that file in again
//! reproduces the run (config closure).

use std::fmt;
use std::fs;
use std::path::Path;

use crate::genome::Stage;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub stage: Stage,
    pub roi_id: u32,
    pub gene: String,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub out_dir: String,
    // [synth]
    pub subjects_per_stage: [usize; 4],
    pub n_rois: usize,
    pub n_genes: usize,
    pub snps_per_gene: usize,
    pub vol_dim: u32,
    pub patch_size: u32,
    pub planted: Vec<PlantedSpec>,
    pub base_freq_lo: f64,
    pub base_freq_hi: f64,
    pub freq_shift_per_effect: f64,
    pub noise_sigma: f64,
    // [qc]
    pub missingness_max: f64,
    pub maf_min: f64,
    pub hwe_p_min: f64,
    // [dataset]
    pub mode: String,
    pub train_count: usize,
    pub test_count: usize,
    pub test_subject_fraction: f64,
    // [model]
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_text: usize,
    pub n_layers_rit: usize,
    // [train]
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub stage1_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    // [eval]
    pub max_decode_len: usize,
    // [stability]
    pub n_bootstrap: usize,
    pub top_k_genes: usize,
    pub top_k_rois: usize,
    pub selection_threshold: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub epsilon_width: f64,
    // [enrich]
    pub reference: String,
    // [plotdata]
    pub rois: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "out".into(),
            subjects_per_stage: [20, 20, 20, 20],
            n_rois: 12,
            n_genes: 10,
            snps_per_gene: 5,
            vol_dim: 24,
            patch_size: 8,
            planted: Vec::new(),
            base_freq_lo: 0.3,
            base_freq_hi: 0.5,
            freq_shift_per_effect: 0.15,
            noise_sigma: 1.0,
            missingness_max: 0.95,
            maf_min: 0.05,
            hwe_p_min: 1e-6,
            mode: "mixture".into(),
            train_count: 400,
            test_count: 100,
            test_subject_fraction: 0.2,
            d_model: 32,
            n_heads: 2,
            n_layers_text: 2,
            n_layers_rit: 1,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stage1_epochs: 10,
            epochs: 4,
            batch_size: 8,
            max_decode_len: 8,
            n_bootstrap: 1000,
            top_k_genes: 3,
            top_k_rois: 4,
            selection_threshold: 0.5,
            ci_lo: 2.5,
            ci_hi: 97.5,
            epsilon_width: 1e-12,
            reference: "cohort/reference_genes.txt".into(),
            rois: "stable".into(),
        }
    }
}

fn parse_planted(value: &str) -> Result<Vec<PlantedSpec>, ConfigError> {
    let mut out = Vec::new();
    for item in value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(ConfigError(format!(
                "planted entry {item:?} must be stage:roi_id:gene:effect"
            )));
        }
        let stage = Stage::parse(parts[0])
            .ok_or_else(|| ConfigError(format!("bad stage {:?}", parts[0])))?;
        let roi_id: u32 =
            parts[1].parse().map_err(|_| ConfigError(format!("bad roi_id {:?}", parts[1])))?;
        let effect: f64 =
            parts[3].parse().map_err(|_| ConfigError(format!("bad effect {:?}", parts[3])))?;
        out.push(PlantedSpec { stage, roi_id, gene: parts[2].to_string(), effect });
    }
    Ok(out)
}

fn planted_string(planted: &[PlantedSpec]) -> String {
    planted
        .iter()
        .map(|p| format!("{}:{}:{}:{}", p.stage, p.roi_id, p.gene, p.effect))
        .collect::<Vec<_>>()
        .join(";")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                match section.as_str() {
                    "run" | "synth" | "qc" | "dataset" | "model" | "train" | "eval"
                    | "stability" | "enrich" | "plotdata" => {}
                    other => {
                        return Err(ConfigError(format!(
                            "unknown section [{other}] at line {}",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("expected key = value at line {}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(&section, key, value)
                .map_err(|e| ConfigError(format!("{} (line {})", e.0, lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! num {
            () => {
                value
                    .parse()
                    .map_err(|_| ConfigError(format!("bad value {value:?} for {section}.{key}")))?
            };
        }
        match (section, key) {
            ("run", "seed") => self.seed = num!(),
            ("run", "out_dir") => self.out_dir = value.to_string(),
            ("synth", "subjects_per_stage") => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(ConfigError(format!(
                        "subjects_per_stage needs 4 comma-separated counts, got {value:?}"
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.subjects_per_stage[i] =
                        p.parse().map_err(|_| ConfigError(format!("bad subject count {p:?}")))?;
                }
            }
            ("synth", "n_rois") => self.n_rois = num!(),
            ("synth", "n_genes") => self.n_genes = num!(),
            ("synth", "snps_per_gene") => self.snps_per_gene = num!(),
            ("synth", "vol_dim") => self.vol_dim = num!(),
            ("synth", "patch_size") => self.patch_size = num!(),
            ("synth", "planted") => self.planted = parse_planted(value)?,
            ("synth", "base_freq_lo") => self.base_freq_lo = num!(),
            ("synth", "base_freq_hi") => self.base_freq_hi = num!(),
            ("synth", "freq_shift_per_effect") => self.freq_shift_per_effect = num!(),
            ("synth", "noise_sigma") => self.noise_sigma = num!(),
            ("qc", "missingness_max") => self.missingness_max = num!(),
            ("qc", "maf_min") => self.maf_min = num!(),
            ("qc", "hwe_p_min") => self.hwe_p_min = num!(),
            ("dataset", "mode") => self.mode = value.to_string(),
            ("dataset", "train_count") => self.train_count = num!(),
            ("dataset", "test_count") => self.test_count = num!(),
            ("dataset", "test_subject_fraction") => self.test_subject_fraction = num!(),
            ("model", "d_model") => self.d_model = num!(),
            ("model", "n_heads") => self.n_heads = num!(),
            ("model", "n_layers_text") => self.n_layers_text = num!(),
            ("model", "n_layers_rit") => self.n_layers_rit = num!(),
            ("train", "lr") => self.lr = num!(),
            ("train", "beta1") => self.beta1 = num!(),
            ("train", "beta2") => self.beta2 = num!(),
            ("train", "adam_eps") => self.adam_eps = num!(),
            ("train", "stage1_epochs") => self.stage1_epochs = num!(),
            ("train", "epochs") => self.epochs = num!(),
            ("train", "batch_size") => self.batch_size = num!(),
            ("eval", "max_decode_len") => self.max_decode_len = num!(),
            ("stability", "n_bootstrap") => self.n_bootstrap = num!(),
            ("stability", "top_k_genes") => self.top_k_genes = num!(),
            ("stability", "top_k_rois") => self.top_k_rois = num!(),
            ("stability", "selection_threshold") => self.selection_threshold = num!(),
            ("stability", "ci_lo") => self.ci_lo = num!(),
            ("stability", "ci_hi") => self.ci_hi = num!(),
            ("stability", "epsilon_width") => self.epsilon_width = num!(),
            ("enrich", "reference") => self.reference = value.to_string(),
            ("plotdata", "rois") => self.rois = value.to_string(),
            _ => return Err(ConfigError(format!("unknown key {section}.{key}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.mode != "gene_only" && self.mode != "image_gene" && self.mode != "mixture" {
            return Err(ConfigError(format!("dataset.mode {:?} unknown", self.mode)));
        }
        if self.rois != "stable" {
            for part in self.rois.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                part.parse::<u32>().map_err(|_| {
                    ConfigError(format!("plotdata.rois entry {part:?} is not a roi id"))
                })?;
            }
        }
        Ok(())
    }

    /// Canonical full-text form; parsing it reproduces this config.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out_dir = {}\n", self.out_dir));
        s.push_str("\n[synth]\n");
        s.push_str(&format!(
            "subjects_per_stage = {},{},{},{}\n",
            self.subjects_per_stage[0],
            self.subjects_per_stage[1],
            self.subjects_per_stage[2],
            self.subjects_per_stage[3]
        ));
        s.push_str(&format!("n_rois = {}\n", self.n_rois));
        s.push_str(&format!("n_genes = {}\n", self.n_genes));
        s.push_str(&format!("snps_per_gene = {}\n", self.snps_per_gene));
        s.push_str(&format!("vol_dim = {}\n", self.vol_dim));
        s.push_str(&format!("patch_size = {}\n", self.patch_size));
        s.push_str(&format!("planted = {}\n", planted_string(&self.planted)));
        s.push_str(&format!("base_freq_lo = {}\n", self.base_freq_lo));
        s.push_str(&format!("base_freq_hi = {}\n", self.base_freq_hi));
        s.push_str(&format!("freq_shift_per_effect = {}\n", self.freq_shift_per_effect));
        s.push_str(&format!("noise_sigma = {}\n", self.noise_sigma));
        s.push_str("\n[qc]\n");
        s.push_str(&format!("missingness_max = {}\n", self.missingness_max));
        s.push_str(&format!("maf_min = {}\n", self.maf_min));
        s.push_str(&format!("hwe_p_min = {}\n", self.hwe_p_min));
        s.push_str("\n[dataset]\n");
        s.push_str(&format!("mode = {}\n", self.mode));
        s.push_str(&format!("train_count = {}\n", self.train_count));
        s.push_str(&format!("test_count = {}\n", self.test_count));
        s.push_str(&format!("test_subject_fraction = {}\n", self.test_subject_fraction));
        s.push_str("\n[model]\n");
        s.push_str(&format!("d_model = {}\n", self.d_model));
        s.push_str(&format!("n_heads = {}\n", self.n_heads));
        s.push_str(&format!("n_layers_text = {}\n", self.n_layers_text));
        s.push_str(&format!("n_layers_rit = {}\n", self.n_layers_rit));
        s.push_str("\n[train]\n");
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("beta1 = {}\n", self.beta1));
        s.push_str(&format!("beta2 = {}\n", self.beta2));
        s.push_str(&format!("adam_eps = {}\n", self.adam_eps));
        s.push_str(&format!("stage1_epochs = {}\n", self.stage1_epochs));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str("\n[eval]\n");
        s.push_str(&format!("max_decode_len = {}\n", self.max_decode_len));
        s.push_str("\n[stability]\n");
        s.push_str(&format!("n_bootstrap = {}\n", self.n_bootstrap));
        s.push_str(&format!("top_k_genes = {}\n", self.top_k_genes));
        s.push_str(&format!("top_k_rois = {}\n", self.top_k_rois));
        s.push_str(&format!("selection_threshold = {}\n", self.selection_threshold));
        s.push_str(&format!("ci_lo = {}\n", self.ci_lo));
        s.push_str(&format!("ci_hi = {}\n", self.ci_hi));
        s.push_str(&format!("epsilon_width = {}\n", self.epsilon_width));
        s.push_str("\n[enrich]\n");
        s.push_str(&format!("reference = {}\n", self.reference));
        s.push_str("\n[plotdata]\n");
        s.push_str(&format!("rois = {}\n", self.rois));
        s
    }
}
