//! Synthetic cohort generator: stands in for restricted clinical data.
//!
//! Genotypes are drawn per SNP from HWE-consistent allele frequencies;
//! planted genes get stage-shifted frequencies. Volumes are smooth noise
//! (coarse Gaussian grid, trilinear upsampling) with stage-dependent
//! mean-intensity shifts inside planted ROIs. ROIs are spheres on a
//! regular grid, so masks never fill their bounding boxes and the shift
//! survives per-patch standardization as foreground/background contrast.

use rand::Rng;

use super::{GenePanel, GenomeError, GenotypeMatrix, Stage, STAGES};
use crate::parcel::sample_trilinear;
use crate::rng;
use crate::volume::{LabelVolume, RoiTable, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEffect {
    pub stage: Stage,
    pub roi_id: u32,
    pub gene: String,
    pub effect: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub subjects_per_stage: [usize; 4],
    pub panel: GenePanel,
    pub roi_table: RoiTable,
    pub vol_dims: (u32, u32, u32),
    pub planted: Vec<PlantedEffect>,
    /// Base alternate-allele frequency range for unplanted SNPs.
    pub base_freq_range: (f64, f64),
    /// Allele-frequency shift applied per unit of planted effect.
    pub freq_shift_per_effect: f64,
    /// Standard deviation of the smooth intensity noise.
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn new(panel: GenePanel, roi_table: RoiTable) -> Self {
        SynthSpec {
            subjects_per_stage: [20, 20, 20, 20],
            panel,
            roi_table,
            vol_dims: (24, 24, 24),
            planted: Vec::new(),
            base_freq_range: (0.3, 0.5),
            freq_shift_per_effect: 0.15,
            noise_sigma: 1.0,
        }
    }

    /// Deterministic desk-scale panel: `n_genes` genes of `snps_per_gene`
    /// SNPs each, named GENE01.., rs01_1...
    pub fn default_panel(n_genes: usize, snps_per_gene: usize) -> GenePanel {
        GenePanel::new(
            (1..=n_genes)
                .map(|g| {
                    (
                        format!("GENE{g:02}"),
                        (1..=snps_per_gene).map(|s| format!("rs{g:02}_{s}")).collect(),
                    )
                })
                .collect(),
        )
        .expect("generated panel is valid")
    }

    /// Deterministic desk-scale ROI table: ids 1..=n, names ROI01..
    pub fn default_roi_table(n: usize) -> RoiTable {
        RoiTable::new((1..=n as u32).map(|i| (i, format!("ROI{i:02}"))).collect())
            .expect("generated table is valid")
    }
}

/// Fully generated cohort, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub roi_table: RoiTable,
    pub panel: GenePanel,
    pub label_volume: LabelVolume,
    /// (subject_id, stage), generation order: NC block, then SMC, MCI, AD.
    pub subjects: Vec<(String, Stage)>,
    pub genotypes: GenotypeMatrix,
    /// One volume per subject, same order as `subjects`.
    pub volumes: Vec<Volume>,
}

/// Spherical atlas: one sphere per ROI on a regular grid.
pub fn sphere_atlas(roi_table: &RoiTable, dims: (u32, u32, u32)) -> LabelVolume {
    let n = roi_table.len();
    let g = (n as f64).cbrt().ceil().max(1.0) as u32;
    let cell = (
        dims.0 as f64 / g as f64,
        dims.1 as f64 / g as f64,
        dims.2 as f64 / g as f64,
    );
    let radius = 0.38 * cell.0.min(cell.1).min(cell.2);
    let mut labels = LabelVolume::new(dims, vec![0; (dims.0 * dims.1 * dims.2) as usize])
        .expect("positive dims");
    for (i, roi_id) in roi_table.ids().enumerate() {
        let i = i as u32;
        let (cx, cy, cz) = (i / (g * g), (i / g) % g, i % g);
        let center = (
            (cx as f64 + 0.5) * cell.0,
            (cy as f64 + 0.5) * cell.1,
            (cz as f64 + 0.5) * cell.2,
        );
        for x in 0..dims.0 {
            for y in 0..dims.1 {
                for z in 0..dims.2 {
                    let d2 = (x as f64 + 0.5 - center.0).powi(2)
                        + (y as f64 + 0.5 - center.1).powi(2)
                        + (z as f64 + 0.5 - center.2).powi(2);
                    if d2 <= radius * radius {
                        let o = labels.offset(x, y, z);
                        labels.labels[o] = roi_id;
                    }
                }
            }
        }
    }
    labels
}

fn gauss<R: Rng>(r: &mut R, sigma: f64) -> f64 {
    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
    let u2: f64 = r.gen();
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smooth noise: coarse Gaussian grid upsampled trilinearly, align-corners.
fn smooth_noise_volume<R: Rng>(r: &mut R, dims: (u32, u32, u32), sigma: f64) -> Volume {
    const COARSE: u32 = 5;
    let coarse: Vec<f32> =
        (0..(COARSE * COARSE * COARSE)).map(|_| gauss(r, sigma) as f32).collect();
    let mut v = Volume::filled(dims, 0.0);
    let scale = |k: u32, d: u32| -> f64 {
        if d > 1 {
            k as f64 * (COARSE as f64 - 1.0) / (d as f64 - 1.0)
        } else {
            (COARSE as f64 - 1.0) / 2.0
        }
    };
    for x in 0..dims.0 {
        for y in 0..dims.1 {
            for z in 0..dims.2 {
                let val = sample_trilinear(
                    &coarse,
                    (COARSE, COARSE, COARSE),
                    scale(x, dims.0),
                    scale(y, dims.1),
                    scale(z, dims.2),
                );
                v.set(x, y, z, val as f32);
            }
        }
    }
    v
}

/// Generate a fully seed-deterministic cohort.
pub fn synth_cohort(spec: &SynthSpec, seed: u64) -> Result<Cohort, GenomeError> {
    for p in &spec.planted {
        if spec.roi_table.index_of(p.roi_id).is_none() {
            return Err(GenomeError::UnknownPlantTarget(format!("roi {}", p.roi_id)));
        }
        if spec.panel.gene_index(&p.gene).is_none() {
            return Err(GenomeError::UnknownPlantTarget(format!("gene {}", p.gene)));
        }
    }
    let label_volume = sphere_atlas(&spec.roi_table, spec.vol_dims);
    let columns = spec.panel.flat_columns();

    // per-SNP base frequencies, then per-stage planted shifts
    let (lo, hi) = spec.base_freq_range;
    let base_freq: Vec<f64> = (0..columns.len())
        .map(|c| rng::stream(seed, "allele-freq", c as u64).gen_range(lo..hi))
        .collect();
    let mut stage_freq = vec![base_freq.clone(); 4];
    for p in &spec.planted {
        for (c, (gene, _)) in columns.iter().enumerate() {
            if gene == &p.gene {
                let f = &mut stage_freq[p.stage.index()][c];
                *f = (*f + spec.freq_shift_per_effect * p.effect).clamp(0.02, 0.98);
            }
        }
    }

    let mut subjects = Vec::new();
    let mut rows = Vec::new();
    let mut stages = Vec::new();
    let mut volumes = Vec::new();
    let mut global = 0usize;
    for stage in STAGES {
        for _ in 0..spec.subjects_per_stage[stage.index()] {
            let id = format!("subj{global:04}");
            let freqs = &stage_freq[stage.index()];
            let mut geno_rng = rng::stream(seed, "genotype", global as u64);
            let row: Vec<Option<u8>> = freqs
                .iter()
                .map(|&f| {
                    let a = u8::from(geno_rng.gen::<f64>() < f);
                    let b = u8::from(geno_rng.gen::<f64>() < f);
                    Some(a + b)
                })
                .collect();

            let mut vol_rng = rng::stream(seed, "volume", global as u64);
            let mut vol = smooth_noise_volume(&mut vol_rng, spec.vol_dims, spec.noise_sigma);
            for p in &spec.planted {
                if p.stage == stage {
                    for (i, &l) in label_volume.labels.iter().enumerate() {
                        if l == p.roi_id {
                            vol.voxels[i] += p.effect as f32;
                        }
                    }
                }
            }

            subjects.push((id.clone(), stage));
            stages.push(Some(stage));
            rows.push(row);
            volumes.push(vol);
            global += 1;
        }
    }

    let genotypes = GenotypeMatrix {
        subjects: subjects.iter().map(|(id, _)| id.clone()).collect(),
        stages,
        columns,
        rows,
    };
    genotypes.validate()?;
    Ok(Cohort {
        roi_table: spec.roi_table.clone(),
        panel: spec.panel.clone(),
        label_volume,
        subjects,
        genotypes,
        volumes,
    })
}

/// Mean intensity of one ROI in one volume.
pub fn roi_mean_intensity(vol: &Volume, labels: &LabelVolume, roi_id: u32) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == roi_id {
            sum += vol.voxels[i] as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec::new(SynthSpec::default_panel(4, 3), SynthSpec::default_roi_table(6))
    }

    fn group_stats(cohort: &Cohort, stage: Stage, roi_id: u32) -> (f64, f64, usize) {
        let means: Vec<f64> = cohort
            .subjects
            .iter()
            .zip(&cohort.volumes)
            .filter(|((_, s), _)| *s == stage)
            .map(|(_, v)| roi_mean_intensity(v, &cohort.label_volume, roi_id))
            .collect();
        let n = means.len();
        let mean = means.iter().sum::<f64>() / n as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt(), n)
    }

    #[test]
    fn atlas_covers_every_roi_with_nonfull_bbox() {
        let s = spec();
        let atlas = sphere_atlas(&s.roi_table, s.vol_dims);
        for roi_id in s.roi_table.ids() {
            let count = atlas.labels.iter().filter(|&&l| l == roi_id).count();
            assert!(count > 10, "roi {roi_id} has {count} voxels");
        }
        atlas.validate_against(&s.roi_table).unwrap();
    }

    #[test]
    fn null_cohort_has_no_group_signal() {
        let mut s = spec();
        s.subjects_per_stage = [30, 30, 30, 30];
        let cohort = synth_cohort(&s, 17).unwrap();
        for roi_id in s.roi_table.ids() {
            for a in 0..4 {
                for b in (a + 1)..4 {
                    let (ma, sa, _) = group_stats(&cohort, STAGES[a], roi_id);
                    let (mb, sb, _) = group_stats(&cohort, STAGES[b], roi_id);
                    let se = (sa * sa + sb * sb).sqrt();
                    assert!(
                        (ma - mb).abs() < 3.0 * se,
                        "roi {roi_id} stages {a}/{b}: diff {} vs se {se}",
                        ma - mb
                    );
                }
            }
        }
    }

    #[test]
    fn planted_intensity_shift_shows_up() {
        let mut s = spec();
        s.subjects_per_stage = [30, 30, 30, 30];
        s.planted = vec![PlantedEffect {
            stage: Stage::Ad,
            roi_id: 3,
            gene: "GENE01".into(),
            effect: 2.0,
        }];
        let cohort = synth_cohort(&s, 23).unwrap();
        let (ad, _, _) = group_stats(&cohort, Stage::Ad, 3);
        let (nc, _, _) = group_stats(&cohort, Stage::Nc, 3);
        assert!(ad - nc >= 1.5, "AD-NC gap {}", ad - nc);
    }

    #[test]
    fn planted_gene_frequency_shift_shows_up() {
        let mut s = spec();
        s.subjects_per_stage = [40, 40, 40, 40];
        s.planted = vec![PlantedEffect {
            stage: Stage::Ad,
            roi_id: 1,
            gene: "GENE02".into(),
            effect: 2.0,
        }];
        let cohort = synth_cohort(&s, 31).unwrap();
        let cols: Vec<usize> = cohort
            .genotypes
            .columns
            .iter()
            .enumerate()
            .filter(|(_, (g, _))| g == "GENE02")
            .map(|(i, _)| i)
            .collect();
        let dosage = |stage: Stage| -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (r, s) in cohort.genotypes.stages.iter().enumerate() {
                if *s == Some(stage) {
                    for &c in &cols {
                        sum += f64::from(cohort.genotypes.rows[r][c].unwrap());
                        n += 1;
                    }
                }
            }
            sum / n as f64
        };
        assert!(dosage(Stage::Ad) > dosage(Stage::Nc) + 0.3);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = spec();
        assert_eq!(synth_cohort(&s, 7).unwrap(), synth_cohort(&s, 7).unwrap());
    }

    #[test]
    fn unknown_plant_targets_are_rejected() {
        let mut s = spec();
        s.planted =
            vec![PlantedEffect { stage: Stage::Ad, roi_id: 99, gene: "GENE01".into(), effect: 1.0 }];
        assert!(matches!(synth_cohort(&s, 1), Err(GenomeError::UnknownPlantTarget(_))));
        s.planted =
            vec![PlantedEffect { stage: Stage::Ad, roi_id: 1, gene: "NOPE".into(), effect: 1.0 }];
        assert!(matches!(synth_cohort(&s, 1), Err(GenomeError::UnknownPlantTarget(_))));
    }
}
