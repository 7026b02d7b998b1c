//! ROI parcellation: extract each atlas region from a volume, resample it
//! to a fixed cubic patch, and assemble the zero-filled fixed-length patch
//! sequence that the image encoder consumes.
//!
//! Out-of-ROI voxels inside a region's bounding box are zeroed before
//! resampling (mask-then-crop), so neighboring anatomy never leaks into a
//! region's token. The resampling grid uses the align-corners convention:
//! output index k on an axis of source extent m samples source coordinate
//! `k*(m-1)/(s-1)` (midpoint when s = 1), which makes trilinear
//! reproduction of trilinear fields exact.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::volume::{
    LabelVolume, RoiTable, Volume, VolumeError, DTYPE_F32, RVOL_HEADER_LEN, RVOL_MAGIC,
    RVOL_VERSION,
};

#[derive(Debug)]
pub enum ParcelError {
    DimsMismatch { volume: (u32, u32, u32), labels: (u32, u32, u32) },
    UnknownLabel(u32),
    DegenerateBox,
    DuplicateRoi(u32),
    ExtractOutOfOrder(u32),
    ShapeMismatch(String),
    Volume(VolumeError),
}

impl fmt::Display for ParcelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParcelError::DimsMismatch { volume, labels } => {
                write!(f, "volume dims {volume:?} != label dims {labels:?}")
            }
            ParcelError::UnknownLabel(id) => write!(f, "label {id} not in ROI table"),
            ParcelError::DegenerateBox => write!(f, "bounding box with zero extent"),
            ParcelError::DuplicateRoi(id) => write!(f, "duplicate extract for roi {id}"),
            ParcelError::ExtractOutOfOrder(id) => {
                write!(f, "extract for roi {id} violates ROI table order")
            }
            ParcelError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            ParcelError::Volume(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ParcelError {}

impl From<VolumeError> for ParcelError {
    fn from(e: VolumeError) -> Self {
        ParcelError::Volume(e)
    }
}

/// One atlas region cropped to its tight bounding box, out-of-mask voxels
/// zeroed.
#[derive(Debug, Clone)]
pub struct RoiExtract {
    pub roi_id: u32,
    /// Inclusive voxel box in source coordinates.
    pub bbox: ((u32, u32), (u32, u32), (u32, u32)),
    pub masked_voxels: Volume,
}

/// Fixed-length sequence of N resampled S³ patches for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPatchSet {
    pub subject_id: String,
    pub patch_size: u32,
    /// Exactly N patches of S³ scalars each, in ROI-table order.
    pub patches: Vec<Vec<f64>>,
    pub present_mask: Vec<bool>,
}

/// One extract per roi_id present in the labels, in ROI-table order.
pub fn segment_rois(
    v: &Volume,
    l: &LabelVolume,
    t: &RoiTable,
) -> Result<Vec<RoiExtract>, ParcelError> {
    if v.dims != l.dims {
        return Err(ParcelError::DimsMismatch { volume: v.dims, labels: l.dims });
    }
    // tight bbox per label id, single scan
    let mut boxes: std::collections::BTreeMap<u32, ((u32, u32), (u32, u32), (u32, u32))> =
        std::collections::BTreeMap::new();
    let (nx, ny, nz) = l.dims;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let id = l.at(x, y, z);
                if id == 0 {
                    continue;
                }
                if t.index_of(id).is_none() {
                    return Err(ParcelError::UnknownLabel(id));
                }
                boxes
                    .entry(id)
                    .and_modify(|b| {
                        b.0 .0 = b.0 .0.min(x);
                        b.0 .1 = b.0 .1.max(x);
                        b.1 .0 = b.1 .0.min(y);
                        b.1 .1 = b.1 .1.max(y);
                        b.2 .0 = b.2 .0.min(z);
                        b.2 .1 = b.2 .1.max(z);
                    })
                    .or_insert(((x, x), (y, y), (z, z)));
            }
        }
    }
    let mut extracts = Vec::with_capacity(boxes.len());
    for roi_id in t.ids() {
        let Some(&bbox) = boxes.get(&roi_id) else { continue };
        let ((x0, x1), (y0, y1), (z0, z1)) = bbox;
        let dims = (x1 - x0 + 1, y1 - y0 + 1, z1 - z0 + 1);
        let mut masked = Volume::filled(dims, 0.0);
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    if l.at(x, y, z) == roi_id {
                        masked.set(x - x0, y - y0, z - z0, v.at(x, y, z));
                    }
                }
            }
        }
        extracts.push(RoiExtract { roi_id, bbox, masked_voxels: masked });
    }
    Ok(extracts)
}

/// Sample `values` (dims, x-slowest layout) at fractional index (fx,fy,fz)
/// by trilinear interpolation. Coordinates must lie inside [0, dim-1].
pub fn sample_trilinear(values: &[f32], dims: (u32, u32, u32), fx: f64, fy: f64, fz: f64) -> f64 {
    let (nx, ny, nz) = (dims.0 as usize, dims.1 as usize, dims.2 as usize);
    let clamp = |f: f64, n: usize| -> (usize, usize, f64) {
        let f = f.clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let (x0, x1, tx) = clamp(fx, nx);
    let (y0, y1, ty) = clamp(fy, ny);
    let (z0, z1, tz) = clamp(fz, nz);
    let at = |x: usize, y: usize, z: usize| -> f64 { values[(x * ny + y) * nz + z] as f64 };
    let c00 = at(x0, y0, z0) * (1.0 - tz) + at(x0, y0, z1) * tz;
    let c01 = at(x0, y1, z0) * (1.0 - tz) + at(x0, y1, z1) * tz;
    let c10 = at(x1, y0, z0) * (1.0 - tz) + at(x1, y0, z1) * tz;
    let c11 = at(x1, y1, z0) * (1.0 - tz) + at(x1, y1, z1) * tz;
    let c0 = c00 * (1.0 - ty) + c01 * ty;
    let c1 = c10 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tx) + c1 * tx
}

/// Resample an extract to a uniform s³ cube spanning its bounding box.
pub fn resample_trilinear(e: &RoiExtract, s: u32) -> Result<Vec<f64>, ParcelError> {
    assert!(s > 0, "patch size must be positive");
    let dims = e.masked_voxels.dims;
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(ParcelError::DegenerateBox);
    }
    let coord = |k: u32, m: u32| -> f64 {
        if s > 1 {
            k as f64 * (m as f64 - 1.0) / (s as f64 - 1.0)
        } else {
            (m as f64 - 1.0) / 2.0
        }
    };
    let n = (s as usize).pow(3);
    let mut out = Vec::with_capacity(n);
    for kx in 0..s {
        let fx = coord(kx, dims.0);
        for ky in 0..s {
            let fy = coord(ky, dims.1);
            for kz in 0..s {
                let fz = coord(kz, dims.2);
                out.push(sample_trilinear(&e.masked_voxels.voxels, dims, fx, fy, fz));
            }
        }
    }
    Ok(out)
}

/// Assemble the fixed-length patch sequence: exactly N patches in ROI-table
/// order, all-zero with a false mask where the subject lacks the region.
pub fn assemble_patch_set(
    extracts: &[RoiExtract],
    t: &RoiTable,
    s: u32,
    subject_id: &str,
) -> Result<RoiPatchSet, ParcelError> {
    let cube = (s as usize).pow(3);
    let mut patches = vec![vec![0.0f64; cube]; t.len()];
    let mut present_mask = vec![false; t.len()];
    let mut last_index: Option<usize> = None;
    for e in extracts {
        let idx = t.index_of(e.roi_id).ok_or(ParcelError::UnknownLabel(e.roi_id))?;
        if present_mask[idx] {
            return Err(ParcelError::DuplicateRoi(e.roi_id));
        }
        if let Some(prev) = last_index {
            if idx < prev {
                return Err(ParcelError::ExtractOutOfOrder(e.roi_id));
            }
        }
        last_index = Some(idx);
        patches[idx] = resample_trilinear(e, s)?;
        present_mask[idx] = true;
    }
    Ok(RoiPatchSet { subject_id: subject_id.to_string(), patch_size: s, patches, present_mask })
}

/// Full parcellation chain for one subject.
pub fn parcellate(
    v: &Volume,
    l: &LabelVolume,
    t: &RoiTable,
    s: u32,
    subject_id: &str,
) -> Result<RoiPatchSet, ParcelError> {
    let extracts = segment_rois(v, l, t)?;
    assemble_patch_set(&extracts, t, s, subject_id)
}

/// Patch sets persist as RVOL-family files: the 20-byte RVOL header with
/// dims = (S,S,S), extended with N and S (u32 each), then N·S³ float32
/// values and N present-mask bytes. Values are rounded to f32 on disk.
pub fn write_patch_set(p: &RoiPatchSet, path: &Path) -> Result<(), ParcelError> {
    let s = p.patch_size;
    let n = p.patches.len();
    let cube = (s as usize).pow(3);
    for patch in &p.patches {
        if patch.len() != cube {
            return Err(ParcelError::ShapeMismatch(format!(
                "patch has {} values, expected {cube}",
                patch.len()
            )));
        }
    }
    let mut f = fs::File::create(path).map_err(VolumeError::Io)?;
    let mut bytes = Vec::with_capacity(RVOL_HEADER_LEN + 8 + n * cube * 4 + n);
    bytes.extend_from_slice(RVOL_MAGIC);
    bytes.extend_from_slice(&RVOL_VERSION.to_le_bytes());
    bytes.push(DTYPE_F32);
    bytes.push(0);
    for _ in 0..3 {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&s.to_le_bytes());
    for patch in &p.patches {
        for &v in patch {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &m in &p.present_mask {
        bytes.push(u8::from(m));
    }
    f.write_all(&bytes).map_err(VolumeError::Io)?;
    Ok(())
}

pub fn read_patch_set(path: &Path, subject_id: &str) -> Result<RoiPatchSet, ParcelError> {
    let bytes = fs::read(path).map_err(VolumeError::Io)?;
    if bytes.len() < 4 || &bytes[0..4] != RVOL_MAGIC {
        return Err(VolumeError::BadMagic { offset: 0 }.into());
    }
    if bytes.len() < RVOL_HEADER_LEN + 8 {
        return Err(VolumeError::TruncatedData { offset: bytes.len() }.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RVOL_VERSION {
        return Err(VolumeError::BadVersion { offset: 4, found: version }.into());
    }
    if bytes[6] != DTYPE_F32 {
        return Err(VolumeError::DTypeMismatch { offset: 6, expected: DTYPE_F32, found: bytes[6] }
            .into());
    }
    let n = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let s = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let dims = (
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
        u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
    );
    if dims != (s, s, s) {
        return Err(ParcelError::ShapeMismatch(format!("dims {dims:?} != patch size {s}")));
    }
    let cube = (s as usize).pow(3);
    let need = RVOL_HEADER_LEN + 8 + n * cube * 4 + n;
    if bytes.len() < need {
        return Err(VolumeError::TruncatedData { offset: bytes.len() }.into());
    }
    let mut patches = Vec::with_capacity(n);
    let mut off = RVOL_HEADER_LEN + 8;
    for _ in 0..n {
        let mut patch = Vec::with_capacity(cube);
        for _ in 0..cube {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(VolumeError::NonFiniteVoxel { offset: off }.into());
            }
            patch.push(v as f64);
            off += 4;
        }
        patches.push(patch);
    }
    let present_mask = bytes[off..off + n].iter().map(|&b| b != 0).collect();
    Ok(RoiPatchSet { subject_id: subject_id.to_string(), patch_size: s, patches, present_mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: u32) -> RoiTable {
        RoiTable::new((1..=n).map(|i| (i, format!("roi{i}"))).collect()).unwrap()
    }

    fn corner_block_labels() -> LabelVolume {
        // 4x4x4, a 2x2x2 corner block of id 1
        let mut labels = vec![0u32; 64];
        let l = LabelVolume::new((4, 4, 4), labels.clone()).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    labels[l.offset(x, y, z)] = 1;
                }
            }
        }
        LabelVolume::new((4, 4, 4), labels).unwrap()
    }

    #[test]
    fn corner_block_bbox() {
        let v = Volume::filled((4, 4, 4), 2.0);
        let l = corner_block_labels();
        let ex = segment_rois(&v, &l, &table(1)).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].bbox, ((0, 1), (0, 1), (0, 1)));
        assert_eq!(ex[0].masked_voxels.dims, (2, 2, 2));
        assert!(ex[0].masked_voxels.voxels.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn all_background_yields_empty() {
        let v = Volume::filled((3, 3, 3), 1.0);
        let l = LabelVolume::new((3, 3, 3), vec![0; 27]).unwrap();
        assert!(segment_rois(&v, &l, &table(2)).unwrap().is_empty());
    }

    #[test]
    fn bboxes_match_brute_force_scan() {
        // two disjoint blocks ids 1,2 plus a scattered id 3
        let dims = (6u32, 5u32, 7u32);
        let mut labels = LabelVolume::new(
            dims,
            vec![0; (dims.0 * dims.1 * dims.2) as usize],
        )
        .unwrap();
        for (x, y, z, id) in
            [(0, 0, 0, 1), (1, 1, 1, 1), (4, 3, 5, 2), (5, 4, 6, 2), (2, 2, 2, 3), (2, 4, 0, 3)]
        {
            let o = labels.offset(x, y, z);
            labels.labels[o] = id;
        }
        let mut v = Volume::filled(dims, 0.0);
        for i in 0..v.voxels.len() {
            v.voxels[i] = i as f32 * 0.25;
        }
        let ex = segment_rois(&v, &labels, &table(3)).unwrap();
        assert_eq!(ex.iter().map(|e| e.roi_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        // brute-force bbox oracle
        for e in &ex {
            let mut lo = (u32::MAX, u32::MAX, u32::MAX);
            let mut hi = (0, 0, 0);
            for x in 0..dims.0 {
                for y in 0..dims.1 {
                    for z in 0..dims.2 {
                        if labels.at(x, y, z) == e.roi_id {
                            lo = (lo.0.min(x), lo.1.min(y), lo.2.min(z));
                            hi = (hi.0.max(x), hi.1.max(y), hi.2.max(z));
                        }
                    }
                }
            }
            assert_eq!(e.bbox, ((lo.0, hi.0), (lo.1, hi.1), (lo.2, hi.2)));
            // masked voxels carry source intensity inside the mask, 0 outside
            for x in lo.0..=hi.0 {
                for y in lo.1..=hi.1 {
                    for z in lo.2..=hi.2 {
                        let got = e.masked_voxels.at(x - lo.0, y - lo.1, z - lo.2);
                        if labels.at(x, y, z) == e.roi_id {
                            assert_eq!(got, v.at(x, y, z));
                        } else {
                            assert_eq!(got, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_label_and_dims_mismatch() {
        let v = Volume::filled((2, 2, 2), 1.0);
        let mut labels = vec![0u32; 8];
        labels[0] = 9;
        let l = LabelVolume::new((2, 2, 2), labels).unwrap();
        assert!(matches!(segment_rois(&v, &l, &table(2)), Err(ParcelError::UnknownLabel(9))));

        let l2 = LabelVolume::new((2, 2, 3), vec![0; 12]).unwrap();
        assert!(matches!(segment_rois(&v, &l2, &table(2)), Err(ParcelError::DimsMismatch { .. })));
    }

    fn extract_from(values: Vec<f32>, dims: (u32, u32, u32)) -> RoiExtract {
        RoiExtract {
            roi_id: 1,
            bbox: ((0, dims.0 - 1), (0, dims.1 - 1), (0, dims.2 - 1)),
            masked_voxels: Volume::new(dims, values).unwrap(),
        }
    }

    #[test]
    fn constant_extract_resamples_to_constant() {
        let e = extract_from(vec![3.5; 2 * 3 * 4], (2, 3, 4));
        let out = resample_trilinear(&e, 8).unwrap();
        assert!(out.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn linear_field_is_reproduced_exactly() {
        // f(x,y,z) = 2x + 3y + 5z on a 5x5x5 box, s = 9: trilinear is exact
        // on trilinear functions, so compare to the analytic oracle.
        let dims = (5u32, 5u32, 5u32);
        let mut vals = vec![0f32; 125];
        let vol = Volume::filled(dims, 0.0);
        for x in 0..5u32 {
            for y in 0..5u32 {
                for z in 0..5u32 {
                    vals[vol.offset(x, y, z)] = (2 * x + 3 * y + 5 * z) as f32;
                }
            }
        }
        let e = extract_from(vals, dims);
        let s = 9u32;
        let out = resample_trilinear(&e, s).unwrap();
        let mut max_err = 0f64;
        let mut i = 0;
        for kx in 0..s {
            for ky in 0..s {
                for kz in 0..s {
                    let fx = kx as f64 * 4.0 / 8.0;
                    let fy = ky as f64 * 4.0 / 8.0;
                    let fz = kz as f64 * 4.0 / 8.0;
                    let expect = 2.0 * fx + 3.0 * fy + 5.0 * fz;
                    max_err = max_err.max((out[i] - expect).abs());
                    i += 1;
                }
            }
        }
        assert!(max_err <= 1e-6, "max err {max_err}");
    }

    #[test]
    fn single_voxel_axis_uses_midpoint() {
        let e = extract_from(vec![7.25], (1, 1, 1));
        let out = resample_trilinear(&e, 4).unwrap();
        assert_eq!(out.len(), 64);
        assert!(out.iter().all(|&v| v == 7.25));
    }

    #[test]
    fn native_size_resample_is_identity() {
        let dims = (3u32, 4u32, 5u32);
        let mut vals = vec![0f32; 60];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        let e = extract_from(vals.clone(), dims);
        // cubic native resample only defined for cubic boxes; use per-axis
        // identity via a cubic source
        let cube = extract_from(vals[..27].to_vec(), (3, 3, 3));
        let out = resample_trilinear(&cube, 3).unwrap();
        for i in 0..27 {
            assert_eq!(out[i], vals[i] as f64);
        }
        drop(e);
    }

    #[test]
    fn resampled_values_stay_in_source_range() {
        let mut rng = crate::rng::from_seed(11);
        use rand::Rng;
        for _ in 0..50 {
            let dims = (rng.gen_range(1..5u32), rng.gen_range(1..5u32), rng.gen_range(1..5u32));
            let n = (dims.0 * dims.1 * dims.2) as usize;
            let vals: Vec<f32> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e = extract_from(vals, dims);
            let s = rng.gen_range(1..7u32);
            for v in resample_trilinear(&e, s).unwrap() {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn assemble_fills_missing_with_zero_patches() {
        let t = table(3);
        let set = assemble_patch_set(&[], &t, 2, "s0").unwrap();
        assert_eq!(set.patches.len(), 3);
        assert_eq!(set.present_mask, vec![false, false, false]);
        assert!(set.patches.iter().all(|p| p.iter().all(|&v| v == 0.0)));

        let e = RoiExtract {
            roi_id: 2,
            bbox: ((0, 0), (0, 0), (0, 0)),
            masked_voxels: Volume::filled((1, 1, 1), 5.0),
        };
        let set = assemble_patch_set(&[e], &t, 2, "s0").unwrap();
        assert_eq!(set.present_mask, vec![false, true, false]);
        assert!(set.patches[1].iter().all(|&v| v == 5.0));
    }

    #[test]
    fn full_set_matches_per_roi_resampling() {
        let dims = (6u32, 6u32, 6u32);
        let mut labels = LabelVolume::new(dims, vec![0; 216]).unwrap();
        for x in 0..6u32 {
            for y in 0..6u32 {
                for z in 0..6u32 {
                    let o = labels.offset(x, y, z);
                    labels.labels[o] = x / 2 + 1; // ids 1..3 as slabs
                }
            }
        }
        let mut v = Volume::filled(dims, 0.0);
        for i in 0..v.voxels.len() {
            v.voxels[i] = (i % 17) as f32;
        }
        let t = table(3);
        let ex = segment_rois(&v, &labels, &t).unwrap();
        let set = assemble_patch_set(&ex, &t, 4, "s1").unwrap();
        assert_eq!(set.present_mask, vec![true, true, true]);
        for (i, e) in ex.iter().enumerate() {
            assert_eq!(set.patches[i], resample_trilinear(e, 4).unwrap());
        }
        // duplicates rejected
        let dup = vec![ex[0].clone(), ex[0].clone()];
        assert!(matches!(
            assemble_patch_set(&dup, &t, 4, "s1"),
            Err(ParcelError::DuplicateRoi(1))
        ));
    }

    #[test]
    fn patch_set_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s2.rps");
        let set = RoiPatchSet {
            subject_id: "s2".into(),
            patch_size: 2,
            patches: vec![vec![0.5; 8], vec![0.0; 8], vec![1.25; 8]],
            present_mask: vec![true, false, true],
        };
        write_patch_set(&set, &p).unwrap();
        let back = read_patch_set(&p, "s2").unwrap();
        assert_eq!(set, back);
    }
}
