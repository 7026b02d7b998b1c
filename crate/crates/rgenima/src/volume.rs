//! Portable 3D volume and atlas-label file formats (RVOL v1).
//!
//! Layout is fixed-width little-endian so any language can parse it:
//! bytes 0-3 magic `RVOL`, bytes 4-5 version (u16) = 1, byte 6 dtype code
//! (0 = float32, 1 = uint32), byte 7 reserved = 0, bytes 8-19 the dims
//! x,y,z (three u32), then the payload in x-slowest / z-fastest order,
//! i.e. voxel (x,y,z) sits at payload offset `(x*Y + y)*Z + z`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RVOL_VERSION: u16 = 1;
pub const RVOL_HEADER_LEN: usize = 20;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;

#[derive(Debug)]
pub enum VolumeError {
    /// Magic bytes did not spell RVOL; offset of the first bad byte.
    BadMagic { offset: usize },
    BadVersion { offset: usize, found: u16 },
    /// Payload or header ended early; offset of the first missing byte.
    TruncatedData { offset: usize },
    NonFiniteVoxel { offset: usize },
    DTypeMismatch { offset: usize, expected: u8, found: u8 },
    LabelOutOfRange { label: u32, max_id: u32 },
    BadDims { dims: (u32, u32, u32) },
    BadTable(String),
    Io(std::io::Error),
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::BadMagic { offset } => write!(f, "bad magic at byte {offset}"),
            VolumeError::BadVersion { offset, found } => {
                write!(f, "unsupported version {found} at byte {offset}")
            }
            VolumeError::TruncatedData { offset } => {
                write!(f, "file truncated at byte {offset}")
            }
            VolumeError::NonFiniteVoxel { offset } => {
                write!(f, "non-finite voxel at byte {offset}")
            }
            VolumeError::DTypeMismatch { offset, expected, found } => write!(
                f,
                "dtype code {found} at byte {offset}, expected {expected}"
            ),
            VolumeError::LabelOutOfRange { label, max_id } => {
                write!(f, "label {label} exceeds ROI table max id {max_id}")
            }
            VolumeError::BadDims { dims } => write!(f, "non-positive dims {dims:?}"),
            VolumeError::BadTable(msg) => write!(f, "bad ROI table: {msg}"),
            VolumeError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for VolumeError {}

impl From<std::io::Error> for VolumeError {
    fn from(e: std::io::Error) -> Self {
        VolumeError::Io(e)
    }
}

/// 3D scalar intensity grid. Voxels are finite f32, x slowest / z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (u32, u32, u32),
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (u32, u32, u32), voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(VolumeError::BadDims { dims });
        }
        let n = dims.0 as usize * dims.1 as usize * dims.2 as usize;
        assert_eq!(voxels.len(), n, "voxel count must equal x*y*z");
        Ok(Volume { dims, voxels })
    }

    pub fn filled(dims: (u32, u32, u32), value: f32) -> Self {
        let n = dims.0 as usize * dims.1 as usize * dims.2 as usize;
        Volume { dims, voxels: vec![value; n] }
    }

    /// Linear offset of voxel (x,y,z): x slowest, z fastest.
    #[inline]
    pub fn offset(&self, x: u32, y: u32, z: u32) -> usize {
        ((x as usize * self.dims.1 as usize) + y as usize) * self.dims.2 as usize + z as usize
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32, z: u32) -> f32 {
        self.voxels[self.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, v: f32) {
        let o = self.offset(x, y, z);
        self.voxels[o] = v;
    }
}

/// 3D integer atlas-label grid; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: (u32, u32, u32),
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: (u32, u32, u32), labels: Vec<u32>) -> Result<Self, VolumeError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(VolumeError::BadDims { dims });
        }
        let n = dims.0 as usize * dims.1 as usize * dims.2 as usize;
        assert_eq!(labels.len(), n, "label count must equal x*y*z");
        Ok(LabelVolume { dims, labels })
    }

    #[inline]
    pub fn offset(&self, x: u32, y: u32, z: u32) -> usize {
        ((x as usize * self.dims.1 as usize) + y as usize) * self.dims.2 as usize + z as usize
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32, z: u32) -> u32 {
        self.labels[self.offset(x, y, z)]
    }

    /// Every label must be background or bounded by the table's max id.
    pub fn validate_against(&self, table: &RoiTable) -> Result<(), VolumeError> {
        let max_id = table.max_id();
        for &l in &self.labels {
            if l != 0 && l > max_id {
                return Err(VolumeError::LabelOutOfRange { label: l, max_id });
            }
        }
        Ok(())
    }
}

/// Ordered ROI id/name table; the canonical token order downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTable {
    pub entries: Vec<(u32, String)>,
}

impl RoiTable {
    pub fn new(entries: Vec<(u32, String)>) -> Result<Self, VolumeError> {
        let mut seen = BTreeSet::new();
        let mut prev = 0u32;
        for (id, _) in &entries {
            if *id == 0 {
                return Err(VolumeError::BadTable("roi_id 0 is reserved for background".into()));
            }
            if !seen.insert(*id) {
                return Err(VolumeError::BadTable(format!("duplicate roi_id {id}")));
            }
            if *id <= prev && prev != 0 {
                return Err(VolumeError::BadTable("roi_ids must be sorted ascending".into()));
            }
            prev = *id;
        }
        Ok(RoiTable { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_id(&self) -> u32 {
        self.entries.last().map(|(id, _)| *id).unwrap_or(0)
    }

    pub fn index_of(&self, roi_id: u32) -> Option<usize> {
        self.entries.binary_search_by_key(&roi_id, |(id, _)| *id).ok()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }

    /// TSV with header `roi_id\troi_name`, one row per ROI.
    pub fn write_tsv(&self, path: &Path) -> Result<(), VolumeError> {
        let mut out = String::from("roi_id\troi_name\n");
        for (id, name) in &self.entries {
            out.push_str(&format!("{id}\t{name}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self, VolumeError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("roi_id\troi_name") => {}
            other => {
                return Err(VolumeError::BadTable(format!(
                    "expected header 'roi_id\\troi_name', got {other:?}"
                )))
            }
        }
        let mut entries = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| VolumeError::BadTable(format!("bad row {line:?}")))?;
            let id: u32 = id
                .parse()
                .map_err(|_| VolumeError::BadTable(format!("bad roi_id {id:?}")))?;
            entries.push((id, name.to_string()));
        }
        RoiTable::new(entries)
    }
}

fn encode_header(dtype: u8, dims: (u32, u32, u32)) -> Vec<u8> {
    let mut h = Vec::with_capacity(RVOL_HEADER_LEN);
    h.extend_from_slice(RVOL_MAGIC);
    h.extend_from_slice(&RVOL_VERSION.to_le_bytes());
    h.push(dtype);
    h.push(0); // reserved
    h.extend_from_slice(&dims.0.to_le_bytes());
    h.extend_from_slice(&dims.1.to_le_bytes());
    h.extend_from_slice(&dims.2.to_le_bytes());
    h
}

/// Parsed RVOL header plus the payload bytes that follow it.
fn decode_header(bytes: &[u8], expect_dtype: u8) -> Result<((u32, u32, u32), &[u8]), VolumeError> {
    if bytes.len() < 4 {
        return Err(VolumeError::TruncatedData { offset: bytes.len() });
    }
    if &bytes[0..4] != RVOL_MAGIC {
        let offset = bytes[0..4].iter().zip(RVOL_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(VolumeError::BadMagic { offset });
    }
    if bytes.len() < RVOL_HEADER_LEN {
        return Err(VolumeError::TruncatedData { offset: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RVOL_VERSION {
        return Err(VolumeError::BadVersion { offset: 4, found: version });
    }
    let dtype = bytes[6];
    if dtype != expect_dtype {
        return Err(VolumeError::DTypeMismatch { offset: 6, expected: expect_dtype, found: dtype });
    }
    let dims = (
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
        u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
    );
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(VolumeError::BadDims { dims });
    }
    Ok((dims, &bytes[RVOL_HEADER_LEN..]))
}

/// Write a float32 volume; bit-deterministic for identical inputs.
pub fn write_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_header(DTYPE_F32, v.dims))?;
    let mut payload = Vec::with_capacity(v.voxels.len() * 4);
    for x in &v.voxels {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Read a float32 volume; byte-exact inverse of `write_volume`.
pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path)?;
    let (dims, payload) = decode_header(&bytes, DTYPE_F32)?;
    let n = dims.0 as usize * dims.1 as usize * dims.2 as usize;
    if payload.len() < n * 4 {
        return Err(VolumeError::TruncatedData { offset: RVOL_HEADER_LEN + payload.len() });
    }
    let mut voxels = Vec::with_capacity(n);
    for i in 0..n {
        let v = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(VolumeError::NonFiniteVoxel { offset: RVOL_HEADER_LEN + i * 4 });
        }
        voxels.push(v);
    }
    Ok(Volume { dims, voxels })
}

/// Write a uint32 label volume.
pub fn write_labels(l: &LabelVolume, path: &Path) -> Result<(), VolumeError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_header(DTYPE_U32, l.dims))?;
    let mut payload = Vec::with_capacity(l.labels.len() * 4);
    for x in &l.labels {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    f.write_all(&payload)?;
    Ok(())
}

/// Read a uint32 label volume.
pub fn read_labels(path: &Path) -> Result<LabelVolume, VolumeError> {
    let bytes = fs::read(path)?;
    let (dims, payload) = decode_header(&bytes, DTYPE_U32)?;
    let n = dims.0 as usize * dims.1 as usize * dims.2 as usize;
    if payload.len() < n * 4 {
        return Err(VolumeError::TruncatedData { offset: RVOL_HEADER_LEN + payload.len() });
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(u32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap()));
    }
    Ok(LabelVolume { dims, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_identity() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.rvol");
        let v = Volume::filled((2, 2, 2), 1.0);
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.rvol");
        let mut bytes = encode_header(DTYPE_F32, (1, 1, 1));
        bytes[0..4].copy_from_slice(b"XXXX");
        bytes.extend_from_slice(&0f32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        match read_volume(&p) {
            Err(VolumeError::BadMagic { offset: 0 }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn generator_round_trip_is_exact() {
        // f(x,y,z) = x + 10y + 100z, compared against the generator after reload.
        let dims = (3u32, 4u32, 5u32);
        let mut v = Volume::filled(dims, 0.0);
        for x in 0..dims.0 {
            for y in 0..dims.1 {
                for z in 0..dims.2 {
                    v.set(x, y, z, x as f32 + 10.0 * y as f32 + 100.0 * z as f32);
                }
            }
        }
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.rvol");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        let mut max_diff = 0f32;
        for x in 0..dims.0 {
            for y in 0..dims.1 {
                for z in 0..dims.2 {
                    let expect = x as f32 + 10.0 * y as f32 + 100.0 * z as f32;
                    max_diff = max_diff.max((back.at(x, y, z) - expect).abs());
                }
            }
        }
        assert_eq!(max_diff, 0.0);
    }

    #[test]
    fn single_voxel_file_is_header_plus_payload() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.rvol");
        write_volume(&Volume::filled((1, 1, 1), 0.0), &p).unwrap();
        let len = fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, RVOL_HEADER_LEN + 4);
    }

    #[test]
    fn writes_are_bit_deterministic() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.rvol");
        let b = dir.path().join("b.rvol");
        let v = Volume::filled((2, 3, 4), 0.5);
        write_volume(&v, &a).unwrap();
        write_volume(&v, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        // write/read/write: first and second files identical
        let back = read_volume(&a).unwrap();
        let c = dir.path().join("c.rvol");
        write_volume(&back, &c).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    }

    #[test]
    fn layout_law_delta_volume() {
        // A single 1.0 at (x,y,z) must land at byte 20 + 4*((x*Y+y)*Z+z).
        let dims = (3u32, 4u32, 5u32);
        let (x, y, z) = (2u32, 1u32, 3u32);
        let mut v = Volume::filled(dims, 0.0);
        v.set(x, y, z, 1.0);
        let dir = tempdir().unwrap();
        let p = dir.path().join("delta.rvol");
        write_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let off = RVOL_HEADER_LEN + 4 * (((x * dims.1 + y) * dims.2 + z) as usize);
        let val = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(val, 1.0);
        // every other payload float is zero
        for i in (RVOL_HEADER_LEN..bytes.len()).step_by(4) {
            if i != off {
                let w = f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn truncated_and_nonfinite_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.rvol");
        let mut bytes = encode_header(DTYPE_F32, (2, 1, 1));
        bytes.extend_from_slice(&1f32.to_le_bytes()); // only 1 of 2 voxels
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::TruncatedData { .. })));

        let q = dir.path().join("n.rvol");
        let mut bytes = encode_header(DTYPE_F32, (1, 1, 1));
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&q, &bytes).unwrap();
        match read_volume(&q) {
            Err(VolumeError::NonFiniteVoxel { offset }) => assert_eq!(offset, RVOL_HEADER_LEN),
            other => panic!("expected NonFiniteVoxel, got {other:?}"),
        }
    }

    #[test]
    fn label_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("l.rvol");
        let l = LabelVolume::new((2, 2, 2), vec![0, 1, 2, 0, 0, 1, 2, 0]).unwrap();
        write_labels(&l, &p).unwrap();
        let back = read_labels(&p).unwrap();
        assert_eq!(l, back);

        let table =
            RoiTable::new(vec![(1, "a".into()), (2, "b".into())]).unwrap();
        back.validate_against(&table).unwrap();

        let all_zero = LabelVolume::new((2, 2, 2), vec![0; 8]).unwrap();
        assert!(all_zero.labels.iter().all(|&l| l == 0));
        all_zero.validate_against(&table).unwrap();

        let table5 = RoiTable::new((1..=5).map(|i| (i, format!("r{i}"))).collect()).unwrap();
        let bad = LabelVolume::new((1, 1, 1), vec![7]).unwrap();
        match bad.validate_against(&table5) {
            Err(VolumeError::LabelOutOfRange { label: 7, max_id: 5 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_between_readers() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("l.rvol");
        let l = LabelVolume::new((1, 1, 1), vec![3]).unwrap();
        write_labels(&l, &p).unwrap();
        assert!(matches!(read_volume(&p), Err(VolumeError::DTypeMismatch { .. })));
    }

    #[test]
    fn roi_table_tsv_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rois.tsv");
        let t = RoiTable::new(vec![(1, "Left-Thalamus".into()), (4, "ctx-rh-insula".into())])
            .unwrap();
        t.write_tsv(&p).unwrap();
        let back = RoiTable::read_tsv(&p).unwrap();
        assert_eq!(t, back);
        assert!(RoiTable::new(vec![(2, "x".into()), (1, "y".into())]).is_err());
        assert!(RoiTable::new(vec![(1, "x".into()), (1, "y".into())]).is_err());
    }
}
