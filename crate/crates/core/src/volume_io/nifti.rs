//! Minimal NIfTI-1 reader/writer (single-file `.nii`, optionally gzipped).
//!
//! Orientation is taken as stored; only the voxel grid, `pixdim` spacing and
//! the intensity scaling fields are interpreted.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use log::info;
use ndarray::Array3;

use super::{LabelMap, Spacing, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;
const DT_INT64: i16 = 1024;
const DT_UINT64: i16 = 1280;

struct Raw {
    dims: [usize; 3],
    spacing: Spacing,
    values: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(Cursor::new(bytes))
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn parse<B: ByteOrder>(path: &Path, b: &[u8]) -> Result<Raw> {
    let bad = |reason: String| Error::Nifti {
        path: path.to_path_buf(),
        reason,
    };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&b[40 + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("dim[0] = {ndim}")));
    }
    if (4..=ndim as usize).any(|i| dim[i] > 1) {
        return Err(bad("only single-frame 3D volumes are supported".into()));
    }
    let extent = |i: usize| if i <= ndim as usize { dim[i].max(1) as usize } else { 1 };
    let dims = [extent(1), extent(2), extent(3)];

    let datatype = B::read_i16(&b[70..]);
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&b[76 + 4 * i..]);
    }
    let spacing = Spacing::new(
        pixdim[1].abs() as f64,
        pixdim[2].abs() as f64,
        pixdim[3].abs() as f64,
    );
    // Missing pixdim for collapsed axes defaults to 1 mm.
    let spacing = Spacing::new(
        if spacing.x > 0.0 { spacing.x } else { 1.0 },
        if spacing.y > 0.0 { spacing.y } else { 1.0 },
        if spacing.z > 0.0 { spacing.z } else { 1.0 },
    );
    let vox_offset = B::read_f32(&b[108..]) as usize;
    let slope = B::read_f32(&b[112..]);
    let inter = B::read_f32(&b[116..]);

    let n = dims.iter().product::<usize>();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 | DT_INT64 | DT_UINT64 => 8,
        other => return Err(bad(format!("unsupported datatype code {other}"))),
    };
    let data = b
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| bad(format!("truncated data: need {} bytes after offset {vox_offset}", n * width)))?;
    let mut values = Vec::with_capacity(n);
    for c in data.chunks_exact(width) {
        values.push(match datatype {
            DT_UINT8 => c[0] as f64,
            DT_INT8 => c[0] as i8 as f64,
            DT_INT16 => B::read_i16(c) as f64,
            DT_UINT16 => B::read_u16(c) as f64,
            DT_INT32 => B::read_i32(c) as f64,
            DT_UINT32 => B::read_u32(c) as f64,
            DT_FLOAT32 => B::read_f32(c) as f64,
            DT_FLOAT64 => B::read_f64(c),
            DT_INT64 => B::read_i64(c) as f64,
            DT_UINT64 => B::read_u64(c) as f64,
            _ => unreachable!(),
        });
    }
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    Ok(Raw { dims, spacing, values })
}

fn read_raw(path: &Path) -> Result<Raw> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti {
            path: path.to_path_buf(),
            reason: format!("file is {} bytes, shorter than the header", bytes.len()),
        });
    }
    if LittleEndian::read_i32(&bytes) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &bytes)
    } else {
        Err(Error::Nifti {
            path: path.to_path_buf(),
            reason: "sizeof_hdr is not 348".into(),
        })
    }
}

fn to_array<T>(dims: [usize; 3], values: Vec<T>) -> Array3<T> {
    // x fastest on disk == last axis of a [z, y, x] array
    Array3::from_shape_vec((dims[2], dims[1], dims[0]), values).expect("element count checked by parser")
}

/// Case identifier derived from a file name (`case01.nii.gz` → `case01`).
pub fn case_id_from_path(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let raw = read_raw(path)?;
    let voxels = to_array(raw.dims, raw.values.into_iter().map(|v| v as f32).collect());
    Volume::new(voxels, raw.spacing, case_id_from_path(path))
}

/// Mapping from label values found in a source file onto `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEncoding {
    map: BTreeMap<i64, u8>,
}

impl Default for LabelEncoding {
    fn default() -> Self {
        LabelEncoding {
            map: [(0, 0), (1, 1), (2, 2)].into_iter().collect(),
        }
    }
}

impl LabelEncoding {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (i64, u8)>) -> Result<Self> {
        let map: BTreeMap<i64, u8> = pairs.into_iter().collect();
        if let Some((src, dst)) = map.iter().find(|(_, d)| **d > 2) {
            return Err(Error::InvalidArgument(format!("label {src} mapped to {dst}, outside {{0,1,2}}")));
        }
        Ok(LabelEncoding { map })
    }

    /// Parses `"0:0,420:1,1:2"` style mappings.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (a, b) = item
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("label mapping item '{item}' is not src:dst")))?;
            let src = a
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::InvalidArgument(format!("bad source label '{a}'")))?;
            let dst = b
                .trim()
                .parse::<u8>()
                .map_err(|_| Error::InvalidArgument(format!("bad target label '{b}'")))?;
            pairs.push((src, dst));
        }
        Self::from_pairs(pairs)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    fn apply(&self, path: &Path, value: f64) -> Result<u8> {
        let key = value.round() as i64;
        if (value - key as f64).abs() > 1e-3 {
            return Err(Error::UnknownLabel {
                path: path.to_path_buf(),
                value: key,
            });
        }
        self.map.get(&key).copied().ok_or(Error::UnknownLabel {
            path: path.to_path_buf(),
            value: key,
        })
    }
}

pub fn load_label_map(path: &Path, encoding: &LabelEncoding) -> Result<LabelMap> {
    let raw = read_raw(path)?;
    let labels = raw
        .values
        .iter()
        .map(|&v| encoding.apply(path, v))
        .collect::<Result<Vec<u8>>>()?;
    if !encoding.is_identity() {
        info!("{}: label values remapped with {:?}", path.display(), encoding.map);
    }
    LabelMap::new(to_array(raw.dims, labels), raw.spacing)
}

pub fn load_case(image: &Path, label: Option<&Path>) -> Result<(Volume, Option<LabelMap>)> {
    load_case_with(image, label, &LabelEncoding::default())
}

pub fn load_case_with(
    image: &Path,
    label: Option<&Path>,
    encoding: &LabelEncoding,
) -> Result<(Volume, Option<LabelMap>)> {
    let volume = load_volume(image)?;
    let labels = match label {
        Some(p) => {
            let l = load_label_map(p, encoding)?;
            l.check_paired(&volume)?;
            Some(l)
        }
        None => None,
    };
    Ok((volume, labels))
}

fn header(dims: [usize; 3], spacing: Spacing, datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for i in 0..3 {
        dim[i + 1] = i16::try_from(dims[i])
            .map_err(|_| Error::InvalidArgument(format!("dimension {} too large for NIfTI-1", dims[i])))?;
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], bitpix);
    let pixdim = [1.0f32, spacing.x as f32, spacing.y as f32, spacing.z as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    LittleEndian::write_i16(&mut h[254..], 1); // sform_code: scanner
    let srows = [
        [spacing.x as f32, 0.0, 0.0, 0.0],
        [0.0, spacing.y as f32, 0.0, 0.0],
        [0.0, 0.0, spacing.z as f32, 0.0],
    ];
    for (r, row) in srows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn dims_xyz(shape: [usize; 3]) -> [usize; 3] {
    [shape[2], shape[1], shape[0]]
}

/// Writes float32 voxels; `.gz` suffix selects gzip compression.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = header(dims_xyz(v.shape()), v.spacing, DT_FLOAT32, 32)?;
    let start = bytes.len();
    bytes.resize(start + 4 * v.voxels.len(), 0);
    for (chunk, x) in bytes[start..].chunks_exact_mut(4).zip(v.voxels.iter()) {
        LittleEndian::write_f32(chunk, *x);
    }
    write_file(path, bytes)
}

/// Writes uint8 labels; `.gz` suffix selects gzip compression.
pub fn save_label_map(l: &LabelMap, path: &Path) -> Result<()> {
    let mut bytes = header(dims_xyz(l.shape()), l.spacing, DT_UINT8, 8)?;
    bytes.extend(l.labels.iter().copied());
    write_file(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn volume_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z as f32) * 0.5 - (y as f32) * 1.25 + x as f32 * 7.0);
        let v = Volume::new(a, Spacing::new(0.625, 0.7, 2.5), "img").unwrap();
        for name in ["img.nii", "img.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.voxels, v.voxels);
            assert!(back.spacing.approx_eq(&v.spacing, 1e-6));
            assert_eq!(back.case_id, "img");
        }
    }

    #[test]
    fn unknown_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Array3::<f32>::zeros((2, 2, 2));
        a[[1, 1, 1]] = 7.0;
        let v = Volume::new(a, Spacing::isotropic(1.0), "lab").unwrap();
        let p = dir.path().join("lab.nii");
        save_volume(&v, &p).unwrap();
        let err = load_label_map(&p, &LabelEncoding::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { value: 7, .. }));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn encoding_remaps_source_values() {
        let dir = tempfile::tempdir().unwrap();
        let a = Array3::from_shape_fn((2, 2, 2), |(z, _, _)| if z == 0 { 0.0 } else { 420.0 });
        let v = Volume::new(a, Spacing::isotropic(1.0), "lab").unwrap();
        let p = dir.path().join("lab.nii.gz");
        save_volume(&v, &p).unwrap();
        let enc = LabelEncoding::parse("0:0, 420:1").unwrap();
        let l = load_label_map(&p, &enc).unwrap();
        assert_eq!(l.count(1), 4);
        assert_eq!(l.count(0), 4);
    }

    #[test]
    fn image_label_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Array3::zeros((2, 2, 2)), Spacing::isotropic(1.0), "a").unwrap();
        let l = LabelMap::new(Array3::zeros((2, 2, 3)), Spacing::isotropic(1.0)).unwrap();
        let (pi, pl) = (dir.path().join("a.nii"), dir.path().join("a_lab.nii"));
        save_volume(&v, &pi).unwrap();
        save_label_map(&l, &pl).unwrap();
        assert!(matches!(load_case(&pi, Some(&pl)), Err(Error::ShapeMismatch(_))));
        let (img, lab) = load_case(&pi, None).unwrap();
        assert_eq!(img.shape(), [2, 2, 2]);
        assert!(lab.is_none());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_volume(Path::new("/nonexistent/x.nii")), Err(Error::Io { .. })));
    }
}
