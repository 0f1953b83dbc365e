//! Volumes, label maps, intensity preprocessing and dataset manifests.
//!
//! Arrays are stored `[z, y, x]` in standard (C) order, so `x` is the fastest
//! varying index. This matches the on-disk NIfTI layout. Spacing is always
//! reported in `(x, y, z)` order in millimetres per voxel.

mod manifest;
mod nifti;

pub use manifest::{split_dataset, DatasetManifest, ManifestEntry, Split};
pub use nifti::{load_case, load_case_with, load_label_map, load_volume, save_label_map, save_volume, LabelEncoding};

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const LA: u8 = 1;
pub const SCAR: u8 = 2;

/// Physical voxel size in millimetres, `(x, y, z)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Spacing {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Spacing { x, y, z }
    }

    pub fn isotropic(s: f64) -> Self {
        Spacing { x: s, y: s, z: s }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.x * self.y * self.z
    }

    /// Spacing reordered to match array axes `[z, y, x]`.
    pub fn zyx(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Spacing::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.z].iter().all(|s| s.is_finite() && *s > 0.0)
    }

    pub fn approx_eq(&self, other: &Spacing, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol && (self.y - other.y).abs() <= tol && (self.z - other.z).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing: Spacing,
    pub case_id: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        let v = Volume {
            voxels,
            spacing,
            case_id: case_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.spacing.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "volume {} has non-positive spacing {:?}",
                self.case_id, self.spacing
            )));
        }
        if self.voxels.shape().iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("volume {} is empty", self.case_id)));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "volume {} contains non-finite intensities",
                self.case_id
            )));
        }
        Ok(())
    }

    /// Array shape `[z, y, x]`.
    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

/// Label semantics: 0 background, 1 left atrium, 2 scar.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub labels: Array3<u8>,
    pub spacing: Spacing,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>, spacing: Spacing) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l > SCAR) {
            return Err(Error::InvalidArgument(format!("label value {bad} outside {{0,1,2}}")));
        }
        Ok(LabelMap { labels, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary mask of the requested branch target.
    pub fn target_mask(&self, target: BranchTarget) -> Array3<bool> {
        self.labels.mapv(|l| target.contains(l))
    }

    pub fn check_paired(&self, v: &Volume) -> Result<()> {
        if self.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "label shape {:?} differs from image shape {:?} for case {}",
                self.shape(),
                v.shape(),
                v.case_id
            )));
        }
        if !self.spacing.approx_eq(&v.spacing, 1e-4) {
            return Err(Error::ShapeMismatch(format!(
                "label spacing {:?} differs from image spacing {:?} for case {}",
                self.spacing, v.spacing, v.case_id
            )));
        }
        Ok(())
    }
}

/// How the left-atrium ground truth is derived from the label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaTarget {
    /// LA = label 1 ∪ label 2; scar annotations lie inside the atrial wall.
    #[default]
    LaOrScar,
    /// LA = label 1 only.
    LaOnly,
}

/// Binary target of one network branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchTarget {
    Scar,
    La(LaTarget),
}

impl BranchTarget {
    pub fn contains(&self, label: u8) -> bool {
        match self {
            BranchTarget::Scar => label == SCAR,
            BranchTarget::La(LaTarget::LaOrScar) => label == LA || label == SCAR,
            BranchTarget::La(LaTarget::LaOnly) => label == LA,
        }
    }
}

/// Z-score normalization over the nonzero voxels. Zero voxels stay zero and a
/// constant (or all-zero) volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for &x in v.voxels.iter().filter(|x| **x != 0.0) {
        sum += x as f64;
        n += 1;
    }
    let mut out = v.clone();
    if n == 0 {
        return out;
    }
    let mean = sum / n as f64;
    let var = v
        .voxels
        .iter()
        .filter(|x| **x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    // Relative threshold: float noise on a constant volume must not be amplified.
    if std <= 1e-12 * mean.abs().max(1.0) {
        out.voxels.fill(0.0);
        return out;
    }
    out.voxels.mapv_inplace(|x| if x == 0.0 { 0.0 } else { ((x as f64 - mean) / std) as f32 });
    out
}

/// Volume padded at the far end of every axis, with the amount recorded.
#[derive(Debug, Clone)]
pub struct Padded<T> {
    pub value: T,
    pub original_shape: [usize; 3],
}

fn padded_shape(shape: [usize; 3], divisor: usize) -> [usize; 3] {
    shape.map(|n| n.div_ceil(divisor) * divisor)
}

fn pad_array<T: Clone>(a: &Array3<T>, target: [usize; 3], fill: T) -> Array3<T> {
    let s = a.shape();
    let mut out = Array3::from_elem((target[0], target[1], target[2]), fill);
    out.slice_mut(s![..s[0], ..s[1], ..s[2]]).assign(a);
    out
}

fn crop_array<T: Clone>(a: &Array3<T>, shape: [usize; 3]) -> Array3<T> {
    a.slice(s![..shape[0], ..shape[1], ..shape[2]]).to_owned()
}

/// Pads each dimension up to the next multiple of `divisor` using the volume
/// minimum. Content stays at the origin.
pub fn pad_to_grid(v: &Volume, divisor: usize) -> Result<Padded<Volume>> {
    if divisor == 0 {
        return Err(Error::InvalidArgument("divisor must be >= 1".into()));
    }
    let shape = v.shape();
    let min = v.voxels.iter().copied().fold(f32::INFINITY, f32::min);
    let voxels = pad_array(&v.voxels, padded_shape(shape, divisor), min);
    Ok(Padded {
        value: Volume {
            voxels,
            spacing: v.spacing,
            case_id: v.case_id.clone(),
        },
        original_shape: shape,
    })
}

pub fn pad_labels_to_grid(l: &LabelMap, divisor: usize) -> Result<Padded<LabelMap>> {
    if divisor == 0 {
        return Err(Error::InvalidArgument("divisor must be >= 1".into()));
    }
    let shape = l.shape();
    Ok(Padded {
        value: LabelMap {
            labels: pad_array(&l.labels, padded_shape(shape, divisor), BACKGROUND),
            spacing: l.spacing,
        },
        original_shape: shape,
    })
}

impl Padded<Volume> {
    pub fn crop(&self) -> Volume {
        Volume {
            voxels: crop_array(&self.value.voxels, self.original_shape),
            spacing: self.value.spacing,
            case_id: self.value.case_id.clone(),
        }
    }

    pub fn padding(&self) -> [usize; 3] {
        let s = self.value.shape();
        [0, 1, 2].map(|i| s[i] - self.original_shape[i])
    }
}

impl Padded<LabelMap> {
    pub fn crop(&self) -> LabelMap {
        LabelMap {
            labels: crop_array(&self.value.labels, self.original_shape),
            spacing: self.value.spacing,
        }
    }
}

/// Crops any `[z, y, x]` array produced on a padded grid back to `shape`.
pub fn crop_to<T: Clone>(a: &Array3<T>, shape: [usize; 3]) -> Array3<T> {
    crop_array(a, shape)
}
