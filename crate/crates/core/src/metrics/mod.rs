//! Overlap and surface metrics, scar-size statistics and evaluation reports.

mod components;
mod edt;
mod histogram;
mod report;

pub use components::{label_components, Connectivity};
pub use edt::squared_distance_to;
pub use histogram::{scar_histogram, ScarSizeHistogram, SIZE_BIN_EDGES};
pub use report::{aggregate_eval, format_method_table, Aggregate, CaseMetrics, EvalResult};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::Spacing;

fn check_shapes<A, B>(a: &Array3<A>, b: &Array3<B>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// 2|A∩B| / (|A| + |B|), with two empty masks scoring 1.
pub fn dice_binary(a: &Array3<bool>, b: &Array3<bool>) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum HausdorffMode {
    #[default]
    Max,
    /// Percentile (0-100] of each directed distance set, e.g. 95.
    Percentile(f64),
}

fn directed(from: &Array3<bool>, to_sq: &Array3<f64>) -> Vec<f64> {
    from.iter()
        .zip(to_sq.iter())
        .filter(|(f, _)| **f)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Symmetric Hausdorff distance in mm between voxel-centre point sets.
/// `None` when either set is empty.
pub fn hausdorff_mm(a: &Array3<bool>, b: &Array3<bool>, spacing: Spacing) -> Result<Option<f64>> {
    hausdorff_mm_with(a, b, spacing, HausdorffMode::Max)
}

pub fn hausdorff_mm_with(
    a: &Array3<bool>,
    b: &Array3<bool>,
    spacing: Spacing,
    mode: HausdorffMode,
) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Ok(None);
    }
    let s = spacing.zyx();
    let ab = directed(a, &squared_distance_to(b, s));
    let ba = directed(b, &squared_distance_to(a, s));
    let reduce = |v: Vec<f64>| match mode {
        HausdorffMode::Max => v.into_iter().fold(0.0, f64::max),
        HausdorffMode::Percentile(q) => percentile(v, q),
    };
    Ok(Some(reduce(ab).max(reduce(ba))))
}
