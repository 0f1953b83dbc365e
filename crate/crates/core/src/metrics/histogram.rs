use serde::{Deserialize, Serialize};

use super::components::{label_components, Connectivity};
use crate::volume_io::{LabelMap, SCAR};

/// Lower edges (mm³) of the scar-size bins; the last bin is open-ended.
pub const SIZE_BIN_EDGES: [f64; 11] = [0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0, 450.0, 500.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarSizeHistogram {
    pub counts: Vec<usize>,
    /// Summed component volume per bin, mm³.
    pub volumes: Vec<f64>,
}

impl Default for ScarSizeHistogram {
    fn default() -> Self {
        ScarSizeHistogram {
            counts: vec![0; SIZE_BIN_EDGES.len()],
            volumes: vec![0.0; SIZE_BIN_EDGES.len()],
        }
    }
}

impl ScarSizeHistogram {
    /// Half-open bin `[lo, hi)` containing `volume_mm3`.
    pub fn bin_of(volume_mm3: f64) -> usize {
        SIZE_BIN_EDGES.iter().rposition(|&lo| volume_mm3 >= lo).unwrap_or(0)
    }

    pub fn from_volumes(volumes_mm3: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::default();
        for v in volumes_mm3 {
            h.add(v);
        }
        h
    }

    pub fn add(&mut self, volume_mm3: f64) {
        let b = Self::bin_of(volume_mm3);
        self.counts[b] += 1;
        self.volumes[b] += volume_mm3;
    }

    pub fn merge(&mut self, other: &ScarSizeHistogram) {
        for i in 0..self.counts.len() {
            self.counts[i] += other.counts[i];
            self.volumes[i] += other.volumes[i];
        }
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Per-bin share of scars by count, in percent (zeros when empty).
    pub fn count_percentages(&self) -> Vec<f64> {
        let t = self.total_count() as f64;
        self.counts.iter().map(|&c| if t > 0.0 { 100.0 * c as f64 / t } else { 0.0 }).collect()
    }

    pub fn volume_percentages(&self) -> Vec<f64> {
        let t = self.total_volume();
        self.volumes.iter().map(|&v| if t > 0.0 { 100.0 * v / t } else { 0.0 }).collect()
    }

    pub fn bin_labels() -> Vec<String> {
        let mut out: Vec<String> = SIZE_BIN_EDGES.windows(2).map(|w| format!("{}-{}", w[0], w[1])).collect();
        out.push(format!(">{}", SIZE_BIN_EDGES[SIZE_BIN_EDGES.len() - 1]));
        out
    }

    /// Tab-separated table: bin ranges, count, count %, volume, volume %.
    pub fn to_table(&self) -> String {
        let row = |name: &str, cells: Vec<String>| format!("{name}\t{}\n", cells.join("\t"));
        let mut s = row("Range (mm3)", Self::bin_labels());
        s += &row("Number of Scar", self.counts.iter().map(|c| c.to_string()).collect());
        s += &row("Percentage (%)", self.count_percentages().iter().map(|p| format!("{p:.2}")).collect());
        s += &format!("Total Number\t{}\n", self.total_count());
        s += &row("Scar Volume", self.volumes.iter().map(|v| format!("{v:.0}")).collect());
        s += &row("Percentage (%)", self.volume_percentages().iter().map(|p| format!("{p:.2}")).collect());
        s += &format!("Total Scar Volume\t{:.0}\n", self.total_volume());
        s
    }
}

/// Connected scar components binned by physical volume.
pub fn scar_histogram(labels: &LabelMap, connectivity: Connectivity) -> ScarSizeHistogram {
    let mask = labels.labels.mapv(|l| l == SCAR);
    let (_, sizes) = label_components(&mask, connectivity);
    let voxel = labels.spacing.voxel_volume();
    // Per-bin volumes from integer voxel totals, independent of component order.
    let mut h = ScarSizeHistogram::default();
    let mut voxels = vec![0usize; SIZE_BIN_EDGES.len()];
    for n in sizes {
        let b = ScarSizeHistogram::bin_of(n as f64 * voxel);
        h.counts[b] += 1;
        voxels[b] += n;
    }
    h.volumes = voxels.iter().map(|&n| n as f64 * voxel).collect();
    h
}
