use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Connectivity;
use crate::network::{FusionMode, NetworkConfig};
use crate::phantom::PhantomSpec;
use crate::train::TrainConfig;
use crate::volume_io::{DatasetManifest, ManifestEntry, Split};

/// Which manifest entries a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelection {
    Train,
    Eval,
    All,
}

impl SplitSelection {
    pub fn select<'a>(&self, m: &'a DatasetManifest) -> Vec<&'a ManifestEntry> {
        m.entries
            .iter()
            .filter(|e| match self {
                SplitSelection::Train => e.split == Some(Split::Train),
                SplitSelection::Eval => e.split == Some(Split::Eval),
                SplitSelection::All => true,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomOptions {
    pub count: usize,
    /// Assign this many cases to the train split and the rest to eval.
    pub n_train: Option<usize>,
    pub spec: PhantomSpec,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            count: 4,
            n_train: None,
            spec: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Integer magnification of the rendered slices.
    pub zoom: u32,
    /// Axial slice indices; empty selects the slice with the most reference
    /// scar per case.
    pub slices: Vec<usize>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { zoom: 4, slices: Vec::new() }
    }
}

/// Everything a command needs; loaded from JSON, overridden by flags and
/// written back out as `resolved_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<case_id>_pred.nii.gz` label maps.
    pub predictions: Option<PathBuf>,
    /// Single source of randomness: network initialization, sampling,
    /// augmentation and phantom generation all derive from it.
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Train one network per listed mode; empty uses `network.fusion_mode`.
    pub fusion_modes: Vec<FusionMode>,
    pub split: Option<SplitSelection>,
    pub threshold: f64,
    pub connectivity: Vec<Connectivity>,
    /// Raw-to-canonical label mapping such as `"0:0,420:1,421:2"`.
    pub label_encoding: Option<String>,
    /// Method name for reports computed from prediction files.
    pub method: Option<String>,
    pub phantom: PhantomOptions,
    pub report: ReportOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            manifest: None,
            output_dir: None,
            checkpoint: None,
            predictions: None,
            seed: 0,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            fusion_modes: Vec::new(),
            split: None,
            threshold: 0.5,
            connectivity: vec![Connectivity::TwentySix],
            label_encoding: None,
            method: None,
            phantom: PhantomOptions::default(),
            report: ReportOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn require_output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("output_dir: required (use --out)".into()))
    }

    pub fn require_existing(&self, what: &str, p: Option<&Path>) -> Result<PathBuf> {
        let p = p.ok_or_else(|| Error::InvalidConfig(format!("{what}: required")))?;
        if !p.exists() {
            return Err(Error::InvalidArgument(format!("{what}: {} does not exist", p.display())));
        }
        Ok(p.to_path_buf())
    }

    pub fn require_manifest(&self) -> Result<DatasetManifest> {
        let p = self.require_existing("manifest", self.manifest.as_deref())?;
        DatasetManifest::load(&p)
    }

    /// Fusion modes to train, in order.
    pub fn modes(&self) -> Vec<FusionMode> {
        if self.fusion_modes.is_empty() {
            vec![self.network.fusion_mode]
        } else {
            self.fusion_modes.clone()
        }
    }

    /// Pushes the global seed into the nested configs and validates them.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.phantom.spec.seed = self.seed;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig("threshold: must be in (0, 1)".into()));
        }
        if self.connectivity.is_empty() {
            return Err(Error::InvalidConfig("connectivity: at least one of 6, 18, 26".into()));
        }
        if self.report.zoom == 0 {
            return Err(Error::InvalidConfig("report.zoom: must be >= 1".into()));
        }
        self.train.validate()?;
        for mode in self.modes() {
            let net = self.network.clone().with_fusion(mode);
            net.validate()
                .map_err(|e| Error::InvalidConfig(format!("network.{}", e.to_string().trim_start_matches("invalid configuration: "))))?;
            self.train.check_patch(net.grid_divisor())?;
        }
        self.phantom.spec.validate().map_err(|e| Error::InvalidConfig(format!("phantom.spec: {e}")))?;
        if let Some(n) = self.phantom.n_train {
            if n == 0 || n >= self.phantom.count {
                return Err(Error::InvalidConfig(format!(
                    "phantom.n_train: {n} must be in 1..{}",
                    self.phantom.count
                )));
            }
        }
        Ok(())
    }
}
