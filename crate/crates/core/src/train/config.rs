use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossForm;
use crate::volume_io::LaTarget;

/// On-the-fly augmentation switches and magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation: bool,
    pub scaling: bool,
    pub elastic: bool,
    pub gamma: bool,
    pub mirroring: bool,
    /// Maximum absolute rotation per axis, degrees.
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub gamma_range: [f64; 2],
    /// Standard deviation of the coarse displacement field, mm.
    pub elastic_magnitude_mm: f64,
    /// Spacing of the coarse displacement grid, voxels.
    pub elastic_grid: usize,
    /// Probability that each enabled rotation/scaling/elastic/gamma
    /// transform is drawn for a sample.
    pub probability: f64,
    /// Per-axis flip probability.
    pub mirror_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: true,
            scaling: true,
            elastic: true,
            gamma: true,
            mirroring: true,
            rotation_deg: 15.0,
            scale_range: [0.85, 1.15],
            gamma_range: [0.7, 1.5],
            elastic_magnitude_mm: 1.5,
            elastic_grid: 8,
            probability: 0.3,
            mirror_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation: false,
            scaling: false,
            elastic: false,
            gamma: false,
            mirroring: false,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.rotation || self.scaling || self.elastic || self.gamma || self.mirroring
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("augment.{m}")));
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            return bad("rotation_deg: must be in [0, 180]");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return bad("scale_range: need 0 < lo <= hi");
        }
        if !(self.gamma_range[0] > 0.0 && self.gamma_range[0] <= self.gamma_range[1]) {
            return bad("gamma_range: need 0 < lo <= hi");
        }
        if !(self.elastic_magnitude_mm >= 0.0 && self.elastic_magnitude_mm.is_finite()) {
            return bad("elastic_magnitude_mm: must be finite and >= 0");
        }
        if self.elastic_grid < 2 {
            return bad("elastic_grid: must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability: must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return bad("mirror_probability: must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    /// Coupled L2 weight decay added to the gradient.
    pub weight_decay: f64,
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_gamma: f64,
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Patch shape `[z, y, x]`; each side must be a multiple of the
    /// network's grid divisor.
    pub patch_size: [usize; 3],
    /// Minimum fraction of patches centred on a scar voxel.
    pub scar_patch_fraction: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Evaluate on the eval split every this many steps (0 disables).
    pub eval_every: usize,
    pub la_target: LaTarget,
    pub loss_form: LossForm,
    /// Also supervise each sub-decoder map, weighted by 1/N.
    pub deep_supervision: bool,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    /// Probability threshold used by periodic evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            momentum: 0.99,
            weight_decay: 3e-5,
            lr0: 0.01,
            lr_gamma: 0.95,
            max_epochs: 4,
            steps_per_epoch: 50,
            patch_size: [32, 32, 32],
            scar_patch_fraction: 0.5,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            la_target: LaTarget::default(),
            loss_form: LossForm::default(),
            deep_supervision: false,
            grad_clip: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Full-scale defaults: 128³ patches, 250 steps per epoch.
    pub fn full_scale() -> Self {
        TrainConfig {
            patch_size: [128, 128, 128],
            steps_per_epoch: 250,
            max_epochs: 1000,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.max_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size: must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0: must be > 0");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma: must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum: must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay: must be >= 0");
        }
        if self.steps_per_epoch < 1 {
            return bad("steps_per_epoch: must be >= 1");
        }
        if self.patch_size.contains(&0) {
            return bad("patch_size: every side must be > 0");
        }
        if !(0.0..=1.0).contains(&self.scar_patch_fraction) {
            return bad("scar_patch_fraction: must be in [0, 1]");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip: must be > 0");
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold: must be in (0, 1)");
        }
        self.augment.validate()
    }

    /// Checks that the patch fits the encoder grid of a network.
    pub fn check_patch(&self, grid_divisor: usize) -> Result<()> {
        if self.patch_size.iter().any(|s| s % grid_divisor != 0) {
            return Err(Error::InvalidConfig(format!(
                "patch_size: {:?} must be a multiple of {grid_divisor} on every side",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// `lr0 · gamma^epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_gamma.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert!((lr_schedule(2, &cfg) - 0.009025).abs() < 1e-15);
        for e in 0..50 {
            assert!(lr_schedule(e + 1, &cfg) < lr_schedule(e, &cfg));
        }
    }

    #[test]
    fn validation_messages_name_the_field() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr0 = 0.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("lr0"), "{msg}");
        let mut cfg = TrainConfig::default();
        cfg.lr_gamma = 1.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("lr_gamma"));
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("batch_size"));
        let mut cfg = TrainConfig::default();
        cfg.augment.scale_range = [1.2, 1.1];
        assert!(cfg.validate().unwrap_err().to_string().contains("augment.scale_range"));
    }

    #[test]
    fn patch_grid() {
        let cfg = TrainConfig::default();
        assert!(cfg.check_patch(4).is_ok());
        assert!(cfg.check_patch(64).is_err());
    }

    #[test]
    fn json_partial_and_unknown() {
        let c: TrainConfig = serde_json::from_str(r#"{"lr0": 0.02, "augment": {"elastic": false}}"#).unwrap();
        assert_eq!(c.lr0, 0.02);
        assert!(!c.augment.elastic);
        assert!(c.augment.rotation);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.02}"#).is_err());
    }
}
