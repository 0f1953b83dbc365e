//! Soft Dice score, binary cross-entropy and the joint two-branch loss
//! `−DCS(scar) + CE(scar) − DCS(LA) + CE(LA)` with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::BranchOutput;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const CE_CLAMP: f64 = 1e-7;

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("prediction has {} voxels, target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty probability map".into()));
    }
    Ok(())
}

/// `(2·Σpt + ε) / (Σp + Σt + ε)`
pub fn dice_score_soft(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    check(pred, target)?;
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let denom = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
    Ok((2.0 * inter + eps) / denom)
}

pub fn dice_score_soft_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<Vec<f64>> {
    check(pred, target)?;
    let num = 2.0 * pred.iter().zip(target).map(|(p, t)| p * t).sum::<f64>() + eps;
    let den = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
    Ok(target.iter().map(|t| (2.0 * t * den - num) / (den * den)).collect())
}

fn clamp(p: f64) -> f64 {
    p.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
}

/// Mean voxelwise binary cross-entropy on clamped probabilities.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clamp(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Zero outside the clamp interval, where the loss is flat.
pub fn cross_entropy_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check(pred, target)?;
    let m = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            if !(CE_CLAMP..=1.0 - CE_CLAMP).contains(&p) {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / m
            }
        })
        .collect())
}

/// Sign convention of the Dice term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `−DCS + CE` per branch (minimum −2 over both branches).
    #[default]
    Literal,
    /// `(1 − DCS) + CE`; same gradient, offset by +1 per branch.
    OneMinusDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dcs_scar: f64,
    pub ce_scar: f64,
    /// Zero when the network has no LA branch.
    pub dcs_la: f64,
    pub ce_la: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(scar: (f64, f64), la: Option<(f64, f64)>, form: LossForm) -> Self {
        let (dcs_la, ce_la) = la.unwrap_or((0.0, 0.0));
        let offset = match form {
            LossForm::Literal => 0.0,
            LossForm::OneMinusDice => 1.0 + la.map_or(0.0, |_| 1.0),
        };
        LossBreakdown {
            dcs_scar: scar.0,
            ce_scar: scar.1,
            dcs_la,
            ce_la,
            total: offset - scar.0 + scar.1 - dcs_la + ce_la,
        }
    }
}

/// Dice and CE of one map plus the gradient of `−DCS + CE`.
pub fn branch_terms(pred: &[f64], target: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    let dcs = dice_score_soft(pred, target, DICE_EPS)?;
    let ce = cross_entropy(pred, target)?;
    let gd = dice_score_soft_grad(pred, target, DICE_EPS)?;
    let gc = cross_entropy_grad(pred, target)?;
    Ok((dcs, ce, gd.iter().zip(&gc).map(|(d, c)| c - d).collect()))
}

/// Joint loss of one sample and its gradients w.r.t. the two fused maps.
pub fn joint_loss(
    scar_pred: &[f64],
    scar_gt: &[f64],
    la: Option<(&[f64], &[f64])>,
    form: LossForm,
) -> Result<(LossBreakdown, Vec<f64>, Option<Vec<f64>>)> {
    let (ds, cs, gs) = branch_terms(scar_pred, scar_gt)?;
    let (la_terms, gl) = match la {
        Some((p, t)) => {
            let (dl, cl, gl) = branch_terms(p, t)?;
            (Some((dl, cl)), Some(gl))
        }
        None => (None, None),
    };
    Ok((LossBreakdown::assemble((ds, cs), la_terms, form), gs, gl))
}

/// Batch-averaged Dice, CE and the gradient of their `−DCS + CE` mean with
/// respect to a `[batch, 1, ...]` probability tensor.
pub fn batch_terms(pred: &Tensor, target: &Tensor) -> Result<(f64, f64, Tensor)> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.shape, target.shape)));
    }
    let b = pred.shape[0];
    let m = pred.numel() / b;
    let (mut dcs, mut ce) = (0.0, 0.0);
    let mut grad = Vec::with_capacity(pred.numel());
    for s in 0..b {
        let p: Vec<f64> = pred.data[s * m..(s + 1) * m].iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = target.data[s * m..(s + 1) * m].iter().map(|&v| v as f64).collect();
        let (d, c, g) = branch_terms(&p, &t)?;
        dcs += d;
        ce += c;
        grad.extend(g.into_iter().map(|v| (v / b as f64) as f32));
    }
    Ok((dcs / b as f64, ce / b as f64, Tensor::from_vec(&pred.shape, grad)))
}

/// Joint loss on the fused outputs, averaged over the batch.
pub fn total_loss(
    scar_out: &BranchOutput,
    scar_gt: &Tensor,
    la: Option<(&BranchOutput, &Tensor)>,
    form: LossForm,
) -> Result<LossBreakdown> {
    let (ds, cs, _) = batch_terms(&scar_out.fused, scar_gt)?;
    let la_terms = match la {
        Some((out, gt)) => {
            let (dl, cl, _) = batch_terms(&out.fused, gt)?;
            Some((dl, cl))
        }
        None => None,
    };
    Ok(LossBreakdown::assemble((ds, cs), la_terms, form))
}
