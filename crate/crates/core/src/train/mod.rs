//! Patch-based training loop (SGD with momentum, exponential learning-rate
//! decay, on-the-fly augmentation) and evaluation.

pub mod augment;
mod config;
pub mod optim;

pub use config::{lr_schedule, AugmentConfig, TrainConfig};
pub use optim::{clip_grad_norm, grad_norm, Sgd};

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::losses::{batch_terms, LossBreakdown, LossForm};
use crate::metrics::{aggregate_eval, dice_binary, hausdorff_mm, CaseMetrics, EvalResult};
use crate::network::{save_checkpoint, FusionMode, Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::volume_io::{
    load_case, normalize_intensity, BranchTarget, DatasetManifest, LaTarget, LabelMap, Split, Volume, SCAR,
};

/// A labelled case prepared for patch sampling.
#[derive(Debug, Clone)]
pub struct TrainCase {
    /// Intensity-normalized image.
    pub image: Volume,
    pub labels: LabelMap,
    scar_voxels: Vec<[usize; 3]>,
}

impl TrainCase {
    pub fn new(image: &Volume, labels: LabelMap) -> Result<Self> {
        labels.check_paired(image)?;
        let scar_voxels = labels
            .labels
            .indexed_iter()
            .filter(|(_, &v)| v == SCAR)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        Ok(TrainCase {
            image: normalize_intensity(image),
            labels,
            scar_voxels,
        })
    }
}

/// One mini-batch, each tensor `[batch, 1, z, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub image: Tensor,
    pub scar: Tensor,
    pub la: Tensor,
}

/// Loads every case of a split; all must carry labels.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<(Volume, LabelMap)>> {
    manifest
        .in_split(split)
        .map(|e| {
            let label = e
                .label
                .as_deref()
                .ok_or_else(|| Error::Manifest(format!("case {} has no label file", e.case_id)))?;
            let (mut v, l) = load_case(&e.image, Some(label))?;
            v.case_id = e.case_id.clone();
            Ok((v, l.expect("label requested")))
        })
        .collect()
}

/// Patch centre along one axis: uniform where the patch fits, otherwise the
/// volume centre; a forced voxel is kept inside the patch.
fn axis_centre<R: Rng>(n: usize, p: usize, forced: Option<usize>, rng: &mut R) -> f64 {
    let mid = (n as f64 - 1.0) / 2.0;
    if n <= p {
        return mid;
    }
    let half = (p as f64 - 1.0) / 2.0;
    let (lo, hi) = (half, n as f64 - 1.0 - half);
    match forced {
        Some(v) => (v as f64).clamp(lo, hi),
        None => lo + rng.random_range(0..=(n - p)) as f64,
    }
}

/// Samples an augmented batch. Each slot independently picks a case; the
/// first `ceil(fraction · batch)` slots are centred on a random scar voxel
/// when the chosen case has any.
pub fn sample_batch<R: Rng>(cases: &[TrainCase], cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    let [pz, py, px] = cfg.patch_size;
    let m = pz * py * px;
    let b = cfg.batch_size;
    let forced = (cfg.scar_patch_fraction * b as f64).ceil() as usize;
    let shape = [b, 1, pz, py, px];
    let (mut image, mut scar, mut la) = (Tensor::zeros(&shape), Tensor::zeros(&shape), Tensor::zeros(&shape));
    let la_target = BranchTarget::La(cfg.la_target);
    for slot in 0..b {
        let case = &cases[rng.random_range(0..cases.len())];
        let anchor = (slot < forced && !case.scar_voxels.is_empty())
            .then(|| case.scar_voxels[rng.random_range(0..case.scar_voxels.len())]);
        let dims = case.image.shape();
        let centre = [0, 1, 2].map(|k| axis_centre(dims[k], cfg.patch_size[k], anchor.map(|a| a[k]), rng));
        let (img, lab) = augment::augment_block(
            &case.image.voxels,
            &case.labels.labels,
            case.image.spacing,
            cfg.patch_size,
            centre,
            &cfg.augment,
            rng,
        );
        let dst = slot * m..(slot + 1) * m;
        image.data[dst.clone()].iter_mut().zip(img.iter()).for_each(|(d, &s)| *d = s);
        for ((s, l), &v) in scar.data[dst.clone()].iter_mut().zip(&mut la.data[dst]).zip(lab.iter()) {
            *s = if v == SCAR { 1.0 } else { 0.0 };
            *l = if la_target.contains(v) { 1.0 } else { 0.0 };
        }
    }
    Ok(Batch { image, scar, la })
}

/// Loss and gradient of one batch, without updating parameters.
pub fn loss_and_grads(net: &Network, batch: &Batch, cfg: &TrainConfig) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let x = g.input(batch.image.clone());
    let (scar, la, _) = net.forward_graph(&mut g, x)?;
    let mut seeds = Vec::new();
    let branch = |g: &Graph, v: &crate::network::BranchVars, gt: &Tensor, seeds: &mut Vec<_>| -> Result<(f64, f64)> {
        let (d, c, grad) = batch_terms(g.value(v.fused), gt)?;
        seeds.push((v.fused, grad));
        if cfg.deep_supervision {
            let w = 1.0 / v.per_depth.len() as f32;
            for &p in &v.per_depth {
                let (_, _, mut grad) = batch_terms(g.value(p), gt)?;
                grad.data.iter_mut().for_each(|x| *x *= w);
                seeds.push((p, grad));
            }
        }
        Ok((d, c))
    };
    let (ds, cs) = branch(&g, &scar, &batch.scar, &mut seeds)?;
    let (dl, cl) = match &la {
        Some(l) => branch(&g, l, &batch.la, &mut seeds)?,
        None => (0.0, 0.0),
    };
    let offset = match cfg.loss_form {
        LossForm::Literal => 0.0,
        LossForm::OneMinusDice => 1.0 + if la.is_some() { 1.0 } else { 0.0 },
    };
    let loss = LossBreakdown {
        dcs_scar: ds,
        ce_scar: cs,
        dcs_la: dl,
        ce_la: cl,
        total: offset - ds + cs - dl + cl,
    };
    let grads = net.param_grads(&g, seeds).0;
    Ok((loss, grads))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub dcs_scar: f64,
    pub ce_scar: f64,
    pub dcs_la: f64,
    pub ce_la: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    /// Best periodic evaluation `(step, mean scar DS)`.
    pub best_eval: Option<(usize, f64)>,
}

/// Runs the optimization loop on in-memory cases. When `out_dir` is given,
/// writes `train_log.csv`, periodic `checkpoints/step_NNNNNN.ckpt`,
/// `checkpoints/best.ckpt` (by eval scar DS) and `checkpoints/final.ckpt`.
pub fn train_cases(
    net: &mut Network,
    train: &[(Volume, LabelMap)],
    eval: &[(Volume, LabelMap)],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_patch(net.config().grid_divisor())?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let cases = train
        .iter()
        .map(|(v, l)| TrainCase::new(v, l.clone()))
        .collect::<Result<Vec<_>>>()?;
    let ckpt_dir = match out_dir {
        Some(d) => {
            let c = d.join("checkpoints");
            fs::create_dir_all(&c).map_err(|e| Error::io(&c, e))?;
            Some(c)
        }
        None => None,
    };
    let mut writer = match out_dir {
        Some(d) => Some(csv::Writer::from_path(d.join("train_log.csv"))?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&net.params.tensors, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.total_steps());
    let mut best: Option<(usize, f64)> = None;
    info!(
        "training {} ({} parameters) for {} steps on {} cases",
        net.config().method_name(),
        net.parameter_count(),
        cfg.total_steps(),
        cases.len()
    );
    for step in 0..cfg.total_steps() {
        let epoch = step / cfg.steps_per_epoch;
        let lr = lr_schedule(epoch, cfg);
        let batch = sample_batch(&cases, cfg, &mut rng)?;
        let (loss, mut grads) = loss_and_grads(net, &batch, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{loss:?}"),
            });
        }
        let norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grad_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }
        opt.step(&mut net.params.tensors, &grads, lr)?;
        let row = StepLog {
            step,
            epoch,
            lr,
            dcs_scar: loss.dcs_scar,
            ce_scar: loss.ce_scar,
            dcs_la: loss.dcs_la,
            ce_la: loss.ce_la,
            total: loss.total,
            grad_norm: norm,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(row)?;
        }
        log.push(row);
        if step % 10 == 0 {
            info!("step {step} lr {lr:.5} loss {:.4} scar dcs {:.3}", loss.total, loss.dcs_scar);
        }
        let done = step + 1;
        if let Some(dir) = &ckpt_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(net, done, &dir.join(format!("step_{done:06}.ckpt")))?;
            }
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !eval.is_empty() {
            let res = evaluate_cases(net, eval, cfg.la_target, cfg.threshold)?;
            let ds = res.ds_scar.mean;
            info!("step {done}: eval scar DS {ds:.4}");
            if best.is_none_or(|(_, b)| ds > b) {
                best = Some((done, ds));
                if let Some(dir) = &ckpt_dir {
                    save_checkpoint(net, done, &dir.join("best.ckpt"))?;
                }
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(out_dir.expect("writer implies dir"), e))?;
    }
    if let Some(dir) = &ckpt_dir {
        save_checkpoint(net, cfg.total_steps(), &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { log, best_eval: best })
}

/// Trains on the manifest's train split, evaluating on its eval split.
pub fn train(net: &mut Network, manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let train = load_split(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Manifest("no cases assigned to the train split".into()));
    }
    let eval = if cfg.eval_every > 0 {
        load_split(manifest, Split::Eval)?
    } else {
        Vec::new()
    };
    train_cases(net, &train, &eval, cfg, out_dir)
}

/// Per-case DS/HD between a prediction and its reference.
pub fn case_metrics(case_id: &str, pred: &LabelMap, gt: &LabelMap, la_target: LaTarget, with_la: bool) -> Result<CaseMetrics> {
    let mask = |l: &LabelMap, t| l.target_mask(t);
    let ps = mask(pred, BranchTarget::Scar);
    let gs = mask(gt, BranchTarget::Scar);
    let (ds_la, hd_la) = if with_la {
        let pl = mask(pred, BranchTarget::La(la_target));
        let gl = mask(gt, BranchTarget::La(la_target));
        (Some(dice_binary(&pl, &gl)?), hausdorff_mm(&pl, &gl, gt.spacing)?)
    } else {
        (None, None)
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        ds_la,
        hd_la,
        ds_scar: dice_binary(&ps, &gs)?,
        hd_scar: hausdorff_mm(&ps, &gs, gt.spacing)?,
    })
}

/// Predicts every case on its full (padded) volume and aggregates metrics.
pub fn evaluate_cases(net: &Network, cases: &[(Volume, LabelMap)], la_target: LaTarget, threshold: f64) -> Result<EvalResult> {
    let with_la = net.config().la_branch;
    let per_case = cases
        .iter()
        .map(|(v, gt)| {
            gt.check_paired(v)?;
            let pred = net.predict_case(v, threshold)?;
            case_metrics(&v.case_id, &pred, gt, la_target, with_la)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_eval(net.config().method_name(), per_case)
}

pub fn evaluate(net: &Network, manifest: &DatasetManifest, split: Split, la_target: LaTarget, threshold: f64) -> Result<EvalResult> {
    let cases = load_split(manifest, split)?;
    if cases.is_empty() {
        return Err(Error::Manifest(format!("no cases in the {split:?} split")));
    }
    evaluate_cases(net, &cases, la_target, threshold)
}

/// Result of one fusion-mode run in an ablation.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub fusion: FusionMode,
    pub outcome: TrainOutcome,
    pub result: EvalResult,
}

/// Trains and evaluates one network per fusion mode from the same base
/// configuration, data and seed. Per-mode artifacts go to
/// `out_dir/<method name>/`.
pub fn run_ablation(
    base: &NetworkConfig,
    modes: &[FusionMode],
    train: &[(Volume, LabelMap)],
    eval: &[(Volume, LabelMap)],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    modes
        .iter()
        .map(|&mode| {
            let net_cfg = base.clone().with_fusion(mode);
            let mut net = Network::new(net_cfg, cfg.seed)?;
            let dir: Option<PathBuf> = out_dir.map(|d| d.join(net.config().method_name()));
            if let Some(d) = &dir {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let outcome = train_cases(&mut net, train, &[], cfg, dir.as_deref())?;
            let result = evaluate_cases(&net, eval, cfg.la_target, cfg.threshold)?;
            if let Some(d) = &dir {
                result.write_csv(&d.join("eval.csv"))?;
                result.write_json(&d.join("eval.json"))?;
            }
            Ok(AblationRun { fusion: mode, outcome, result })
        })
        .collect()
}

/// Mean of `total` over a window of the log.
pub fn mean_loss(log: &[StepLog]) -> f64 {
    if log.is_empty() {
        warn!("mean of an empty loss window");
        return f64::NAN;
    }
    log.iter().map(|r| r.total).sum::<f64>() / log.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn phantoms(n: u64) -> Vec<(Volume, LabelMap)> {
        (0..n)
            .map(|s| {
                generate_phantom(&PhantomSpec {
                    seed: s,
                    ..PhantomSpec::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_shapes_and_scar_forcing() {
        let data = phantoms(2);
        let cases: Vec<TrainCase> = data.iter().map(|(v, l)| TrainCase::new(v, l.clone()).unwrap()).collect();
        let mut cfg = TrainConfig {
            patch_size: [16, 16, 16],
            scar_patch_fraction: 1.0,
            ..TrainConfig::default()
        };
        cfg.augment = AugmentConfig::disabled();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let b = sample_batch(&cases, &cfg, &mut rng).unwrap();
            assert_eq!(b.image.shape, vec![2, 1, 16, 16, 16]);
            let m = 16 * 16 * 16;
            for s in 0..2 {
                assert!(b.scar.data[s * m..(s + 1) * m].iter().any(|&v| v == 1.0));
            }
            // scar is inside the LA target
            assert!(b.scar.data.iter().zip(&b.la.data).all(|(s, l)| *s <= *l));
        }
    }

    #[test]
    fn perfect_prediction_metrics() {
        let (_, l) = &phantoms(1)[0];
        let m = case_metrics("p", l, l, LaTarget::LaOrScar, true).unwrap();
        assert_eq!(m.ds_scar, 1.0);
        assert_eq!(m.hd_scar, Some(0.0));
        assert_eq!(m.ds_la, Some(1.0));
        assert_eq!(m.hd_la, Some(0.0));
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let mut net = Network::new(NetworkConfig::desk().mdnet(), 0).unwrap();
        assert!(train_cases(&mut net, &[], &[], &TrainConfig::default(), None).is_err());
    }
}
