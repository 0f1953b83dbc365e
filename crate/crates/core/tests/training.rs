use mdbanet::network::{Network, NetworkConfig};
use mdbanet::phantom::{distance_to_boundary_mm, generate_phantom, PhantomSpec};
use mdbanet::train::augment::{augment, mirror, resample, SpatialTransform};
use mdbanet::train::{evaluate_cases, train_cases, AugmentConfig, TrainConfig};
use mdbanet::volume_io::{BranchTarget, LaTarget, LabelMap, Volume, SCAR};
use mdbanet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn phantoms(n: u64) -> Vec<(Volume, LabelMap)> {
    (0..n)
        .map(|seed| generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap())
        .collect()
}

fn small_net() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        ..NetworkConfig::desk()
    }
}

fn short_run() -> TrainConfig {
    TrainConfig {
        max_epochs: 1,
        steps_per_epoch: 3,
        patch_size: [16, 16, 16],
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_loss_trace_and_weights() {
    let data = phantoms(2);
    let run = || {
        let mut net = Network::new(small_net(), 1).unwrap();
        let out = train_cases(&mut net, &data, &[], &short_run(), None).unwrap();
        (out.log, net.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn artifacts_written_at_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(2);
    let mut net = Network::new(small_net(), 1).unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        eval_every: 2,
        steps_per_epoch: 4,
        ..short_run()
    };
    let out = train_cases(&mut net, &data, &data[..1], &cfg, Some(dir.path())).unwrap();
    let ck = dir.path().join("checkpoints");
    for f in ["step_000002.ckpt", "step_000004.ckpt", "best.ckpt", "final.ckpt"] {
        assert!(ck.join(f).exists(), "{f}");
    }
    assert!(out.best_eval.is_some());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,lr,dcs_scar,ce_scar,dcs_la,ce_la,total,grad_norm");
    assert_eq!(lines.count(), 4);
}

#[test]
fn non_finite_loss_aborts() {
    let data = phantoms(1);
    let mut net = Network::new(small_net(), 1).unwrap();
    let last = net.params.tensors.len() - 1;
    net.params.tensors[last].data[0] = f32::NAN;
    match train_cases(&mut net, &data, &[], &short_run(), None) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence error, got {other:?}"),
    }
}

#[test]
fn invalid_patch_is_rejected_before_training() {
    let data = phantoms(1);
    let mut net = Network::new(small_net(), 1).unwrap();
    let cfg = TrainConfig {
        patch_size: [18, 16, 16],
        ..short_run()
    };
    assert!(matches!(train_cases(&mut net, &data, &[], &cfg, None), Err(Error::InvalidConfig(_))));
}

#[test]
fn untrained_evaluation_is_finite_and_repeatable() {
    let data = phantoms(2);
    let net = Network::new(small_net(), 7).unwrap();
    let a = evaluate_cases(&net, &data, LaTarget::LaOrScar, 0.5).unwrap();
    let b = evaluate_cases(&net, &data, LaTarget::LaOrScar, 0.5).unwrap();
    assert_eq!(a, b);
    assert!(a.ds_scar.mean.is_finite());
    assert!(a.ds_la.unwrap().mean.is_finite());
    for c in &a.cases {
        assert!((0.0..=1.0).contains(&c.ds_scar));
        if let Some(h) = c.hd_scar {
            assert!(h.is_finite());
        }
    }
}

#[test]
fn augmentation_preserves_labels_and_pairing() {
    let (v, l) = phantoms(1).remove(0);
    let cfg = AugmentConfig {
        probability: 1.0,
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let (v2, l2) = augment(&v, &l, &cfg, &mut rng).unwrap();
        assert_eq!(v2.shape(), v.shape());
        assert!(l2.labels.iter().all(|&x| x <= 2));
        assert_eq!(v2.spacing, v.spacing);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (same_v, same_l) = augment(&v, &l, &AugmentConfig::disabled(), &mut rng).unwrap();
    assert_eq!((same_v, same_l), (v.clone(), l.clone()));
    for axis in 0..3 {
        assert_eq!(mirror(&mirror(&l.labels, axis), axis), l.labels);
    }
}

#[test]
fn rotated_phantom_keeps_scar_near_the_atrial_wall() {
    let spec = PhantomSpec::default();
    let (v, l) = generate_phantom(&spec).unwrap();
    let tol = spec.shell_thickness + v.spacing.zyx().iter().copied().fold(0.0, f64::max);
    let centre = v.shape().map(|n| (n as f64 - 1.0) / 2.0);
    for (i, angles) in [[0.26, 0.0, 0.0], [0.0, -0.26, 0.1], [0.15, 0.2, -0.26]].iter().enumerate() {
        let t = SpatialTransform::rotation(*angles);
        let (_, lab) = resample(&v.voxels, &l.labels, v.spacing, v.shape(), centre, &t, 0.0);
        let rot = LabelMap::new(lab, l.spacing).unwrap();
        let atrium = rot.target_mask(BranchTarget::La(LaTarget::LaOrScar));
        let scar: Vec<[usize; 3]> = rot
            .labels
            .indexed_iter()
            .filter(|(_, &x)| x == SCAR)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        assert!(!scar.is_empty(), "rotation {i} lost all scar");
        let d = distance_to_boundary_mm(&atrium, rot.spacing, &scar);
        let worst = d.iter().copied().fold(0.0, f64::max);
        assert!(worst <= tol + 1e-9, "rotation {i}: scar {worst} mm from the wall (limit {tol})");
    }
}

#[test]
fn gamma_only_leaves_labels_untouched() {
    let (v, l) = phantoms(1).remove(0);
    let cfg = AugmentConfig {
        probability: 1.0,
        gamma: true,
        ..AugmentConfig::disabled()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (v2, l2) = augment(&v, &l, &cfg, &mut rng).unwrap();
    assert_eq!(l2, l);
    assert_ne!(v2.voxels, v.voxels);
}
