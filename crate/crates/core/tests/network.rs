use mdbanet::autograd::Graph;
use mdbanet::network::{fuse_outputs, load_checkpoint, save_checkpoint, FusionMode, Network, NetworkConfig};
use mdbanet::phantom::{generate_phantom, PhantomSpec};
use mdbanet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn encoder_level_shapes() {
    let net = Network::new(NetworkConfig::desk(), 0).unwrap();
    let levels = net.encode(&random_input(&[2, 1, 32, 32, 32], 1), false).unwrap();
    let shapes: Vec<Vec<usize>> = levels.iter().map(|t| t.shape.clone()).collect();
    assert_eq!(
        shapes,
        vec![vec![2, 8, 32, 32, 32], vec![2, 16, 16, 16, 16], vec![2, 32, 8, 8, 8]]
    );
    assert!(net.encode(&random_input(&[1, 1, 30, 30, 30], 1), false).is_err());
    let la = net.encode(&random_input(&[1, 1, 16, 16, 16], 1), true).unwrap();
    assert_eq!(la.len(), 3);
}

#[test]
fn forward_shapes_range_and_determinism() {
    let net = Network::new(NetworkConfig::desk(), 3).unwrap();
    let x = Tensor::zeros(&[1, 1, 32, 32, 32]);
    let (scar, la) = net.forward(&x).unwrap();
    let la = la.expect("LA branch");
    assert_eq!(scar.per_depth.len(), 2);
    for t in scar.per_depth.iter().chain(&la.per_depth).chain([&scar.fused, &la.fused]) {
        assert_eq!(t.shape, vec![1, 1, 32, 32, 32]);
        assert!(t.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    let (scar2, la2) = net.forward(&x).unwrap();
    assert_eq!(scar2, scar);
    assert_eq!(la2.unwrap(), la);
    assert_eq!(fuse_outputs(&scar.per_depth).unwrap(), scar.fused);
}

#[test]
fn fixed_kernels_add_no_parameters() {
    let sobel = Network::new(NetworkConfig::desk(), 0).unwrap();
    let mul = Network::new(NetworkConfig::desk().with_fusion(FusionMode::Multiply), 0).unwrap();
    assert_eq!(sobel.parameter_count(), mul.parameter_count());
    assert_eq!(sobel.params.names, mul.params.names);
}

#[test]
fn mdnet_is_the_scar_branch_alone() {
    let full = Network::new(NetworkConfig::desk(), 0).unwrap();
    let mdnet = Network::new(NetworkConfig::desk().mdnet(), 0).unwrap();
    let scar_part: Vec<(&String, &Vec<usize>)> = full
        .params
        .names
        .iter()
        .zip(&full.params.tensors)
        .filter(|(n, _)| n.starts_with("scar."))
        .map(|(n, t)| (n, &t.shape))
        .collect();
    let md: Vec<(&String, &Vec<usize>)> = mdnet.params.names.iter().zip(mdnet.params.tensors.iter().map(|t| &t.shape)).collect();
    assert_eq!(md, scar_part);
    let (_, la) = mdnet.forward(&Tensor::zeros(&[1, 1, 8, 8, 8])).unwrap();
    assert!(la.is_none());
}

#[test]
fn deepest_sub_decoder_has_d_minus_one_upsamplings() {
    let net = Network::new(NetworkConfig::desk(), 0).unwrap();
    let ups = net
        .params
        .names
        .iter()
        .filter(|n| n.starts_with("scar.dec2.up.") && n.ends_with(".weight"))
        .count();
    assert_eq!(ups, 2);
}

fn perturb_la(net: &mut Network) {
    for (n, t) in net.params.names.iter().zip(net.params.tensors.iter_mut()) {
        if n.starts_with("la.") {
            t.data.iter_mut().for_each(|v| *v += 0.3);
        }
    }
}

#[test]
fn scar_output_depends_on_la_only_through_fusion() {
    let x = random_input(&[1, 1, 16, 16, 16], 5);
    let base = NetworkConfig {
        base_channels: 4,
        ..NetworkConfig::desk()
    };
    let mut plain = base.clone();
    plain.fusion_mode = FusionMode::None;
    let mut net = Network::new(plain, 1).unwrap();
    let (before, _) = net.forward(&x).unwrap();
    perturb_la(&mut net);
    let (after, _) = net.forward(&x).unwrap();
    assert_eq!(before, after);

    let mut fused = Network::new(base, 1).unwrap();
    let (before, _) = fused.forward(&x).unwrap();
    perturb_la(&mut fused);
    let (after, _) = fused.forward(&x).unwrap();
    assert_ne!(before.fused, after.fused);
}

#[test]
fn every_parameter_receives_gradient() {
    for cfg in [NetworkConfig::desk(), NetworkConfig::desk().with_fusion(FusionMode::Multiply), NetworkConfig::desk().mdnet()] {
        let cfg = NetworkConfig { base_channels: 4, ..cfg };
        let net = Network::new(cfg, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(random_input(&[2, 1, 16, 16, 16], 9));
        let (scar, la, _) = net.forward_graph(&mut g, x).unwrap();
        let mut seeds = vec![(scar.fused, random_input(&[2, 1, 16, 16, 16], 10))];
        if let Some(la) = la {
            seeds.push((la.fused, random_input(&[2, 1, 16, 16, 16], 11)));
        }
        let grads = net.param_grads(&g, seeds);
        for (name, gr) in net.params.names.iter().zip(&grads.0) {
            let gr = gr.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.is_finite(), "{name}");
            assert!(gr.sum_sq() > 0.0, "{name} has zero gradient");
        }
    }
}

#[test]
fn la_parameters_receive_gradient_from_the_scar_loss_through_fusion() {
    let cfg = NetworkConfig {
        base_channels: 4,
        ..NetworkConfig::desk()
    };
    let net = Network::new(cfg, 4).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_input(&[1, 1, 16, 16, 16], 3));
    let (scar, _, _) = net.forward_graph(&mut g, x).unwrap();
    let grads = net.param_grads(&g, vec![(scar.fused, random_input(&[1, 1, 16, 16, 16], 4))]);
    let reached = net
        .params
        .names
        .iter()
        .zip(&grads.0)
        .any(|(n, gr)| n.starts_with("la.enc.") && gr.as_ref().is_some_and(|t| t.sum_sq() > 0.0));
    assert!(reached);
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::new(NetworkConfig::desk(), 12).unwrap();
    let p = dir.path().join("n.ckpt");
    save_checkpoint(&net, 3, &p).unwrap();
    let back = load_checkpoint(&p, None).unwrap();
    let x = random_input(&[1, 1, 8, 8, 8], 2);
    assert_eq!(net.forward(&x).unwrap(), back.network.forward(&x).unwrap());
}

#[test]
fn predict_case_pads_and_crops_back() {
    let spec = PhantomSpec {
        shape: [18, 20, 17],
        ..PhantomSpec::default()
    };
    let (v, _) = generate_phantom(&spec).unwrap();
    let net = Network::new(NetworkConfig { base_channels: 4, ..NetworkConfig::desk() }, 0).unwrap();
    let pred = net.predict_case(&v, 0.5).unwrap();
    assert_eq!(pred.shape(), v.shape());
    assert!(pred.labels.iter().all(|&l| l <= 2));
    assert_eq!(pred.spacing, v.spacing);
}
