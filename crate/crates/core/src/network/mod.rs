//! Two-branch multi-depth encoder–decoder with Sobel fusion between the
//! left-atrium and scar branches.
//!
//! Each branch has an encoder with `D` levels and `N` sub-decoders. Sub-decoder
//! `n` starts from encoder level `n` and upsamples back to full resolution with
//! skip connections at every level; each ends in a 1×1×1 convolution and a
//! logistic. The branch output is the voxelwise mean of its sub-decoder maps.
//! Along the deepest scar sub-decoder, every skip merge goes through the
//! fusion module fed by the deepest LA sub-decoder at the same level.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{FusionMode, NetworkConfig};

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamGrads, Var};
use crate::error::{Error, Result};
use crate::sobel::AttentionMode;
use crate::tensor::{ConvGeometry, Tensor};
use crate::volume_io::{crop_to, normalize_intensity, pad_to_grid, LabelMap, Volume, BACKGROUND, LA, SCAR};

pub const LEAKY_SLOPE: f32 = 0.01;

const CONV3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
const DOWN3: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
const CONV1: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, pad: 0 };

/// Single-sample activation `[channels, z, y, x]` at a resolution level
/// (0 = full resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array4<f32>,
    pub level: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    fn to_tensor(&self) -> Tensor {
        let (c, z, y, x) = self.values.dim();
        Tensor::from_vec(&[1, c, z, y, x], self.values.iter().copied().collect())
    }

    fn from_tensor(t: &Tensor, level: usize) -> Self {
        let [_, c, z, y, x] = t.dims5();
        FeatureMap {
            values: Array4::from_shape_vec((c, z, y, x), t.data[..c * z * y * x].to_vec()).expect("sizes agree"),
            level,
        }
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Branch {
    Scar,
    La,
}

impl Branch {
    fn name(&self) -> &'static str {
        match self {
            Branch::Scar => "scar",
            Branch::La => "la",
        }
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w1: usize,
    g1: usize,
    b1: usize,
    w2: usize,
    g2: usize,
    b2: usize,
    first: ConvGeometry,
}

#[derive(Debug, Clone)]
struct Up {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct SubDecoder {
    start_level: usize,
    /// Indexed by target level.
    ups: Vec<Up>,
    blocks: Vec<ConvBlock>,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone)]
struct BranchLayout {
    encoder: Option<Vec<ConvBlock>>,
    decoders: Vec<SubDecoder>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect())
    }
}

fn conv_block(p: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, first: ConvGeometry) -> ConvBlock {
    // conv biases are omitted: instance norm cancels them
    ConvBlock {
        w1: p.add(format!("{name}.conv1.weight"), init.he(&[cout, cin, 3, 3, 3], cin * 27)),
        g1: p.add(format!("{name}.norm1.weight"), Tensor::full(&[cout], 1.0)),
        b1: p.add(format!("{name}.norm1.bias"), Tensor::zeros(&[cout])),
        w2: p.add(format!("{name}.conv2.weight"), init.he(&[cout, cout, 3, 3, 3], cout * 27)),
        g2: p.add(format!("{name}.norm2.weight"), Tensor::full(&[cout], 1.0)),
        b2: p.add(format!("{name}.norm2.bias"), Tensor::zeros(&[cout])),
        first,
    }
}

/// Per-branch graph handles.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub per_depth: Vec<Var>,
    pub fused: Var,
}

/// Probability maps `[batch, 1, z, y, x]` of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub per_depth: Vec<Tensor>,
    pub fused: Tensor,
}

impl BranchOutput {
    fn from_graph(g: &Graph, v: &BranchVars) -> Self {
        BranchOutput {
            per_depth: v.per_depth.iter().map(|&p| g.value(p).clone()).collect(),
            fused: g.value(v.fused).clone(),
        }
    }

    /// Fused map of batch item `i` as a `[z, y, x]` array.
    pub fn fused_volume(&self, i: usize) -> Array3<f32> {
        let [_, _, z, y, x] = self.fused.dims5();
        let m = z * y * x;
        Array3::from_shape_vec((z, y, x), self.fused.data[i * m..(i + 1) * m].to_vec()).expect("sizes agree")
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    pub params: ParamStore,
    scar: BranchLayout,
    la: Option<BranchLayout>,
}

/// Voxelwise mean of per-depth probability maps.
pub fn fuse_outputs(per_depth: &[Tensor]) -> Result<Tensor> {
    let first = per_depth
        .first()
        .ok_or_else(|| Error::InvalidArgument("fuse_outputs needs at least one map".into()))?;
    if let Some(bad) = per_depth.iter().find(|t| t.shape != first.shape) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", bad.shape, first.shape)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = per_depth.iter().map(|t| g.input(t.clone())).collect();
    let m = g.mean(&vars);
    Ok(g.value(m).clone())
}

/// Fusion module on single-sample feature maps:
/// `concat(f_dec_scar ⊙ A, f_enc_scar)` with `A` derived from `f_dec_la`
/// according to `cfg.fusion_mode` (plain `concat(f_dec_scar, f_enc_scar)`
/// for `none`).
pub fn sfm(f_dec_scar: &FeatureMap, f_dec_la: &FeatureMap, f_enc_scar: &FeatureMap, cfg: &NetworkConfig) -> Result<FeatureMap> {
    if f_dec_scar.level != f_dec_la.level || f_dec_scar.level != f_enc_scar.level {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs at levels {}, {}, {}",
            f_dec_scar.level, f_dec_la.level, f_enc_scar.level
        )));
    }
    if f_dec_scar.values.dim() != f_dec_la.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scar decoder {:?} vs LA decoder {:?}",
            f_dec_scar.values.dim(),
            f_dec_la.values.dim()
        )));
    }
    let (_, z, y, x) = f_dec_scar.values.dim();
    let (_, ez, ey, ex) = f_enc_scar.values.dim();
    if (z, y, x) != (ez, ey, ex) {
        return Err(Error::ShapeMismatch(format!("decoder {:?} vs encoder {:?}", (z, y, x), (ez, ey, ex))));
    }
    let mut g = Graph::new();
    let s = g.input(f_dec_scar.to_tensor());
    let l = g.input(f_dec_la.to_tensor());
    let e = g.input(f_enc_scar.to_tensor());
    let out = fuse_graph(&mut g, s, Some(l), e, cfg);
    Ok(FeatureMap::from_tensor(g.value(out), f_dec_scar.level))
}

fn fuse_graph(g: &mut Graph, dec_scar: Var, dec_la: Option<Var>, enc_scar: Var, cfg: &NetworkConfig) -> Var {
    let gated = match (cfg.fusion_mode, dec_la) {
        (FusionMode::Sobel, Some(la)) => {
            let resp = g.sobel(la, cfg.sobel_combine);
            let att = match cfg.attention_mode {
                AttentionMode::Raw => resp,
                AttentionMode::Sigmoid => g.sigmoid(resp),
            };
            g.mul(dec_scar, att)
        }
        (FusionMode::Multiply, Some(la)) => g.mul(dec_scar, la),
        _ => dec_scar,
    };
    g.concat(gated, enc_scar)
}

impl Network {
    /// Builds and initializes a network (He-normal convolutions, zero biases,
    /// unit norm scales) from a seeded generator.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let scar = Self::build_branch(&cfg, &mut params, &mut init, Branch::Scar, true);
        let la = cfg
            .la_branch
            .then(|| Self::build_branch(&cfg, &mut params, &mut init, Branch::La, !cfg.share_encoder));
        Ok(Network { cfg, params, scar, la })
    }

    fn build_branch(cfg: &NetworkConfig, p: &mut ParamStore, init: &mut Init, branch: Branch, own_encoder: bool) -> BranchLayout {
        let name = branch.name();
        let encoder = own_encoder.then(|| {
            (0..cfg.encoder_depth)
                .map(|l| {
                    let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
                    let first = if l == 0 { CONV3 } else { DOWN3 };
                    conv_block(p, init, &format!("{name}.enc.{l}"), cin, cfg.channels(l), first)
                })
                .collect()
        });
        let decoders = (1..=cfg.sub_decoders)
            .map(|n| {
                let prefix = format!("{name}.dec{n}");
                let mut ups = Vec::new();
                let mut blocks = Vec::new();
                for l in 0..n {
                    let (cin, cout) = (cfg.channels(l + 1), cfg.channels(l));
                    ups.push(Up {
                        w: p.add(format!("{prefix}.up.{l}.weight"), init.he(&[cin, cout, 2, 2, 2], cin)),
                        b: p.add(format!("{prefix}.up.{l}.bias"), Tensor::zeros(&[cout])),
                    });
                    blocks.push(conv_block(p, init, &format!("{prefix}.block.{l}"), 2 * cout, cout, CONV3));
                }
                let c0 = cfg.channels(0);
                SubDecoder {
                    start_level: n,
                    ups,
                    blocks,
                    head_w: p.add(format!("{prefix}.head.weight"), init.he(&[1, c0, 1, 1, 1], c0)),
                    head_b: p.add(format!("{prefix}.head.bias"), Tensor::zeros(&[1])),
                }
            })
            .collect();
        BranchLayout { encoder, decoders }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn block(&self, g: &mut Graph, pv: &[Var], b: &ConvBlock, x: Var) -> Var {
        let h = g.conv(x, pv[b.w1], None, b.first);
        let h = g.instance_norm(h, pv[b.g1], pv[b.b1]);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.conv(h, pv[b.w2], None, CONV3);
        let h = g.instance_norm(h, pv[b.g2], pv[b.b2]);
        g.leaky_relu(h, LEAKY_SLOPE)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != 1 || shape[0] == 0 {
            return Err(Error::ShapeMismatch(format!("expected [batch>=1, 1, z, y, x] input, got {shape:?}")));
        }
        let div = self.cfg.grid_divisor();
        if shape[2..].iter().any(|&n| n == 0 || n % div != 0) {
            return Err(Error::ShapeMismatch(format!(
                "spatial shape {:?} not divisible by {div} (2^(encoder_depth-1))",
                &shape[2..]
            )));
        }
        Ok(())
    }

    fn encode_graph(&self, g: &mut Graph, pv: &[Var], enc: &[ConvBlock], x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(enc.len());
        let mut h = x;
        for b in enc {
            h = self.block(g, pv, b, h);
            levels.push(h);
        }
        levels
    }

    /// Runs one sub-decoder. `fusion` supplies LA features per level for the
    /// fused path; `record` collects the block output at each level.
    fn decode_graph(
        &self,
        g: &mut Graph,
        pv: &[Var],
        dec: &SubDecoder,
        enc: &[Var],
        fusion: Option<&[Var]>,
        mut record: Option<&mut Vec<Var>>,
    ) -> Var {
        let mut h = enc[dec.start_level];
        for l in (0..dec.start_level).rev() {
            let up = g.conv_transpose(h, pv[dec.ups[l].w], pv[dec.ups[l].b]);
            let merged = match fusion {
                Some(la) => fuse_graph(g, up, Some(la[l]), enc[l], &self.cfg),
                None => g.concat(up, enc[l]),
            };
            h = self.block(g, pv, &dec.blocks[l], merged);
            if let Some(r) = record.as_deref_mut() {
                r[l] = h;
            }
        }
        let logits = g.conv(h, pv[dec.head_w], Some(pv[dec.head_b]), CONV1);
        g.sigmoid(logits)
    }

    /// Adds the full forward pass to `g`; returns `(scar, la)` handles and
    /// the parameter leaves (indexed like `self.params`).
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<(BranchVars, Option<BranchVars>, Vec<Var>)> {
        self.check_input(&g.value(x).shape)?;
        let pv: Vec<Var> = self.params.tensors.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();

        let scar_enc = self.encode_graph(g, &pv, self.scar.encoder.as_ref().expect("scar branch owns an encoder"), x);

        let mut la_deepest = None;
        let la_vars = match &self.la {
            Some(la) => {
                let enc = match &la.encoder {
                    Some(e) => self.encode_graph(g, &pv, e, x),
                    None => scar_enc.clone(),
                };
                let deepest = la.decoders.len() - 1;
                let mut levels = vec![x; deepest + 1];
                let mut per_depth = Vec::new();
                for (i, dec) in la.decoders.iter().enumerate() {
                    let rec = (i == deepest).then_some(&mut levels);
                    per_depth.push(self.decode_graph(g, &pv, dec, &enc, None, rec));
                }
                la_deepest = Some(levels);
                let fused = g.mean(&per_depth);
                Some(BranchVars { per_depth, fused })
            }
            None => None,
        };

        let deepest = self.scar.decoders.len() - 1;
        let fuse = self.cfg.fusion_mode != FusionMode::None;
        let mut per_depth = Vec::new();
        for (i, dec) in self.scar.decoders.iter().enumerate() {
            let fusion = if fuse && i == deepest { la_deepest.as_deref() } else { None };
            per_depth.push(self.decode_graph(g, &pv, dec, &scar_enc, fusion, None));
        }
        let fused = g.mean(&per_depth);
        Ok((BranchVars { per_depth, fused }, la_vars, pv))
    }

    /// Inference forward pass on a `[batch, 1, z, y, x]` tensor.
    pub fn forward(&self, x: &Tensor) -> Result<(BranchOutput, Option<BranchOutput>)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (scar, la, _) = self.forward_graph(&mut g, xv)?;
        Ok((BranchOutput::from_graph(&g, &scar), la.map(|l| BranchOutput::from_graph(&g, &l))))
    }

    /// Encoder activations of one branch, levels `0..D`, each `[batch, C, ...]`.
    pub fn encode(&self, x: &Tensor, branch_is_la: bool) -> Result<Vec<Tensor>> {
        self.check_input(&x.shape)?;
        let layout = if branch_is_la {
            self.la
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("network has no LA branch".into()))?
        } else {
            &self.scar
        };
        let enc = layout.encoder.as_ref().or(self.scar.encoder.as_ref()).expect("scar encoder exists");
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let pv: Vec<Var> = self.params.tensors.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let levels = self.encode_graph(&mut g, &pv, enc, xv);
        Ok(levels.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Gradient of the given seeds with respect to every parameter.
    pub fn param_grads(&self, g: &Graph, seeds: Vec<(Var, Tensor)>) -> ParamGrads {
        g.backward(seeds, self.params.len())
    }

    /// Fused probability maps `(scar, la)` of a whole volume: normalize, pad
    /// to the encoder grid, run, crop back.
    pub fn predict_probabilities(&self, v: &Volume) -> Result<(Array3<f32>, Option<Array3<f32>>)> {
        let norm = normalize_intensity(v);
        let padded = pad_to_grid(&norm, self.cfg.grid_divisor())?;
        let [z, y, x] = padded.value.shape();
        let input = Tensor::from_vec(&[1, 1, z, y, x], padded.value.voxels.iter().copied().collect());
        let (scar, la) = self.forward(&input)?;
        let shape = padded.original_shape;
        Ok((crop_to(&scar.fused_volume(0), shape), la.map(|l| crop_to(&l.fused_volume(0), shape))))
    }

    pub fn predict_case(&self, v: &Volume, threshold: f64) -> Result<LabelMap> {
        let (scar, la) = self.predict_probabilities(v)?;
        labels_from_probabilities(&scar, la.as_ref(), threshold, v)
    }
}

/// Scar wins overlaps: 2 where scar ≥ t, else 1 where LA ≥ t, else 0.
pub fn labels_from_probabilities(scar: &Array3<f32>, la: Option<&Array3<f32>>, threshold: f64, v: &Volume) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be in (0, 1)")));
    }
    if let Some(la) = la {
        if la.dim() != scar.dim() {
            return Err(Error::ShapeMismatch("scar and LA probability maps differ in shape".into()));
        }
    }
    let t = threshold as f32;
    let labels = Array3::from_shape_fn(scar.dim(), |i| {
        if scar[i] >= t {
            SCAR
        } else if la.is_some_and(|l| l[i] >= t) {
            LA
        } else {
            BACKGROUND
        }
    });
    LabelMap::new(labels, v.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Spacing;

    #[test]
    fn prediction_precedence_and_threshold_boundary() {
        let v = Volume::new(Array3::zeros((2, 2, 2)), Spacing::isotropic(1.0), "x").unwrap();
        let hi = Array3::from_elem((2, 2, 2), 0.9f32);
        let lo = Array3::from_elem((2, 2, 2), 0.1f32);
        let half = Array3::from_elem((2, 2, 2), 0.5f32);
        assert_eq!(labels_from_probabilities(&hi, Some(&hi), 0.5, &v).unwrap().count(SCAR), 8);
        assert_eq!(labels_from_probabilities(&lo, Some(&lo), 0.5, &v).unwrap().count(BACKGROUND), 8);
        assert_eq!(labels_from_probabilities(&lo, Some(&half), 0.5, &v).unwrap().count(LA), 8);
        assert_eq!(labels_from_probabilities(&half, None, 0.5, &v).unwrap().count(SCAR), 8);
        assert!(labels_from_probabilities(&half, None, 1.0, &v).is_err());
    }

    #[test]
    fn fuse_outputs_errors() {
        assert!(fuse_outputs(&[]).is_err());
        let a = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 2, 4]);
        assert!(fuse_outputs(&[a, b]).is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = Network::new(NetworkConfig::desk(), 0).unwrap();
        let mut names = net.params.names.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), net.params.len());
    }
}
