//! Synthetic labeled volumes with a known atrium and wall-bound scars, plus
//! brute-force reference implementations used to cross-check the production
//! code paths.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Connectivity;
use crate::volume_io::{
    save_label_map, save_volume, DatasetManifest, LabelMap, ManifestEntry, Spacing, Volume, BACKGROUND, LA, SCAR,
};

pub const BACKGROUND_LEVEL: f32 = 100.0;
pub const LA_CONTRAST: f32 = 100.0;
pub const SCAR_ENHANCEMENT: f32 = 300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `(nx, ny, nz)` in voxels.
    pub shape: [usize; 3],
    pub spacing: Spacing,
    pub n_scars: usize,
    /// Scar sphere radius interval in mm.
    pub scar_radius_range: [f64; 2],
    /// Maximum scar depth below the atrial surface in mm.
    pub shell_thickness: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            shape: [32, 32, 32],
            spacing: Spacing::new(1.0, 1.0, 1.25),
            n_scars: 5,
            scar_radius_range: [2.0, 3.5],
            shell_thickness: 2.0,
            noise_sigma: 20.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.spacing.is_valid() {
            return bad(format!("invalid spacing {:?}", self.spacing));
        }
        let [r0, r1] = self.scar_radius_range;
        if !(r0 > 0.0 && r1 >= r0 && r1.is_finite()) {
            return bad(format!("scar radius range [{r0}, {r1}] must be positive and ordered"));
        }
        if !(self.shell_thickness > 0.0 && self.shell_thickness.is_finite()) {
            return bad("shell_thickness must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0".into());
        }
        // intensity classes must stay >= 3 sigma apart
        if 3.0 * self.noise_sigma > LA_CONTRAST.min(SCAR_ENHANCEMENT) as f64 {
            return bad(format!(
                "noise_sigma {} too large: classes would be < 3 sigma apart",
                self.noise_sigma
            ));
        }
        if self.shape.iter().any(|&n| n < 16) {
            return bad(format!("shape {:?} too small: every axis needs >= 16 voxels", self.shape));
        }
        Ok(())
    }
}

/// Voxels of `mask` with a 6-neighbour outside the mask (or the grid).
pub fn boundary_voxels(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (nz, ny, nx) = mask.dim();
    let mut out = Vec::new();
    for ((z, y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
        if edge
            || !mask[[z - 1, y, x]]
            || !mask[[z + 1, y, x]]
            || !mask[[z, y - 1, x]]
            || !mask[[z, y + 1, x]]
            || !mask[[z, y, x - 1]]
            || !mask[[z, y, x + 1]]
        {
            out.push([z, y, x]);
        }
    }
    out
}

fn dist_mm(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((a[i] as f64 - b[i] as f64) * s[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Brute-force distance (mm, voxel centres) from each query voxel to the
/// nearest boundary voxel of `mask`. `f64::INFINITY` when the mask is empty.
pub fn distance_to_boundary_mm(mask: &Array3<bool>, spacing: Spacing, query: &[[usize; 3]]) -> Vec<f64> {
    let boundary = boundary_voxels(mask);
    let s = spacing.zyx();
    query
        .iter()
        .map(|&q| boundary.iter().map(|&b| dist_mm(q, b, s)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Random ellipsoidal atrium with `n_scars` wall-bound scars and noisy
/// intensities. Deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nx, ny, nz] = spec.shape;
    let s = spec.spacing.zyx();
    let extent = [nz as f64 * s[0], ny as f64 * s[1], nx as f64 * s[2]];

    let mut center = [0.0; 3];
    let mut semi = [0.0; 3];
    for i in 0..3 {
        semi[i] = rng.random_range(0.28..0.38) * extent[i];
        center[i] = (0.5 + rng.random_range(-0.05..0.05)) * extent[i];
    }
    let min_semi_vox = (0..3).map(|i| semi[i] / s[i]).fold(f64::INFINITY, f64::min);
    if min_semi_vox < 3.0 || spec.shell_thickness >= semi.iter().copied().fold(f64::INFINITY, f64::min) {
        return Err(Error::InvalidArgument(format!(
            "shape {:?} too small for the atrium and a {} mm shell",
            spec.shape, spec.shell_thickness
        )));
    }

    let atrium = Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let p = [z as f64 * s[0], y as f64 * s[1], x as f64 * s[2]];
        (0..3).map(|i| ((p[i] - center[i]) / semi[i]).powi(2)).sum::<f64>() <= 1.0
    });
    let boundary = boundary_voxels(&atrium);
    let mut labels = atrium.mapv(|m| if m { LA } else { BACKGROUND });

    let diag = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut placed: Vec<([usize; 3], f64)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < spec.n_scars {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {} separated scars in shape {:?}",
                spec.n_scars, spec.shape
            )));
        }
        let c = boundary[rng.random_range(0..boundary.len())];
        let r = rng.random_range(spec.scar_radius_range[0]..=spec.scar_radius_range[1]);
        if placed.iter().any(|&(pc, pr)| dist_mm(c, pc, s) <= r + pr + diag) {
            continue;
        }
        let scar = carve_scar(&atrium, &boundary, c, r, spec.shell_thickness, s);
        for v in &scar {
            labels[*v] = SCAR;
        }
        placed.push((c, r));
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma is finite");
    let voxels = Array3::from_shape_fn((nz, ny, nx), |idx| {
        let base = match labels[idx] {
            SCAR => BACKGROUND_LEVEL + LA_CONTRAST + SCAR_ENHANCEMENT,
            LA => BACKGROUND_LEVEL + LA_CONTRAST,
            _ => BACKGROUND_LEVEL,
        };
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        base + n as f32
    });

    let volume = Volume::new(voxels, spec.spacing, format!("phantom_{:04}", spec.seed))?;
    let labels = LabelMap::new(labels, spec.spacing)?;
    Ok((volume, labels))
}

/// Atrium voxels within `radius` of `center` and within `thickness` of the
/// atrial surface, restricted to the 26-connected piece containing `center`.
fn carve_scar(
    atrium: &Array3<bool>,
    boundary: &[[usize; 3]],
    center: [usize; 3],
    radius: f64,
    thickness: f64,
    s: [f64; 3],
) -> Vec<[usize; 3]> {
    let dim = atrium.shape();
    let reach = radius + thickness;
    let lo = |i: usize| center[i].saturating_sub((radius / s[i]).ceil() as usize);
    let hi = |i: usize| (center[i] + (radius / s[i]).ceil() as usize).min(dim[i] - 1);
    let near: Vec<[usize; 3]> = boundary.iter().copied().filter(|&b| dist_mm(b, center, s) <= reach).collect();

    let mut inside = Array3::from_elem((hi(0) - lo(0) + 1, hi(1) - lo(1) + 1, hi(2) - lo(2) + 1), false);
    for z in lo(0)..=hi(0) {
        for y in lo(1)..=hi(1) {
            for x in lo(2)..=hi(2) {
                let v = [z, y, x];
                if !atrium[v] || dist_mm(v, center, s) > radius {
                    continue;
                }
                let d = near.iter().map(|&b| dist_mm(v, b, s)).fold(f64::INFINITY, f64::min);
                if d <= thickness {
                    inside[[z - lo(0), y - lo(1), x - lo(2)]] = true;
                }
            }
        }
    }
    // keep the piece connected to the centre
    let start = [center[0] - lo(0), center[1] - lo(1), center[2] - lo(2)];
    let mut keep = Vec::new();
    let mut queue = VecDeque::from([start]);
    inside[start] = false;
    let d = inside.shape().to_vec();
    while let Some(v) = queue.pop_front() {
        keep.push([v[0] + lo(0), v[1] + lo(1), v[2] + lo(2)]);
        for off in Connectivity::TwentySix.offsets() {
            let n = [v[0] as isize + off[0], v[1] as isize + off[1], v[2] as isize + off[2]];
            if (0..3).all(|i| n[i] >= 0 && (n[i] as usize) < d[i]) {
                let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                if inside[n] {
                    inside[n] = false;
                    queue.push_back(n);
                }
            }
        }
    }
    keep
}

/// Writes `count` phantoms (seeds `base.seed + i`) and their manifest.
pub fn write_phantom_dataset(dir: &Path, base: &PhantomSpec, count: usize) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let (v, l) = generate_phantom(&spec)?;
        let image = dir.join(format!("{}.nii.gz", v.case_id));
        let label = dir.join(format!("{}_label.nii.gz", v.case_id));
        save_volume(&v, &image)?;
        save_label_map(&l, &label)?;
        entries.push(ManifestEntry {
            case_id: v.case_id.clone(),
            image,
            label: Some(label),
            split: None,
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Exhaustive breadth-first flood fill. Component sizes in descending order.
pub fn oracle_connected_components(labels: &LabelMap, target_label: u8, connectivity: Connectivity) -> Vec<usize> {
    let mut seen = labels.labels.mapv(|l| l != target_label);
    let dim = seen.shape().to_vec();
    let offsets = connectivity.offsets();
    let mut sizes = Vec::new();
    for z in 0..dim[0] {
        for y in 0..dim[1] {
            for x in 0..dim[2] {
                if seen[[z, y, x]] {
                    continue;
                }
                seen[[z, y, x]] = true;
                let mut queue = VecDeque::from([[z, y, x]]);
                let mut size = 0;
                while let Some(v) = queue.pop_front() {
                    size += 1;
                    for off in &offsets {
                        let n = [v[0] as isize + off[0], v[1] as isize + off[1], v[2] as isize + off[2]];
                        if (0..3).all(|i| n[i] >= 0 && (n[i] as usize) < dim[i]) {
                            let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                            if !seen[n] {
                                seen[n] = true;
                                queue.push_back(n);
                            }
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Direct nested-loop cross-correlation (no kernel flip) with zero padding and
/// "same" output shape.
pub fn oracle_convolve3d(field: &Array3<f64>, kernel: &Array3<f64>) -> Result<Array3<f64>> {
    let k = kernel.shape();
    if k.iter().any(|n| n % 2 == 0) {
        return Err(Error::InvalidArgument(format!("kernel shape {k:?} must be odd")));
    }
    let f = field.shape();
    let half = [k[0] / 2, k[1] / 2, k[2] / 2];
    let mut out = Array3::zeros((f[0], f[1], f[2]));
    for z in 0..f[0] {
        for y in 0..f[1] {
            for x in 0..f[2] {
                let mut acc = 0.0;
                for a in 0..k[0] {
                    for b in 0..k[1] {
                        for c in 0..k[2] {
                            let zz = z as isize + a as isize - half[0] as isize;
                            let yy = y as isize + b as isize - half[1] as isize;
                            let xx = x as isize + c as isize - half[2] as isize;
                            if zz < 0 || yy < 0 || xx < 0 {
                                continue;
                            }
                            let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
                            if zz >= f[0] || yy >= f[1] || xx >= f[2] {
                                continue;
                            }
                            acc += kernel[[a, b, c]] * field[[zz, yy, xx]];
                        }
                    }
                }
                out[[z, y, x]] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scar_voxels(l: &LabelMap) -> Vec<[usize; 3]> {
        l.labels
            .indexed_iter()
            .filter(|(_, &v)| v == SCAR)
            .map(|((z, y, x), _)| [z, y, x])
            .collect()
    }

    #[test]
    fn no_scars_means_no_scar_label() {
        let spec = PhantomSpec {
            n_scars: 0,
            ..Default::default()
        };
        let (_, l) = generate_phantom(&spec).unwrap();
        assert_eq!(l.count(SCAR), 0);
        assert!(l.count(LA) > 0);
    }

    #[test]
    fn scars_lie_in_the_shell() {
        for seed in 0..4 {
            let spec = PhantomSpec {
                seed,
                ..Default::default()
            };
            let (_, l) = generate_phantom(&spec).unwrap();
            let region = l.labels.mapv(|v| v != BACKGROUND);
            let d = distance_to_boundary_mm(&region, l.spacing, &scar_voxels(&l));
            assert!(!d.is_empty());
            assert!(d.iter().all(|&x| x <= spec.shell_thickness + 1e-9), "max {:?}", d.iter().copied().fold(0.0, f64::max));
        }
    }

    #[test]
    fn five_separated_scars_give_five_components() {
        let spec = PhantomSpec {
            seed: 11,
            n_scars: 5,
            scar_radius_range: [2.0, 2.5],
            ..Default::default()
        };
        let (_, l) = generate_phantom(&spec).unwrap();
        let comps = oracle_connected_components(&l, SCAR, Connectivity::TwentySix);
        assert_eq!(comps.len(), 5);
        assert_eq!(comps.iter().sum::<usize>(), l.count(SCAR));
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec {
            seed: 42,
            ..Default::default()
        };
        let (a, la) = generate_phantom(&spec).unwrap();
        let (b, lb) = generate_phantom(&spec).unwrap();
        assert_eq!(a.voxels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.voxels.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(la, lb);
    }

    #[test]
    fn intensity_ordering() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (v, l) = generate_phantom(&spec).unwrap();
        for (i, &lab) in l.labels.indexed_iter() {
            let expected = match lab {
                SCAR => 500.0,
                LA => 200.0,
                _ => 100.0,
            };
            assert_eq!(v.voxels[i], expected);
        }
    }

    #[test]
    fn too_small_or_invalid_specs_fail() {
        let small = PhantomSpec {
            shape: [8, 32, 32],
            ..Default::default()
        };
        assert!(generate_phantom(&small).is_err());
        let noisy = PhantomSpec {
            noise_sigma: 50.0,
            ..Default::default()
        };
        assert!(generate_phantom(&noisy).is_err());
        let crowded = PhantomSpec {
            n_scars: 400,
            ..Default::default()
        };
        assert!(generate_phantom(&crowded).is_err());
    }

    fn labels_with(points: &[[usize; 3]]) -> LabelMap {
        let mut a = Array3::zeros((4, 4, 4));
        for p in points {
            a[*p] = SCAR;
        }
        LabelMap::new(a, Spacing::isotropic(1.0)).unwrap()
    }

    #[test]
    fn oracle_components_small_cases() {
        assert!(oracle_connected_components(&labels_with(&[]), SCAR, Connectivity::TwentySix).is_empty());
        let isolated = labels_with(&[[0, 0, 0], [3, 3, 3]]);
        assert_eq!(oracle_connected_components(&isolated, SCAR, Connectivity::TwentySix), vec![1, 1]);
        let corner = labels_with(&[[1, 1, 1], [2, 2, 2]]);
        assert_eq!(oracle_connected_components(&corner, SCAR, Connectivity::TwentySix), vec![2]);
        assert_eq!(oracle_connected_components(&corner, SCAR, Connectivity::Eighteen), vec![1, 1]);
        assert_eq!(oracle_connected_components(&corner, SCAR, Connectivity::Six), vec![1, 1]);
        let edge = labels_with(&[[1, 1, 1], [1, 2, 2]]);
        assert_eq!(oracle_connected_components(&edge, SCAR, Connectivity::Eighteen), vec![2]);
        assert_eq!(oracle_connected_components(&edge, SCAR, Connectivity::Six), vec![1, 1]);
    }

    #[test]
    fn oracle_convolution_identity_and_zero_sum() {
        let field = Array3::from_shape_fn((5, 6, 7), |(z, y, x)| (z * 13 + y * 5 + x) as f64 * 0.37);
        let mut id = Array3::zeros((3, 3, 3));
        id[[1, 1, 1]] = 1.0;
        assert_eq!(oracle_convolve3d(&field, &id).unwrap(), field);

        let constant = Array3::from_elem((6, 6, 6), 2.5);
        let mut k = Array3::from_elem((3, 3, 3), 1.0);
        k[[1, 1, 1]] = -26.0;
        let out = oracle_convolve3d(&constant, &k).unwrap();
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    assert!(out[[z, y, x]].abs() < 1e-12);
                }
            }
        }
        assert!(oracle_convolve3d(&constant, &Array3::zeros((2, 3, 3))).is_err());
    }

    #[test]
    fn oracle_convolution_matches_shifted_sum() {
        // second, independent formulation: accumulate shifted copies of the field
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(-1.0..1.0));
        let kernel = Array3::from_shape_fn((3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let mut expected = Array3::<f64>::zeros((8, 8, 8));
        for ((a, b, c), &w) in kernel.indexed_iter() {
            for ((z, y, x), &v) in field.indexed_iter() {
                // field voxel (z,y,x) contributes to output (z-a+1, y-b+1, x-c+1)
                let o = [z as isize - a as isize + 1, y as isize - b as isize + 1, x as isize - c as isize + 1];
                if o.iter().all(|&i| (0..8).contains(&i)) {
                    expected[[o[0] as usize, o[1] as usize, o[2] as usize]] += w * v;
                }
            }
        }
        let got = oracle_convolve3d(&field, &kernel).unwrap();
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}
