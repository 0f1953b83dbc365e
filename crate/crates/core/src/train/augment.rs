//! Paired image/label augmentation. Spatial transforms map output voxels to
//! source positions in millimetres around a centre; the image is sampled
//! trilinearly and the labels by nearest neighbour, so label values never
//! leave `{0, 1, 2}`.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::AugmentConfig;
use crate::error::Result;
use crate::volume_io::{LabelMap, Spacing, Volume};

/// Output-to-source mapping in `[z, y, x]` millimetre coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTransform {
    pub matrix: [[f64; 3]; 3],
    /// Coarse displacement field `[3, gz, gy, gx]` in mm, sampled every
    /// `grid` output voxels.
    pub displacement: Option<(Array4<f64>, usize)>,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            displacement: None,
        }
    }

    /// Rotation by the given angles (radians) about the z, y and x axes,
    /// applied in that order.
    pub fn rotation(angles: [f64; 3]) -> Self {
        let [az, ay, ax] = angles;
        let (sz, cz) = az.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sx, cx) = ax.sin_cos();
        // about z: mixes (y, x); about y: mixes (z, x); about x: mixes (z, y)
        let rz = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
        SpatialTransform {
            matrix: matmul(&matmul(&rx, &ry), &rz),
            displacement: None,
        }
    }

    /// Uniform zoom by `k`: content appears `k` times larger.
    pub fn scaling(k: f64) -> Self {
        let s = 1.0 / k;
        SpatialTransform {
            matrix: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            displacement: None,
        }
    }

    pub fn then_matrix(mut self, m: &[[f64; 3]; 3]) -> Self {
        self.matrix = matmul(&self.matrix, m);
        self
    }

    fn displacement_at(&self, p: [usize; 3]) -> [f64; 3] {
        let Some((field, grid)) = &self.displacement else {
            return [0.0; 3];
        };
        let q = p.map(|v| v as f64 / *grid as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let comp = field.index_axis(ndarray::Axis(0), c);
            *o = trilinear_f64(&comp, q);
        }
        out
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Trilinear interpolation with clamping to the array bounds.
fn trilinear_f64(a: &ndarray::ArrayView3<f64>, q: [f64; 3]) -> f64 {
    let dims = a.dim();
    let dims = [dims.0, dims.1, dims.2];
    let mut lo = [0usize; 3];
    let mut fr = [0.0; 3];
    for k in 0..3 {
        let v = q[k].clamp(0.0, (dims[k] - 1) as f64);
        lo[k] = (v.floor() as usize).min(dims[k].saturating_sub(2));
        fr[k] = v - lo[k] as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let bit = (corner >> (2 - k)) & 1;
            idx[k] = (lo[k] + bit).min(dims[k] - 1);
            w *= if bit == 1 { fr[k] } else { 1.0 - fr[k] };
        }
        if w != 0.0 {
            acc += w * a[idx];
        }
    }
    acc
}

/// Trilinear sample at fractional index `q`; corners outside the array
/// contribute `fill`.
fn trilinear_fill(a: &Array3<f32>, q: [f64; 3], fill: f32) -> f32 {
    let (nz, ny, nx) = a.dim();
    let dims = [nz as i64, ny as i64, nx as i64];
    let base = q.map(|v| v.floor());
    let fr = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let base = base.map(|v| v as i64);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0i64; 3];
        for k in 0..3 {
            let bit = (corner >> (2 - k)) & 1;
            idx[k] = base[k] + bit as i64;
            w *= if bit == 1 { fr[k] } else { 1.0 - fr[k] };
        }
        if w == 0.0 {
            continue;
        }
        let inside = (0..3).all(|k| idx[k] >= 0 && idx[k] < dims[k]);
        let v = if inside {
            a[[idx[0] as usize, idx[1] as usize, idx[2] as usize]]
        } else {
            fill
        };
        acc += w * v as f64;
    }
    acc as f32
}

/// Resamples a paired image/label block of `out_shape` whose centre maps to
/// the fractional source index `centre`. Outside the source, the image reads
/// `fill` and the labels read background.
pub fn resample(
    image: &Array3<f32>,
    labels: &Array3<u8>,
    spacing: Spacing,
    out_shape: [usize; 3],
    centre: [f64; 3],
    t: &SpatialTransform,
    fill: f32,
) -> (Array3<f32>, Array3<u8>) {
    let s = spacing.zyx();
    let (nz, ny, nx) = labels.dim();
    let dims = [nz as i64, ny as i64, nx as i64];
    let half = out_shape.map(|n| (n as f64 - 1.0) / 2.0);
    let mut img = Array3::zeros((out_shape[0], out_shape[1], out_shape[2]));
    let mut lab = Array3::zeros((out_shape[0], out_shape[1], out_shape[2]));
    for ((z, y, x), v) in img.indexed_iter_mut() {
        let p = [z, y, x];
        let off = [0, 1, 2].map(|k| (p[k] as f64 - half[k]) * s[k]);
        let d = t.displacement_at(p);
        let mut q = [0.0; 3];
        for i in 0..3 {
            let mm: f64 = (0..3).map(|j| t.matrix[i][j] * off[j]).sum::<f64>() + d[i];
            q[i] = centre[i] + mm / s[i];
        }
        *v = trilinear_fill(image, q, fill);
        let r = q.map(|v| v.round() as i64);
        if (0..3).all(|k| r[k] >= 0 && r[k] < dims[k]) {
            lab[p] = labels[[r[0] as usize, r[1] as usize, r[2] as usize]];
        }
    }
    (img, lab)
}

/// Reverses one axis (0 = z, 1 = y, 2 = x).
pub fn mirror<T: Clone>(a: &Array3<T>, axis: usize) -> Array3<T> {
    let (nz, ny, nx) = a.dim();
    let n = [nz, ny, nx];
    Array3::from_shape_fn(a.dim(), |(z, y, x)| {
        let mut i = [z, y, x];
        i[axis] = n[axis] - 1 - i[axis];
        a[i].clone()
    })
}

/// Min/max-rescaled power law; intensity range is preserved.
pub fn gamma_correct(img: &mut Array3<f32>, gamma: f64) {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return;
    }
    img.mapv_inplace(|v| {
        let u = ((v - lo) / range) as f64;
        lo + (u.powf(gamma) as f32) * range
    });
}

fn draw_spatial<R: Rng>(cfg: &AugmentConfig, out_shape: [usize; 3], rng: &mut R) -> Option<SpatialTransform> {
    let mut t: Option<SpatialTransform> = None;
    if cfg.rotation && rng.random_bool(cfg.probability) {
        let m = cfg.rotation_deg.to_radians();
        let angles = [0; 3].map(|_| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 });
        t = Some(SpatialTransform::rotation(angles));
    }
    if cfg.scaling && rng.random_bool(cfg.probability) {
        let [lo, hi] = cfg.scale_range;
        let k = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let s = SpatialTransform::scaling(k).matrix;
        t = Some(t.unwrap_or_else(SpatialTransform::identity).then_matrix(&s));
    }
    if cfg.elastic && rng.random_bool(cfg.probability) && cfg.elastic_magnitude_mm > 0.0 {
        let g = cfg.elastic_grid;
        let coarse = out_shape.map(|n| n.div_ceil(g) + 1);
        let normal = Normal::new(0.0, cfg.elastic_magnitude_mm).expect("validated magnitude");
        let field = Array4::from_shape_simple_fn((3, coarse[0], coarse[1], coarse[2]), || normal.sample(rng));
        let mut base = t.unwrap_or_else(SpatialTransform::identity);
        base.displacement = Some((field, g));
        t = Some(base);
    }
    t
}

/// Draws and applies one augmentation to a block of `out_shape` centred at
/// source index `centre`. The image fill value outside the source is its
/// minimum.
pub fn augment_block<R: Rng>(
    image: &Array3<f32>,
    labels: &Array3<u8>,
    spacing: Spacing,
    out_shape: [usize; 3],
    centre: [f64; 3],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Array3<f32>, Array3<u8>) {
    let fill = image.iter().copied().fold(f32::INFINITY, f32::min);
    let t = draw_spatial(cfg, out_shape, rng).unwrap_or_else(SpatialTransform::identity);
    let (mut img, mut lab) = resample(image, labels, spacing, out_shape, centre, &t, fill);
    if cfg.gamma && rng.random_bool(cfg.probability) {
        let [lo, hi] = cfg.gamma_range;
        let g = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        gamma_correct(&mut img, g);
    }
    if cfg.mirroring {
        for axis in 0..3 {
            if rng.random_bool(cfg.mirror_probability) {
                img = mirror(&img, axis);
                lab = mirror(&lab, axis);
            }
        }
    }
    (img, lab)
}

/// Whole-volume augmentation; identical spatial transform for image and
/// labels, deterministic for a given generator state.
pub fn augment<R: Rng>(v: &Volume, l: &LabelMap, cfg: &AugmentConfig, rng: &mut R) -> Result<(Volume, LabelMap)> {
    l.check_paired(v)?;
    if !cfg.any_enabled() {
        return Ok((v.clone(), l.clone()));
    }
    let shape = v.shape();
    let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let (img, lab) = augment_block(&v.voxels, &l.labels, v.spacing, shape, centre, cfg, rng);
    Ok((Volume::new(img, v.spacing, v.case_id.clone())?, LabelMap::new(lab, l.spacing)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case() -> (Volume, LabelMap) {
        let img = Array3::from_shape_fn((6, 7, 8), |(z, y, x)| (z * 100 + y * 10 + x) as f32);
        let lab = Array3::from_shape_fn((6, 7, 8), |(z, y, x)| ((z + y + x) % 3) as u8);
        let sp = Spacing::new(1.0, 1.0, 2.0);
        (Volume::new(img, sp, "c").unwrap(), LabelMap::new(lab, sp).unwrap())
    }

    #[test]
    fn disabled_is_identity() {
        let (v, l) = case();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v2, l2) = augment(&v, &l, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(v2, v);
        assert_eq!(l2, l);
    }

    #[test]
    fn identity_resample_reproduces_input() {
        let (v, l) = case();
        let centre = v.shape().map(|n| (n as f64 - 1.0) / 2.0);
        let (img, lab) = resample(&v.voxels, &l.labels, v.spacing, v.shape(), centre, &SpatialTransform::identity(), 0.0);
        assert_eq!(lab, l.labels);
        for (a, b) in img.iter().zip(v.voxels.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn mirror_twice_is_identity() {
        let (v, _) = case();
        for axis in 0..3 {
            let once = mirror(&v.voxels, axis);
            assert_ne!(once, v.voxels);
            assert_eq!(mirror(&once, axis), v.voxels);
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let r = SpatialTransform::rotation([0.2, -0.1, 0.25]).matrix;
        let rt = [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[j][i]));
        let p = matmul(&r, &rt);
        for (i, row) in p.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_about_z_moves_x_to_y() {
        // a bar along x becomes a bar along y
        let n = 9;
        let mut img = Array3::<f32>::zeros((1, n, n));
        let mut lab = Array3::<u8>::zeros((1, n, n));
        for x in 0..n {
            img[[0, 4, x]] = 1.0;
            lab[[0, 4, x]] = 2;
        }
        let t = SpatialTransform::rotation([std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        let (_, out) = resample(&img, &lab, Spacing::isotropic(1.0), [1, n, n], [0.0, 4.0, 4.0], &t, 0.0);
        for y in 0..n {
            assert_eq!(out[[0, y, 4]], 2);
        }
        assert_eq!(out.iter().filter(|&&v| v == 2).count(), n);
    }

    #[test]
    fn full_augmentation_keeps_label_set_and_is_deterministic() {
        let (v, l) = case();
        let mut cfg = AugmentConfig::default();
        cfg.probability = 1.0;
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&v, &l, &cfg, &mut rng).unwrap()
        };
        let (a1, b1) = run(4);
        let (a2, b2) = run(4);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert!(b1.labels.iter().all(|&x| x <= 2));
        assert_eq!(b1.shape(), l.shape());
        assert!(a1.voxels.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gamma_preserves_range() {
        let (mut v, _) = case();
        let lo = v.voxels.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        gamma_correct(&mut v.voxels, 1.4);
        let lo2 = v.voxels.iter().copied().fold(f32::INFINITY, f32::min);
        let hi2 = v.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!((lo - lo2).abs() < 1e-3 && (hi - hi2).abs() < 1e-2);
    }
}
