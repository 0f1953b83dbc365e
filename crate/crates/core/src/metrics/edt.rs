//! Exact squared Euclidean distance transform with anisotropic spacing
//! (separable lower-envelope-of-parabolas method).

use ndarray::{Array3, Axis};

/// Squared distance (mm²) from every voxel centre to the nearest `true` voxel
/// of `features`; `+inf` everywhere when there are none.
pub fn squared_distance_to(features: &Array3<bool>, spacing_zyx: [f64; 3]) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    for (axis, &w) in spacing_zyx.iter().enumerate() {
        let n = d.len_of(Axis(axis));
        let mut buf = vec![0.0; n];
        let mut scratch = Envelope::with_capacity(n);
        for mut lane in d.lanes_mut(Axis(axis)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            scratch.transform(&buf, w * w);
            for (v, r) in lane.iter_mut().zip(scratch.out.iter()) {
                *v = *r;
            }
        }
    }
    d
}

struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
    out: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
            out: vec![0.0; n],
        }
    }

    /// out[p] = min_q w2·(p − q)² + f[q]
    fn transform(&mut self, f: &[f64], w2: f64) {
        self.sites.clear();
        self.bounds.clear();
        let meet = |f: &[f64], q: usize, v: usize| -> f64 {
            let (qf, vf) = (q as f64, v as f64);
            ((f[q] + w2 * qf * qf) - (f[v] + w2 * vf * vf)) / (2.0 * w2 * (qf - vf))
        };
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&v) => {
                        let s = meet(f, q, v);
                        if s <= *self.bounds.last().unwrap() {
                            self.sites.pop();
                            self.bounds.pop();
                        } else {
                            self.sites.push(q);
                            self.bounds.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            self.out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for p in 0..f.len() {
            let pf = p as f64;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < pf {
                k += 1;
            }
            let q = self.sites[k];
            let dq = pf - q as f64;
            self.out[p] = w2 * dq * dq + f[q];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let density = if trial % 2 == 0 { 0.05 } else { 0.3 };
            let m = Array3::from_shape_fn((6, 7, 8), |_| rng.random_bool(density));
            let s = [1.5, 0.7, 1.1];
            let d = squared_distance_to(&m, s);
            let pts: Vec<_> = m.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
            for ((z, y, x), &got) in d.indexed_iter() {
                let want = pts
                    .iter()
                    .map(|&(a, b, c)| {
                        ((z as f64 - a as f64) * s[0]).powi(2)
                            + ((y as f64 - b as f64) * s[1]).powi(2)
                            + ((x as f64 - c as f64) * s[2]).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                if want.is_infinite() {
                    assert!(got.is_infinite());
                } else {
                    assert!((got - want).abs() < 1e-9, "({z},{y},{x}) {got} vs {want}");
                }
            }
        }
    }
}
