//! Tape-based reverse-mode differentiation over the handful of layer types
//! the network needs.

use crate::sobel::{self, SobelCombine};
use crate::tensor::{self, ConvGeometry, Tensor};

pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvTranspose { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32> },
    LeakyRelu { x: Var, slope: f32 },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Mean { xs: Vec<Var> },
    Sobel { x: Var, grads: Vec<[Vec<f32>; 3]>, combine: SobelCombine },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every parameter leaf, indexed by parameter id.
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let out = tensor::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        self.push(out, Op::Conv { x, w, b, geom })
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = tensor::conv_transpose2_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::ConvTranspose { x, w, b })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let [n, c, ..] = xv.dims5();
        let m: usize = xv.spatial().iter().product();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = Tensor::zeros(&xv.shape);
        let mut means = Vec::with_capacity(n * c);
        let mut rstds = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let src = &xv.data[i * m..(i + 1) * m];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let rstd = 1.0 / (var + NORM_EPS as f64).sqrt();
            let (gc, bc) = (g[i % c], b[i % c]);
            for (o, &v) in out.data[i * m..(i + 1) * m].iter_mut().zip(src) {
                *o = gc * ((v as f64 - mean) * rstd) as f32 + bc;
            }
            means.push(mean as f32);
            rstds.push(rstd as f32);
        }
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(&xv.shape, xv.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect());
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(&xv.shape, xv.data.iter().map(|&v| sobel::sigmoid(v)).collect());
        self.push(out, Op::Sigmoid { x })
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, ..] = av.dims5();
        let cb = bv.dims5()[1];
        assert_eq!(av.spatial(), bv.spatial(), "concat of mismatched spatial shapes");
        let m: usize = av.spatial().iter().product();
        let mut data = Vec::with_capacity(n * (ca + cb) * m);
        for s in 0..n {
            data.extend_from_slice(&av.data[s * ca * m..(s + 1) * ca * m]);
            data.extend_from_slice(&bv.data[s * cb * m..(s + 1) * cb * m]);
        }
        let mut shape = av.shape.clone();
        shape[1] = ca + cb;
        self.push(Tensor::from_vec(&shape, data), Op::Concat { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "elementwise product of mismatched shapes");
        let out = Tensor::from_vec(&av.shape, av.data.iter().zip(&bv.data).map(|(p, q)| p * q).collect());
        self.push(out, Op::Mul { a, b })
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        // f64 accumulation keeps the result order-independent and inside the
        // pointwise min/max of the inputs
        let k = xs.len() as f64;
        let shape = self.value(xs[0]).shape.clone();
        let mut acc = vec![0f64; shape.iter().product()];
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.shape, shape, "mean of mismatched shapes");
            acc.iter_mut().zip(&v.data).for_each(|(a, &b)| *a += b as f64);
        }
        let out = Tensor::from_vec(&shape, acc.into_iter().map(|a| (a / k) as f32).collect());
        self.push(out, Op::Mean { xs: xs.to_vec() })
    }

    /// Per-channel Sobel response of a 5-D activation.
    pub fn sobel(&mut self, x: Var, combine: SobelCombine) -> Var {
        let xv = self.value(x);
        let [n, c, ..] = xv.dims5();
        let dims = xv.spatial();
        let m: usize = dims.iter().product();
        let mut out = Tensor::zeros(&xv.shape);
        let mut grads = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let g = sobel::directional_responses(&xv.data[i * m..(i + 1) * m], dims);
            for (j, o) in out.data[i * m..(i + 1) * m].iter_mut().enumerate() {
                *o = sobel::combine([g[0][j], g[1][j], g[2][j]], combine);
            }
            grads.push(g);
        }
        self.push(out, Op::Sobel { x, grads, combine })
    }

    /// Back-propagates the given output gradients and returns the gradient of
    /// every parameter leaf (`n_params` slots).
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>, n_params: usize) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        let mut params: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match params[*id].as_mut() {
                    Some(p) => p.add_assign(&g),
                    None => params[*id] = Some(g),
                },
                Op::Conv { x, w, b, geom } => {
                    let want_dx = self.needs_grad(*x);
                    let (dx, dw, db) = tensor::conv3d_backward(self.value(*x), self.value(*w), &g, *geom, want_dx);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose { x, w, b } => {
                    let (dx, dw, db) = tensor::conv_transpose2_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::InstanceNorm { x, gamma, beta, mean, rstd } => {
                    let xv = self.value(*x);
                    let [n, c, ..] = xv.dims5();
                    let m: usize = xv.spatial().iter().product();
                    let gv = &self.value(*gamma).data;
                    let mut dx = Tensor::zeros(&xv.shape);
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    for j in 0..n * c {
                        let ch = j % c;
                        let src = &xv.data[j * m..(j + 1) * m];
                        let dy = &g.data[j * m..(j + 1) * m];
                        let (mu, rs) = (mean[j] as f64, rstd[j] as f64);
                        let (mut sum_dxhat, mut sum_dxhat_xhat, mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0, 0.0, 0.0);
                        for (&v, &d) in src.iter().zip(dy) {
                            let xhat = (v as f64 - mu) * rs;
                            let dxhat = d as f64 * gv[ch] as f64;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            sum_dy += d as f64;
                            sum_dy_xhat += d as f64 * xhat;
                        }
                        dgamma.data[ch] += sum_dy_xhat as f32;
                        dbeta.data[ch] += sum_dy as f32;
                        let mf = m as f64;
                        for ((o, &v), &d) in dx.data[j * m..(j + 1) * m].iter_mut().zip(src).zip(dy) {
                            let xhat = (v as f64 - mu) * rs;
                            let dxhat = d as f64 * gv[ch] as f64;
                            *o = (rs / mf * (mf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let dx = xv.data.iter().zip(&g.data).map(|(&v, &d)| if v > 0.0 { d } else { slope * d }).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(&xv.shape, dx));
                }
                Op::Sigmoid { x } => {
                    let dx = node.value.data.iter().zip(&g.data).map(|(&y, &d)| d * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(&node.value.shape, dx));
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (&self.value(*a).shape, &self.value(*b).shape);
                    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                    let m: usize = sa[2..].iter().product();
                    let mut da = Vec::with_capacity(n * ca * m);
                    let mut db = Vec::with_capacity(n * cb * m);
                    for s in 0..n {
                        let base = s * (ca + cb) * m;
                        da.extend_from_slice(&g.data[base..base + ca * m]);
                        db.extend_from_slice(&g.data[base + ca * m..base + (ca + cb) * m]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(sa, da));
                    accumulate(&mut grads, *b, Tensor::from_vec(sb, db));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data.iter().zip(&bv.data).map(|(d, q)| d * q).collect();
                    let db = g.data.iter().zip(&av.data).map(|(d, p)| d * p).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(&av.shape, da));
                    accumulate(&mut grads, *b, Tensor::from_vec(&bv.shape, db));
                }
                Op::Mean { xs } => {
                    let k = xs.len() as f32;
                    for &x in xs {
                        let t = Tensor::from_vec(&g.shape, g.data.iter().map(|d| d / k).collect());
                        accumulate(&mut grads, x, t);
                    }
                }
                Op::Sobel { x, grads: dirs, combine } => {
                    let xv = self.value(*x);
                    let dims = xv.spatial();
                    let m: usize = dims.iter().product();
                    let mut dx = Tensor::zeros(&xv.shape);
                    for (j, gd) in dirs.iter().enumerate() {
                        let out = &node.value.data[j * m..(j + 1) * m];
                        let dy = &g.data[j * m..(j + 1) * m];
                        // d|g|/dg_a = g_a/|g| (0 where |g| = 0); d(Σ|g_a|)/dg_a = sign(g_a)
                        let u: [Vec<f32>; 3] = std::array::from_fn(|a| {
                            (0..m)
                                .map(|i| match combine {
                                    SobelCombine::Magnitude if out[i] > 0.0 => dy[i] * gd[a][i] / out[i],
                                    SobelCombine::Magnitude => 0.0,
                                    SobelCombine::AbsSum => dy[i] * gd[a][i].signum() * (gd[a][i] != 0.0) as u8 as f32,
                                })
                                .collect()
                        });
                        let back = sobel::directional_adjoint([&u[0], &u[1], &u[2]], dims);
                        dx.data[j * m..(j + 1) * m].copy_from_slice(&back);
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        ParamGrads(params)
    }

    /// True when `v` is, or depends on, a parameter.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match grads[v.0].as_mut() {
        Some(existing) => existing.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of d(Σ r·f(params))/d(params) for a graph builder.
    fn check<F>(params: Vec<Tensor>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let run = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
            let out = build(&mut g, &vars);
            (g, out)
        };
        let (g, out) = run(&params);
        let r = random(&g.value(out).shape, &mut rng);
        let objective = |ps: &[Tensor]| {
            let (g, out) = run(ps);
            g.value(out).data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
        };
        let grads = g.backward(vec![(out, r.clone())], params.len());
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.0[pi].as_ref().expect("parameter received no gradient");
            for idx in (0..p.numel()).step_by((p.numel() / 7).max(1)) {
                let h = 1e-2f32;
                let mut plus = params.clone();
                plus[pi].data[idx] += h;
                let mut minus = params.clone();
                minus[pi].data[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let an = analytic.data[idx] as f64;
                assert!(
                    (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1.0),
                    "param {pi}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 2, 4, 4, 4], &mut rng);
        let w1 = random(&[3, 2, 3, 3, 3], &mut rng);
        let b1 = random(&[3], &mut rng);
        let w2 = random(&[3, 4, 2, 2, 2], &mut rng);
        let b2 = random(&[4], &mut rng);
        check(
            vec![x, w1, b1, w2, b2],
            |g, v| {
                let h = g.conv(v[0], v[1], Some(v[2]), ConvGeometry { kernel: 3, stride: 2, pad: 1 });
                let h = g.sigmoid(h);
                g.conv_transpose(h, v[3], v[4])
            },
            2e-2,
        );
    }

    #[test]
    fn norm_and_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 3, 3, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        check(
            vec![x, gamma, beta],
            |g, v| {
                let h = g.instance_norm(v[0], v[1], v[2]);
                g.sigmoid(h)
            },
            2e-2,
        );
    }

    #[test]
    fn sobel_mul_concat_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[1, 2, 4, 4, 4], &mut rng);
        let b = random(&[1, 2, 4, 4, 4], &mut rng);
        let c = random(&[1, 1, 4, 4, 4], &mut rng);
        check(
            vec![a, b, c],
            |g, v| {
                let s = g.sobel(v[1], SobelCombine::Magnitude);
                let att = g.sigmoid(s);
                let gated = g.mul(v[0], att);
                let cat = g.concat(gated, v[2]);
                let m = g.mean(&[cat, cat]);
                g.leaky_relu(m, 0.2)
            },
            3e-2,
        );
    }
}
