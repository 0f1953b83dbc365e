//! Dense f32 tensors and the convolution kernels behind the network layers.
//!
//! Activations are `[batch, channels, z, y, x]`. Convolution weights are
//! `[out, in, k, k, k]`; transposed-convolution weights are `[in, out, 2, 2, 2]`.

use matrixmultiply::sgemm;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} elements", data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `[n, c, z, y, x]` of a 5-D activation.
    pub fn dims5(&self) -> [usize; 5] {
        assert_eq!(self.shape.len(), 5, "expected a 5-D tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let d = self.dims5();
        [d[2], d[3], d[4]]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// `C[m×n] = beta·C + A·B` on raw row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // bounds the stride arithmetic performed inside sgemm
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        d.map(|n| self.out_len(n))
    }
}

// Upper bound on im2col buffer size (floats) per chunk.
const COL_BUDGET: usize = 1 << 22;

/// Fills `col[(ci,a,b,c), p]` for output planes `z0..z1`.
fn im2col(x: &[f32], ci_n: usize, d: [usize; 3], g: ConvGeometry, od: [usize; 3], z0: usize, z1: usize, col: &mut [f32]) {
    let k = g.kernel;
    let plane = od[1] * od[2];
    let pc = (z1 - z0) * plane;
    let vol = d[0] * d[1] * d[2];
    let mut row = 0;
    for ci in 0..ci_n {
        let src = &x[ci * vol..(ci + 1) * vol];
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let mut o = 0;
                    for oz in z0..z1 {
                        let iz = (oz * g.stride + a) as isize - g.pad as isize;
                        if iz < 0 || iz >= d[0] as isize {
                            dst[o..o + plane].fill(0.0);
                            o += plane;
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = (oy * g.stride + b) as isize - g.pad as isize;
                            if iy < 0 || iy >= d[1] as isize {
                                dst[o..o + od[2]].fill(0.0);
                                o += od[2];
                                continue;
                            }
                            let base = (iz as usize * d[1] + iy as usize) * d[2];
                            for ox in 0..od[2] {
                                let ix = (ox * g.stride + c) as isize - g.pad as isize;
                                dst[o] = if ix < 0 || ix >= d[2] as isize { 0.0 } else { src[base + ix as usize] };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates `col` back into `dx`.
fn col2im(col: &[f32], ci_n: usize, d: [usize; 3], g: ConvGeometry, od: [usize; 3], z0: usize, z1: usize, dx: &mut [f32]) {
    let k = g.kernel;
    let plane = od[1] * od[2];
    let pc = (z1 - z0) * plane;
    let vol = d[0] * d[1] * d[2];
    let mut row = 0;
    for ci in 0..ci_n {
        let dst = &mut dx[ci * vol..(ci + 1) * vol];
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let src = &col[row * pc..(row + 1) * pc];
                    let mut o = 0;
                    for oz in z0..z1 {
                        let iz = (oz * g.stride + a) as isize - g.pad as isize;
                        if iz < 0 || iz >= d[0] as isize {
                            o += plane;
                            continue;
                        }
                        for oy in 0..od[1] {
                            let iy = (oy * g.stride + b) as isize - g.pad as isize;
                            if iy < 0 || iy >= d[1] as isize {
                                o += od[2];
                                continue;
                            }
                            let base = (iz as usize * d[1] + iy as usize) * d[2];
                            for ox in 0..od[2] {
                                let ix = (ox * g.stride + c) as isize - g.pad as isize;
                                if ix >= 0 && ix < d[2] as isize {
                                    dst[base + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn z_chunks(od: [usize; 3], rows: usize) -> Vec<(usize, usize)> {
    let plane = (od[1] * od[2]).max(1);
    let per = (COL_BUDGET / (rows * plane).max(1)).clamp(1, od[0].max(1));
    (0..od[0]).step_by(per).map(|z0| (z0, (z0 + per).min(od[0]))).collect()
}

/// Cross-correlation with zero padding.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    let [n, ci, dz, dy, dx] = x.dims5();
    let co = w.shape[0];
    assert_eq!(w.shape[1], ci, "conv weight expects {} input channels, got {ci}", w.shape[1]);
    let d = [dz, dy, dx];
    let od = g.out_dims(d);
    let p = od.iter().product::<usize>();
    let kk = ci * g.kernel.pow(3);
    let mut out = Tensor::zeros(&[n, co, od[0], od[1], od[2]]);
    let chunks = z_chunks(od, kk);
    let mut col = Vec::new();
    let plane = od[1] * od[2];
    for s in 0..n {
        let xs = &x.data[s * ci * dz * dy * dx..(s + 1) * ci * dz * dy * dx];
        let os = &mut out.data[s * co * p..(s + 1) * co * p];
        for &(z0, z1) in &chunks {
            let pc = (z1 - z0) * plane;
            col.resize(kk * pc, 0.0);
            im2col(xs, ci, d, g, od, z0, z1, &mut col);
            gemm(co, kk, pc, &w.data, (kk, 1), &col, (pc, 1), 0.0, &mut os[z0 * plane..], p);
        }
        if let Some(b) = bias {
            for c in 0..co {
                let bv = b.data[c];
                os[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub fn conv3d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: ConvGeometry, want_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, ci, dz, dyy, dxx] = x.dims5();
    let co = w.shape[0];
    let d = [dz, dyy, dxx];
    let od = g.out_dims(d);
    let p = od.iter().product::<usize>();
    let kk = ci * g.kernel.pow(3);
    let vol = dz * dyy * dxx;
    let plane = od[1] * od[2];
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[co]);
    let mut dx = want_dx.then(|| Tensor::zeros(&x.shape));
    let chunks = z_chunks(od, kk);
    let mut col = Vec::new();
    for s in 0..n {
        let xs = &x.data[s * ci * vol..(s + 1) * ci * vol];
        let gs = &dy.data[s * co * p..(s + 1) * co * p];
        for c in 0..co {
            db.data[c] += gs[c * p..(c + 1) * p].iter().sum::<f32>();
        }
        for &(z0, z1) in &chunks {
            let pc = (z1 - z0) * plane;
            col.resize(kk * pc, 0.0);
            im2col(xs, ci, d, g, od, z0, z1, &mut col);
            let gchunk = &gs[z0 * plane..];
            // dW[co, kk] += dY[co, pc] · col^T[pc, kk]
            gemm(co, pc, kk, gchunk, (p, 1), &col, (1, pc), 1.0, &mut dw.data, kk);
            if let Some(dx) = dx.as_mut() {
                // dcol[kk, pc] = W^T[kk, co] · dY[co, pc]
                gemm(kk, co, pc, &w.data, (1, kk), gchunk, (p, 1), 0.0, &mut col, pc);
                col2im(&col, ci, d, g, od, z0, z1, &mut dx.data[s * ci * vol..(s + 1) * ci * vol]);
            }
        }
    }
    (dx, dw, db)
}

/// Kernel-2, stride-2 transposed convolution (exact 2× upsampling).
pub fn conv_transpose2_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let [n, ci, dz, dy, dx] = x.dims5();
    assert_eq!(w.shape[0], ci);
    let co = w.shape[1];
    let p = dz * dy * dx;
    let mut out = Tensor::zeros(&[n, co, 2 * dz, 2 * dy, 2 * dx]);
    let mut tmp = vec![0.0f32; co * 8 * p];
    let (oy, ox) = (2 * dy, 2 * dx);
    let ovol = 8 * p;
    for s in 0..n {
        let xs = &x.data[s * ci * p..(s + 1) * ci * p];
        // tmp[co*8, p] = Wm^T · x, Wm = [ci, co*8]
        gemm(co * 8, ci, p, &w.data, (1, co * 8), xs, (p, 1), 0.0, &mut tmp, p);
        let os = &mut out.data[s * co * ovol..(s + 1) * co * ovol];
        for c in 0..co {
            let bv = bias.data[c];
            for k in 0..8 {
                let (a, b, cc) = (k >> 2, (k >> 1) & 1, k & 1);
                let src = &tmp[(c * 8 + k) * p..(c * 8 + k + 1) * p];
                let mut i = 0;
                for z in 0..dz {
                    for y in 0..dy {
                        let row = ((c * 2 * dz + 2 * z + a) * oy + 2 * y + b) * ox + cc;
                        for xx in 0..dx {
                            os[row + 2 * xx] = src[i] + bv;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub fn conv_transpose2_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, ci, dz, dy, dx] = x.dims5();
    let co = w.shape[1];
    let p = dz * dy * dx;
    let (oy, ox) = (2 * dy, 2 * dx);
    let ovol = 8 * p;
    let mut gx = Tensor::zeros(&x.shape);
    let mut gw = Tensor::zeros(&w.shape);
    let mut gb = Tensor::zeros(&[co]);
    let mut tmp = vec![0.0f32; co * 8 * p];
    for s in 0..n {
        let gs = &dout.data[s * co * ovol..(s + 1) * co * ovol];
        for c in 0..co {
            gb.data[c] += gs[c * ovol..(c + 1) * ovol].iter().sum::<f32>();
            for k in 0..8 {
                let (a, b, cc) = (k >> 2, (k >> 1) & 1, k & 1);
                let dst = &mut tmp[(c * 8 + k) * p..(c * 8 + k + 1) * p];
                let mut i = 0;
                for z in 0..dz {
                    for y in 0..dy {
                        let row = ((c * 2 * dz + 2 * z + a) * oy + 2 * y + b) * ox + cc;
                        for xx in 0..dx {
                            dst[i] = gs[row + 2 * xx];
                            i += 1;
                        }
                    }
                }
            }
        }
        let xs = &x.data[s * ci * p..(s + 1) * ci * p];
        // dx[ci, p] = Wm[ci, co*8] · tmp[co*8, p]
        gemm(ci, co * 8, p, &w.data, (co * 8, 1), &tmp, (p, 1), 0.0, &mut gx.data[s * ci * p..(s + 1) * ci * p], p);
        // dWm[ci, co*8] += x[ci, p] · tmp^T[p, co*8]
        gemm(ci, p, co * 8, xs, (p, 1), &tmp, (1, p), 1.0, &mut gw.data, co * 8);
    }
    (gx, gw, gb)
}
