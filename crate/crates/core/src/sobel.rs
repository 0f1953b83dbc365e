//! Fixed 3D Sobel kernels and the boundary-response operator used to gate
//! scar-decoder features.
//!
//! All kernels and operators use cross-correlation (no kernel flip) with zero
//! padding and "same" output shape. Kernel arrays are indexed `[z, y, x]`.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::FeatureMap;

/// Central difference along the derivative axis.
pub const DERIVATIVE: [f32; 3] = [-1.0, 0.0, 1.0];
/// Binomial smoothing along the two other axes.
pub const SMOOTHING: [f32; 3] = [1.0, 2.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SobelKernelSet {
    pub kx: Array3<f32>,
    pub ky: Array3<f32>,
    pub kz: Array3<f32>,
}

impl SobelKernelSet {
    pub fn kernels(&self) -> [&Array3<f32>; 3] {
        [&self.kx, &self.ky, &self.kz]
    }
}

/// Separable construction `d ⊗ s ⊗ s`, one kernel per derivative axis.
pub fn make_sobel_kernels() -> SobelKernelSet {
    let build = |axis_of_derivative: usize| {
        Array3::from_shape_fn((3, 3, 3), |(z, y, x)| {
            let idx = [z, y, x];
            (0..3)
                .map(|a| if a == axis_of_derivative { DERIVATIVE[idx[a]] } else { SMOOTHING[idx[a]] })
                .product()
        })
    };
    // array axis 2 is x, 1 is y, 0 is z
    SobelKernelSet {
        kx: build(2),
        ky: build(1),
        kz: build(0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Raw,
    #[default]
    Sigmoid,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(AttentionMode::Raw),
            "sigmoid" => Ok(AttentionMode::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown attention mode '{other}'"))),
        }
    }
}

/// How the three directional responses are merged per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SobelCombine {
    #[default]
    Magnitude,
    AbsSum,
}

/// One zero-padded 1D correlation pass along array axis `axis` of a
/// `[z, y, x]` field stored contiguously.
fn pass(src: &[f32], dims: [usize; 3], axis: usize, k: [f32; 3], dst: &mut [f32]) {
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let len = dims[axis];
    for (i, out) in dst.iter_mut().enumerate() {
        let pos = (i / stride) % len;
        let mut acc = k[1] * src[i];
        if pos > 0 {
            acc += k[0] * src[i - stride];
        }
        if pos + 1 < len {
            acc += k[2] * src[i + stride];
        }
        *out = acc;
    }
}

fn separable(src: &[f32], dims: [usize; 3], per_axis: [[f32; 3]; 3]) -> Vec<f32> {
    let mut a = vec![0.0; src.len()];
    let mut b = vec![0.0; src.len()];
    pass(src, dims, 2, per_axis[2], &mut a);
    pass(&a, dims, 1, per_axis[1], &mut b);
    pass(&b, dims, 0, per_axis[0], &mut a);
    a
}

fn axis_kernels(derivative_axis: usize, flip: bool) -> [[f32; 3]; 3] {
    let d = if flip {
        [DERIVATIVE[2], DERIVATIVE[1], DERIVATIVE[0]]
    } else {
        DERIVATIVE
    };
    let mut k = [SMOOTHING; 3];
    k[derivative_axis] = d;
    k
}

/// `(gx, gy, gz)` of one channel.
pub fn directional_responses(channel: &[f32], dims: [usize; 3]) -> [Vec<f32>; 3] {
    [2, 1, 0].map(|axis| separable(channel, dims, axis_kernels(axis, false)))
}

/// Adjoint of `directional_responses`: `Σ_axis K_axisᵀ g_axis`.
pub fn directional_adjoint(grads: [&[f32]; 3], dims: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; grads[0].len()];
    for (g, axis) in grads.iter().zip([2, 1, 0]) {
        let back = separable(g, dims, axis_kernels(axis, true));
        out.iter_mut().zip(back).for_each(|(o, b)| *o += b);
    }
    out
}

pub fn combine(g: [f32; 3], mode: SobelCombine) -> f32 {
    match mode {
        SobelCombine::Magnitude => (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt(),
        SobelCombine::AbsSum => g[0].abs() + g[1].abs() + g[2].abs(),
    }
}

/// Per-channel Sobel edge magnitude; channel count and level preserved.
pub fn sobel_response(f: &FeatureMap) -> FeatureMap {
    sobel_response_with(f, SobelCombine::Magnitude)
}

pub fn sobel_response_with(f: &FeatureMap, mode: SobelCombine) -> FeatureMap {
    let (c, z, y, x) = f.values.dim();
    let dims = [z, y, x];
    let mut out = Array4::zeros((c, z, y, x));
    for (src, mut dst) in f.values.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let src: Vec<f32> = src.iter().copied().collect();
        let [gx, gy, gz] = directional_responses(&src, dims);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = combine([gx[i], gy[i], gz[i]], mode);
        }
    }
    FeatureMap {
        values: out,
        level: f.level,
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn attention_map(response: &FeatureMap, mode: AttentionMode) -> FeatureMap {
    let values = match mode {
        AttentionMode::Raw => response.values.clone(),
        AttentionMode::Sigmoid => response.values.mapv(sigmoid),
    };
    FeatureMap {
        values,
        level: response.level,
    }
}
