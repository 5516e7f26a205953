//! Parameterised layers built on the tape primitives.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::Tape;
use super::tensor::Real;
use super::Var;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Forward,
    Transpose,
}

/// 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub kind: ConvKind,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        kind: ConvKind,
        rng: &mut R,
    ) -> Self {
        let k3 = kernel * kernel * kernel;
        let (shape, fan_in) = match kind {
            ConvKind::Forward => ([cout, cin, kernel, kernel, kernel], cin * k3),
            // each output voxel of a stride-s transpose sees ~k^3/s^3 taps per input channel
            ConvKind::Transpose => ([cin, cout, kernel, kernel, kernel], (cin * k3 / (stride * stride * stride)).max(1)),
        };
        let weight = store.add_he(format!("{name}.weight"), &shape, fan_in, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        Conv3d {
            weight,
            bias,
            stride,
            pad,
            kind,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self.kind {
            ConvKind::Forward => tape.conv3d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad),
            ConvKind::Transpose => {
                tape.conv3d_transpose(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
            }
        }
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / din.max(1) as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[din, dout], std, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[dout]));
        Dense { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Layer norm followed by a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        tape.affine_last(n, p[self.gain], p[self.bias])
    }
}
