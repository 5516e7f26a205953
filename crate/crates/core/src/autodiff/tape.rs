use std::rc::Rc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftDirection;

use super::attention::{self, AttentionMode, Layout};
use super::conv::{self, ConvGeom};
use super::spectral;
use super::tensor::{gemm, lit, Mat, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Over the last axis.
    Layer,
    /// Per `(batch, channel)` over the spatial axes.
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
    Dice,
    HingeReal,
    HingeFake,
}

/// Target operand for [`Tape::loss_eval`].
pub enum LossTarget<'a> {
    Classes(&'a [usize]),
    Values(Var),
    None,
}

type CustomBackward<T> = Rc<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Norm {
        x: Var,
        group: usize,
        inv_std: Vec<T>,
    },
    AffineLast {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ConcatChannels(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RowSlice(Var),
    SoftmaxChannels(Var),
    SelectChannel {
        x: Var,
        channel: usize,
    },
    StraightThrough(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        saved: attention::Saved<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Dice {
        p: Var,
        t: Var,
    },
    HingeReal(Var),
    HingeFake(Var),
    Spectral {
        x: Var,
        y: Var,
        dims: [usize; 3],
        fx: Vec<Complex<T>>,
        fy: Vec<Complex<T>>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    leaf_grad: bool,
}

/// Reverse-mode tape.
///
/// Every primitive appends a node; [`Tape::backward`] walks the nodes in
/// reverse exactly once and then clears the tape.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every `requires_grad` leaf, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            axis: "rank".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Shape {
                op,
                axis: format!("axis {i}"),
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != 5 {
        return Err(Error::Shape {
            op,
            axis: "rank".into(),
            expected: 5,
            got: shape.len(),
        });
    }
    Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]]))
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let x3 = x * x * x;
    let t = (c * (x + a * x3)).tanh();
    let val = half * x * (T::one() + t);
    let dt = (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x);
    (val, half * (T::one() + t) + half * x * dt)
}

/// Dropout keep-mask already scaled by `1 / (1 - p)`; all ones when `p == 0`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = lit::<T>(1.0 / (1.0 - p));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            leaf_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
            leaf_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn zip_map(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = lit::<T>(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `a + b` where `b` is broadcast over `a`'s leading axis.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() + 1 {
            return Err(Error::Shape {
                op: "add_broadcast",
                axis: "rank".into(),
                expected: sa.len().saturating_sub(1),
                got: sb.len(),
            });
        }
        same_shape("add_broadcast", &sa[1..], &sb)?;
        let vb = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(vb.len().max(1)) {
            for (x, &y) in chunk.iter_mut().zip(&vb) {
                *x = *x + y;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = self.value(x);
        match kind {
            Activation::Relu => {
                let out = v.map(|a| a.max(T::zero()));
                self.push(out, Op::Relu(x), &[x])
            }
            Activation::LeakyRelu(alpha) => {
                let al = lit::<T>(alpha);
                let out = v.map(|a| if a > T::zero() { a } else { a * al });
                self.push(out, Op::LeakyRelu(x, al), &[x])
            }
            Activation::Gelu => {
                let out = v.map(|a| gelu_parts(a).0);
                self.push(out, Op::Gelu(x), &[x])
            }
            Activation::Sigmoid => {
                let out = v.map(|a| T::one() / (T::one() + (-a).exp()));
                self.push(out, Op::Sigmoid(x), &[x])
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        self.activation(x, Activation::LeakyRelu(alpha))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// `x (.., in) @ w (in, out) + b (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() {
            return Err(Error::invalid("dense: weights must be (in, out)"));
        }
        let (din, dout) = (ws[0], ws[1]);
        if *xs.last().unwrap() != din {
            return Err(Error::Shape {
                op: "dense",
                axis: "input features".into(),
                expected: din,
                got: *xs.last().unwrap(),
            });
        }
        if let Some(b) = b {
            same_shape("dense bias", &[dout], self.shape(b))?;
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        gemm(
            Mat::new(self.value(x).data(), rows, din),
            Mat::new(self.value(w).data(), din, dout),
            &mut out,
            T::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Dense { x, w, b }, &inputs))
    }

    /// Cross-correlation. `x`: `(n, ci, z, y, x)`, `w`: `(co, ci, k, k, k)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, dims) = spatial("conv3d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::invalid("conv3d: weights must be (co, ci, k, k, k)"));
        }
        if ws[1] != ci {
            return Err(Error::Shape {
                op: "conv3d",
                axis: "input channels".into(),
                expected: ws[1],
                got: ci,
            });
        }
        let co = ws[0];
        if let Some(b) = b {
            same_shape("conv3d bias", &[co], self.shape(b))?;
        }
        let geom = ConvGeom::conv(dims, ws[2], stride, pad)?;
        let out = conv::conv_forward(
            self.value(x).data(),
            n,
            ci,
            co,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let [g0, g1, g2] = geom.grid;
        let out = Tensor::new(&[n, co, g0, g1, g2], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution. `x`: `(n, ci, z, y, x)`, `w`: `(ci, co, k, k, k)`.
    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, dims) = spatial("conv3d_transpose", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::invalid(
                "conv3d_transpose: weights must be (ci, co, k, k, k)",
            ));
        }
        if ws[0] != ci {
            return Err(Error::Shape {
                op: "conv3d_transpose",
                axis: "input channels".into(),
                expected: ws[0],
                got: ci,
            });
        }
        let co = ws[1];
        if let Some(b) = b {
            same_shape("conv3d_transpose bias", &[co], self.shape(b))?;
        }
        let geom = ConvGeom::transpose(dims, ws[2], stride, pad)?;
        let out = conv::convt_forward(
            self.value(x).data(),
            n,
            ci,
            co,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let [d0, d1, d2] = geom.image;
        let out = Tensor::new(&[n, co, d0, d1, d2], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }, &inputs))
    }

    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let (n, c, dims) = spatial("max_pool3d", self.shape(x))?;
        let (out, argmax, od) = conv::max_pool2(self.value(x).data(), n * c, dims);
        let out = Tensor::new(&[n, c, od[0], od[1], od[2]], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn norm(&mut self, x: Var, kind: NormKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let group = match kind {
            NormKind::Layer => *shape.last().unwrap_or(&0),
            NormKind::Instance => {
                let (_, _, dims) = spatial("instance_norm", &shape)?;
                dims.iter().product()
            }
        };
        if group == 0 {
            return Err(Error::Empty("norm: zero-size reduction axis".into()));
        }
        let eps = lit::<T>(NORM_EPS);
        let gl = lit::<T>(group as f64);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(out.len() / group);
        for chunk in out.data_mut().chunks_mut(group) {
            let mean = chunk.iter().copied().sum::<T>() / gl;
            let var = chunk.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / gl;
            let inv = T::one() / (var + eps).sqrt();
            for a in chunk.iter_mut() {
                *a = (*a - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok(self.push(out, Op::Norm { x, group, inv_std }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.norm(x, NormKind::Layer)
    }

    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        self.norm(x, NormKind::Instance)
    }

    /// `x * gain + bias` over the last axis.
    pub fn affine_last(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        same_shape("affine_last gain", &[d], self.shape(gain))?;
        same_shape("affine_last bias", &[d], self.shape(bias))?;
        let (g, b) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for i in 0..d {
                row[i] = row[i] * g[i] + b[i];
            }
        }
        Ok(self.push(out, Op::AffineLast { x, gain, bias }, &[x, gain, bias]))
    }

    /// Inverted dropout with an explicit keep-mask (see [`dropout_mask`]).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "dropout",
                axis: "numel".into(),
                expected: self.value(x).len(),
                got: mask.len(),
            });
        }
        let mut out = self.value(x).clone();
        for (a, &m) in out.data_mut().iter_mut().zip(&mask) {
            *a = *a * m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let mask = dropout_mask(self.value(x).len(), p, rng);
        self.dropout_with_mask(x, mask)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, da) = spatial("concat", self.shape(a))?;
        let (nb, cb, db) = spatial("concat", self.shape(b))?;
        same_shape("concat", &[na, da[0], da[1], da[2]], &[nb, db[0], db[1], db[2]])?;
        let s: usize = da.iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..na {
            out.extend_from_slice(&va[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&vb[i * cb * s..(i + 1) * cb * s]);
        }
        let out = Tensor::new(&[na, ca + cb, da[0], da[1], da[2]], out)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Row lookup: `table (vocab, dim)` -> `(ids.len(), dim)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid("embedding: table must be (vocab, dim)"));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Leading `rows` rows of a 2D value.
    pub fn row_slice(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows > s[0] {
            return Err(Error::Shape {
                op: "row_slice",
                axis: "rows".into(),
                expected: s.first().copied().unwrap_or(0),
                got: rows,
            });
        }
        let out = Tensor::new(&[rows, s[1]], self.value(x).data()[..rows * s[1]].to_vec())?;
        Ok(self.push(out, Op::RowSlice(x), &[x]))
    }

    /// Softmax over axis 1 of `(n, c, ...)`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("softmax_channels: need (n, c, ...)"));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for b in 0..n {
            for p in 0..inner {
                let idx = |k: usize| (b * c + k) * inner + p;
                let max = (0..c).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..c {
                    d[idx(k)] = (d[idx(k)] - max).exp();
                    total = total + d[idx(k)];
                }
                for k in 0..c {
                    d[idx(k)] = d[idx(k)] / total;
                }
            }
        }
        Ok(self.push(out, Op::SoftmaxChannels(x), &[x]))
    }

    /// Channel `channel` of `(n, c, ...)` as `(n, 1, ...)`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || channel >= s[1] {
            return Err(Error::Shape {
                op: "select_channel",
                axis: "channel".into(),
                expected: s.get(1).copied().unwrap_or(0),
                got: channel,
            });
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * inner);
        for b in 0..n {
            out.extend_from_slice(&v[(b * c + channel) * inner..(b * c + channel + 1) * inner]);
        }
        let mut shape = s;
        shape[1] = 1;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::SelectChannel { x, channel }, &[x]))
    }

    /// Forward value `quantized`, gradient copied to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor<T>) -> Result<Var> {
        same_shape("straight_through", self.shape(z), quantized.shape())?;
        Ok(self.push(quantized, Op::StraightThrough(z), &[z]))
    }

    /// Causal multi-head attention over `(batch, len, dim)` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mode: &AttentionMode<T>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        same_shape("attention keys", &qs, self.shape(k))?;
        same_shape("attention values", &qs, self.shape(v))?;
        if qs.len() != 3 {
            return Err(Error::Shape {
                op: "attention",
                axis: "rank".into(),
                expected: 3,
                got: qs.len(),
            });
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: model dim {} not divisible by {heads} heads",
                qs[2]
            )));
        }
        if let AttentionMode::Favor(omega) = mode {
            if omega.shape().len() != 2 || omega.shape()[1] != qs[2] / heads {
                return Err(Error::Shape {
                    op: "attention",
                    axis: "feature head dim".into(),
                    expected: qs[2] / heads,
                    got: omega.shape().get(1).copied().unwrap_or(0),
                });
            }
        }
        let lay = Layout {
            batch: qs[0],
            len: qs[1],
            dim: qs[2],
            heads,
        };
        let (out, saved) = attention::forward(
            &lay,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mode,
        );
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("attention output".into()));
        }
        let out = Tensor::new(&qs, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                saved,
            },
            &[q, k, v],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / lit(v.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over positions of `-log softmax(logits)[target]`; class axis 1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("cross_entropy: logits must be (n, c, ...)"));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if targets.len() != n * inner {
            return Err(Error::Shape {
                op: "cross_entropy",
                axis: "targets".into(),
                expected: n * inner,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange { index: bad, size: c });
        }
        let v = self.value(logits).data();
        let mut probs = vec![T::zero(); v.len()];
        let mut total = T::zero();
        for b in 0..n {
            for p in 0..inner {
                let idx = |k: usize| (b * c + k) * inner + p;
                let max = (0..c).map(|k| v[idx(k)]).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|k| (v[idx(k)] - max).exp()).sum::<T>().ln() + max;
                for k in 0..c {
                    probs[idx(k)] = (v[idx(k)] - lse).exp();
                }
                total = total + lse - v[idx(targets[b * inner + p])];
            }
        }
        let loss = total / lit((n * inner).max(1) as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
        let loss = s / lit(va.len().max(1) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), &[a, b]))
    }

    /// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
    pub fn dice(&mut self, p: Var, t: Var) -> Result<Var> {
        same_shape("dice", self.shape(p), self.shape(t))?;
        let (vp, vt) = (self.value(p).data(), self.value(t).data());
        let eps = lit::<T>(DICE_EPS);
        let inter = vp.iter().zip(vt).map(|(&a, &b)| a * b).sum::<T>();
        let denom = vp.iter().copied().sum::<T>() + vt.iter().copied().sum::<T>() + eps;
        let loss = T::one() - (lit::<T>(2.0) * inter + eps) / denom;
        Ok(self.push(Tensor::scalar(loss), Op::Dice { p, t }, &[p, t]))
    }

    /// Discriminator loss on real samples: `mean(relu(1 - d))`.
    pub fn hinge_real(&mut self, d: Var) -> Var {
        let v = self.value(d);
        let s = v.data().iter().map(|&x| (T::one() - x).max(T::zero())).sum::<T>() / lit(v.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::HingeReal(d), &[d])
    }

    /// Discriminator loss on fake samples: `mean(relu(1 + d))`.
    pub fn hinge_fake(&mut self, d: Var) -> Var {
        let v = self.value(d);
        let s = v.data().iter().map(|&x| (T::one() + x).max(T::zero())).sum::<T>() / lit(v.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::HingeFake(d), &[d])
    }

    pub fn loss_eval(&mut self, pred: Var, target: LossTarget<'_>, kind: LossKind) -> Result<Var> {
        match (kind, target) {
            (LossKind::CrossEntropy, LossTarget::Classes(t)) => self.cross_entropy(pred, t),
            (LossKind::Mse, LossTarget::Values(t)) => self.mse(pred, t),
            (LossKind::Dice, LossTarget::Values(t)) => self.dice(pred, t),
            (LossKind::HingeReal, _) => Ok(self.hinge_real(pred)),
            (LossKind::HingeFake, _) => Ok(self.hinge_fake(pred)),
            (kind, _) => Err(Error::invalid(format!("{kind:?}: wrong target kind"))),
        }
    }

    /// Mean squared difference of 3D DFT magnitudes over `(n, c, z, y, x)`.
    pub fn spectral(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("spectral", self.shape(x), self.shape(y))?;
        let (n, c, dims) = spatial("spectral", self.shape(x))?;
        let s: usize = dims.iter().product();
        let (vx, vy) = (self.value(x).data(), self.value(y).data());
        let mut fx = Vec::with_capacity(vx.len());
        let mut fy = Vec::with_capacity(vy.len());
        for i in 0..n * c {
            fx.extend(spectral::forward_real(&vx[i * s..(i + 1) * s], dims));
            fy.extend(spectral::forward_real(&vy[i * s..(i + 1) * s], dims));
        }
        let total = fx
            .iter()
            .zip(&fy)
            .map(|(a, b)| {
                let d = a.norm() - b.norm();
                d * d
            })
            .sum::<T>();
        let loss = total / lit(fx.len().max(1) as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Spectral { x, y, dims, fx, fy }, &[x, y]))
    }

    /// A user primitive: `backward(grad_out, inputs)` returns one optional
    /// gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Rc::new(backward),
            },
            inputs,
        )
    }

    /// Populate gradients of every `requires_grad` leaf w.r.t. the scalar
    /// `loss`, then clear the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward: unknown variable"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid("backward: loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.leaf_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Tensor::new(node.value.shape(), data).expect("gradient shape")
                })
            })
            .collect();
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let vb = self.val(*b);
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.tracked(*b) {
                    let va = self.val(*a);
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.tracked(*b) {
                    let len = self.val(*b).len();
                    let mut gb = vec![T::zero(); len];
                    for chunk in g.chunks(len.max(1)) {
                        for (acc, &x) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) | Op::StraightThrough(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.val(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gg, &xx)| if xx > T::zero() { gg } else { T::zero() })
                        .collect(),
                );
            }
            Op::LeakyRelu(a, al) => {
                let x = self.val(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gg, &xx)| if xx > T::zero() { gg } else { gg * *al })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let x = self.val(*a);
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gg, &xx)| gg * gelu_parts(xx).1).collect());
            }
            Op::Sigmoid(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(out).map(|(&gg, &s)| gg * s * (T::one() - s)).collect(),
                );
            }
            Op::Dense { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (din, dout) = (ws[0], ws[1]);
                let rows = g.len() / dout.max(1);
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(Mat::new(g, rows, dout), Mat::t(self.val(*w), din, dout), &mut dx, T::zero());
                    self.accumulate(grads, *x, dx);
                }
                if self.tracked(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(Mat::t(self.val(*x), rows, din), Mat::new(g, rows, dout), &mut dw, T::zero());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            for (acc, &x) in db.iter_mut().zip(row) {
                                *acc = *acc + x;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Conv { x, w, b, geom } | Op::ConvTranspose { x, w, b, geom } => {
                let transposed = matches!(node.op, Op::ConvTranspose { .. });
                let xs = self.nodes[x.0].value.shape();
                let (n, ci) = (xs[0], xs[1]);
                let ws = self.nodes[w.0].value.shape();
                let co = if transposed { ws[1] } else { ws[0] };
                let f = if transposed { conv::convt_backward } else { conv::conv_backward };
                let cg = f(
                    self.val(*x),
                    g,
                    n,
                    ci,
                    co,
                    geom,
                    self.val(*w),
                    self.tracked(*x),
                    self.tracked(*w),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for (&src, &gg) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gg;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Norm { x, group, inv_std } => {
                let gl = lit::<T>(*group as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (c, ((gc, yc), dc)) in g
                    .chunks(*group)
                    .zip(out.chunks(*group))
                    .zip(dx.chunks_mut(*group))
                    .enumerate()
                {
                    let sg = gc.iter().copied().sum::<T>();
                    let sgy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..*group {
                        dc[j] = inv_std[c] * (gc[j] - sg / gl - yc[j] * sgy / gl);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AffineLast { x, gain, bias } => {
                let gv = self.val(*gain);
                let d = gv.len();
                if self.tracked(*x) {
                    let dx = g.iter().enumerate().map(|(j, &gg)| gg * gv[j % d]).collect();
                    self.accumulate(grads, *x, dx);
                }
                let xv = self.val(*x);
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (j, (&gg, &xx)) in g.iter().zip(xv).enumerate() {
                    dg[j % d] = dg[j % d] + gg * xx;
                    db[j % d] = db[j % d] + gg;
                }
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let s: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let mut ga = Vec::with_capacity(sa[0] * ca * s);
                let mut gb = Vec::with_capacity(sa[0] * cb * s);
                for i in 0..sa[0] {
                    let base = i * (ca + cb) * s;
                    ga.extend_from_slice(&g[base..base + ca * s]);
                    gb.extend_from_slice(&g[base + ca * s..base + (ca + cb) * s]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                let mut dt = vec![T::zero(); self.val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::RowSlice(x) => {
                let mut dx = vec![T::zero(); self.val(*x).len()];
                dx[..g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxChannels(x) => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for p in 0..inner {
                        let idx = |k: usize| (b * c + k) * inner + p;
                        let dot = (0..c).map(|k| g[idx(k)] * out[idx(k)]).sum::<T>();
                        for k in 0..c {
                            dx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectChannel { x, channel } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![T::zero(); n * c * inner];
                for b in 0..n {
                    dx[(b * c + channel) * inner..(b * c + channel + 1) * inner]
                        .copy_from_slice(&g[b * inner..(b + 1) * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                saved,
            } => {
                let s = node.value.shape();
                let lay = Layout {
                    batch: s[0],
                    len: s[1],
                    dim: s[2],
                    heads: *heads,
                };
                let ag = attention::backward(&lay, self.val(*q), self.val(*k), self.val(*v), g, saved);
                self.accumulate(grads, *q, ag.dq);
                self.accumulate(grads, *k, ag.dk);
                self.accumulate(grads, *v, ag.dv);
            }
            Op::Sum(x) => self.accumulate(grads, *x, vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => {
                let n = self.val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / lit(n.max(1) as f64); n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.nodes[logits.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let scale = g[0] / lit((n * inner).max(1) as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for b in 0..n {
                    for p in 0..inner {
                        let t = targets[b * inner + p];
                        let idx = (b * c + t) * inner + p;
                        dx[idx] = dx[idx] - scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let scale = g[0] * lit(2.0 / va.len().max(1) as f64);
                let d: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * scale).collect();
                if self.tracked(*b) {
                    self.accumulate(grads, *b, d.iter().map(|&x| -x).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::Dice { p, t } => {
                let (vp, vt) = (self.val(*p), self.val(*t));
                let eps = lit::<T>(DICE_EPS);
                let two = lit::<T>(2.0);
                let num = two * vp.iter().zip(vt).map(|(&a, &b)| a * b).sum::<T>() + eps;
                let den = vp.iter().copied().sum::<T>() + vt.iter().copied().sum::<T>() + eps;
                // d/dp_i [1 - num/den] = -(2 t_i den - num) / den^2
                let grad = |other: &[T]| -> Vec<T> {
                    other
                        .iter()
                        .map(|&o| -g[0] * (two * o * den - num) / (den * den))
                        .collect()
                };
                if self.tracked(*p) {
                    self.accumulate(grads, *p, grad(vt));
                }
                if self.tracked(*t) {
                    self.accumulate(grads, *t, grad(vp));
                }
            }
            Op::HingeReal(d) | Op::HingeFake(d) => {
                let real = matches!(node.op, Op::HingeReal(_));
                let v = self.val(*d);
                let scale = g[0] / lit(v.len().max(1) as f64);
                let dx = v
                    .iter()
                    .map(|&x| {
                        if real && x < T::one() {
                            -scale
                        } else if !real && x > -T::one() {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *d, dx);
            }
            Op::Spectral { x, y, dims, fx, fy } => {
                let s: usize = dims.iter().product();
                let scale = g[0] * lit(2.0 / fx.len().max(1) as f64);
                let mut gx = Vec::with_capacity(fx.len());
                let mut gy = Vec::with_capacity(fx.len());
                let zero = Complex::new(T::zero(), T::zero());
                for i in 0..fx.len() / s {
                    let (bx, by) = (&fx[i * s..(i + 1) * s], &fy[i * s..(i + 1) * s]);
                    let (mut ax, mut ay) = (Vec::with_capacity(s), Vec::with_capacity(s));
                    for (cx, cy) in bx.iter().zip(by) {
                        let (mx, my) = (cx.norm(), cy.norm());
                        let a = (mx - my) * scale;
                        ax.push(if mx > T::zero() { *cx * (a / mx) } else { zero });
                        ay.push(if my > T::zero() { *cy * (-a / my) } else { zero });
                    }
                    gx.extend(spectral::dft3(&ax, *dims, FftDirection::Inverse).iter().map(|c| c.re));
                    gy.extend(spectral::dft3(&ay, *dims, FftDirection::Inverse).iter().map(|c| c.re));
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *y, gy);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gout = Tensor::new(node.value.shape(), g.to_vec())?;
                let gs = backward(&gout, &vals);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi.into_data());
                    }
                }
            }
        }
        Ok(())
    }
}
