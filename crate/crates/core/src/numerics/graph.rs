//! Tape-recorded reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; node indices are a
//! topological order, so `backward` is a single reverse sweep. Gradients of
//! a node with several consumers are summed in recording order, which keeps
//! results bit-reproducible.

use serde::{Deserialize, Serialize};

use super::tensor::{dims2, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(features: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    CropLast {
        x: Var,
        start: usize,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    NodeMix {
        theta: Var,
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::CropLast { .. } => "crop_last",
            Op::Conv { .. } => "conv_time",
            Op::NodeMix { .. } => "node_mix",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Softmax { .. } => "softmax_temperature",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleCols(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Powf(a, _)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::SumAxis { x, .. }
            | Op::Permute { x, .. }
            | Op::CropLast { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::NodeMix { theta, x } => vec![*theta, *x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded compute graph. Build one per forward/backward step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient, or zeros when the loss does not depend on `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + bias` with `bias` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.unary(x, Op::Act(x, kind), |v| kind.apply(v))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis })
    }

    /// `diag(v) · m`
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = dims2("scale_rows", self.value(m))?;
        if self.shape(v) != [r] {
            return Err(Error::dim("scale_rows", format!("{r} rows vs {:?}", self.shape(v))));
        }
        let vd = self.value(v).data();
        let md = self.value(m).data();
        let data = (0..r * c).map(|k| md[k] * vd[k / c]).collect();
        self.push(Tensor::new(vec![r, c], data)?, Op::ScaleRows(m, v))
    }

    /// `m · diag(v)`
    pub fn scale_cols(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = dims2("scale_cols", self.value(m))?;
        if self.shape(v) != [c] {
            return Err(Error::dim("scale_cols", format!("{c} cols vs {:?}", self.shape(v))));
        }
        let vd = self.value(v).data();
        let md = self.value(m).data();
        let data = (0..r * c).map(|k| md[k] * vd[k % c]).collect();
        self.push(Tensor::new(vec![r, c], data)?, Op::ScaleCols(m, v))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("{axes:?} on {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let map = permute_index_map(&shape, axes);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Keeps `[start, start + len)` of the last axis.
    pub fn crop_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = *shape.last().ok_or_else(|| Error::dim("crop_last", "rank 0"))?;
        if start + len > t {
            return Err(Error::dim("crop_last", format!("[{start}, {}) of {t}", start + len)));
        }
        let rows = shape.iter().product::<usize>() / t.max(1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * t + start..r * t + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push(Tensor::new(out_shape, out)?, Op::CropLast { x, start })
    }

    /// Keeps the most recent `len` steps of the last axis.
    pub fn crop_recent(&mut self, x: Var, len: usize) -> Result<Var> {
        let t = *self.shape(x).last().unwrap_or(&0);
        if len > t {
            return Err(Error::dim("crop_last", format!("keep {len} of {t}")));
        }
        self.crop_last(x, t - len, len)
    }

    /// Causal dilated convolution along the time axis.
    ///
    /// `x` is `[B, C_in, N, T]`, `w` is `[C_out, C_in, k]`, output is
    /// `[B, C_out, N, T - (k-1)·dilation]`. Output step `t` sees input steps
    /// `t, t + d, …, t + (k-1)·d`; the last tap is the current time.
    pub fn conv_time(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (b, cin, n, t) = match xs[..] {
            [b, c, n, t] => (b, c, n, t),
            _ => return Err(Error::dim("conv_time", format!("input {xs:?} is not rank 4"))),
        };
        let (cout, k) = match ws[..] {
            [o, c, k] if c == cin && k >= 1 => (o, k),
            _ => return Err(Error::dim("conv_time", format!("kernel {ws:?} for input {xs:?}"))),
        };
        if dilation == 0 {
            return Err(Error::Parameter("dilation must be >= 1".into()));
        }
        let span = (k - 1) * dilation;
        if t <= span {
            return Err(Error::dim(
                "conv_time",
                format!("{t} steps cannot feed kernel {k} at dilation {dilation}"),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::dim("conv_time", format!("bias {:?}", self.shape(bv))));
            }
        }
        let tout = t - span;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * cout * n * tout];
        for bi in 0..b {
            for o in 0..cout {
                let out_base = (bi * cout + o) * n * tout;
                for c in 0..cin {
                    let in_base = (bi * cin + c) * n * t;
                    for j in 0..k {
                        let wv = wd[(o * cin + c) * k + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let off = j * dilation;
                        for ni in 0..n {
                            let src = &xd[in_base + ni * t + off..in_base + ni * t + off + tout];
                            let dst = &mut out[out_base + ni * tout..out_base + (ni + 1) * tout];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    let bval = self.value(bv).data()[o];
                    for v in &mut out[out_base..out_base + n * tout] {
                        *v += bval;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![b, cout, n, tout], out)?,
            Op::Conv {
                x,
                w,
                bias,
                dilation,
            },
        )
    }

    /// Mixes the node axis: `out[b, i, f] = Σ_j theta[i, j] · x[b, j, f]`.
    pub fn node_mix(&mut self, theta: Var, x: Var) -> Result<Var> {
        let (n, n2) = dims2("node_mix", self.value(theta))?;
        let xs = self.shape(x).to_vec();
        let (b, f) = match xs[..] {
            [b, nn, f] if nn == n2 => (b, f),
            _ => return Err(Error::dim("node_mix", format!("theta {n}x{n2}, x {xs:?}"))),
        };
        let th = self.value(theta).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * n * f];
        for bi in 0..b {
            matmul_into(
                th,
                &xd[bi * n2 * f..(bi + 1) * n2 * f],
                &mut out[bi * n * f..(bi + 1) * n * f],
                n,
                n2,
                f,
            );
        }
        self.push(Tensor::new(vec![b, n, f], out)?, Op::NodeMix { theta, x })
    }

    /// Batch normalization over the rows of `x: [R, F]`.
    ///
    /// Train mode uses batch statistics and moves the running statistics by
    /// `BN_MOMENTUM`; eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
    ) -> Result<Var> {
        let (r, f) = dims2("batch_norm", self.value(x))?;
        if self.shape(gamma) != [f]
            || self.shape(beta) != [f]
            || stats.running_mean.len() != f
            || stats.running_var.len() != f
        {
            return Err(Error::dim("batch_norm", format!("{f} features")));
        }
        if mode == BnMode::Train && r < 2 {
            return Err(Error::dim("batch_norm", "train mode needs at least 2 rows"));
        }
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; f];
                for i in 0..r {
                    for j in 0..f {
                        mean[j] += xd[i * f + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut var = vec![0.0; f];
                for i in 0..r {
                    for j in 0..f {
                        let d = xd[i * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= r as f64);
                (mean, var)
            }
            BnMode::Eval => (stats.running_mean.clone(), stats.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; r * f];
        let mut out = vec![0.0; r * f];
        for i in 0..r {
            for j in 0..f {
                let k = i * f + j;
                xhat[k] = (xd[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + bt[j];
            }
        }
        if mode == BnMode::Train {
            let unbias = r as f64 / (r as f64 - 1.0);
            for j in 0..f {
                stats.running_mean[j] =
                    (1.0 - BN_MOMENTUM) * stats.running_mean[j] + BN_MOMENTUM * mean[j];
                stats.running_var[j] =
                    (1.0 - BN_MOMENTUM) * stats.running_var[j] + BN_MOMENTUM * var[j] * unbias;
            }
        }
        self.push(
            Tensor::new(vec![r, f], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BnMode::Train,
            },
        )
    }

    /// `softmax(x / tau)` over a vector.
    pub fn softmax_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        let probs = super::softmax_temperature(self.value(x).data(), tau)?;
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, probs)?, Op::Softmax { x, tau })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call reset() first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
            }
        }
        Ok(())
    }

}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Pushes the gradient `g` of node `i` into its inputs.
fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    {
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(ga) = acc(nodes, grads, *a) {
                    // dA = G · Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * bd[p * n + c];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    // dB = Aᵀ · G
                    for r in 0..m {
                        for p in 0..k {
                            let aval = ad[r * k + p];
                            if aval == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                gb[p * n + c] += aval * g[r * n + c];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                add_into(acc(nodes, grads, a), g);
                add_into(acc(nodes, grads, b), g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                add_into(acc(nodes, grads, a), g);
                if let Some(gb) = acc(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ad = val(a).data().to_vec();
                let bd = val(b).data().to_vec();
                if let Some(ga) = acc(nodes, grads, a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k];
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * ad[k];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let n = val(bias).numel();
                add_into(acc(nodes, grads, x), g);
                if let Some(gb) = acc(nodes, grads, bias) {
                    for (k, v) in g.iter().enumerate() {
                        gb[k % n] += v;
                    }
                }
            }
            Op::Scale(x, f) => {
                let (x, f) = (*x, *f);
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            Op::Act(x, kind) => {
                let (x, kind) = (*x, *kind);
                let y = out.data();
                let xin = val(x).data();
                let local: Vec<f64> = match kind {
                    Activation::Tanh => y.iter().map(|y| 1.0 - y * y).collect(),
                    Activation::Sigmoid => y.iter().map(|y| y * (1.0 - y)).collect(),
                    Activation::Relu => xin.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                };
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * local[k];
                    }
                }
            }
            Op::Powf(x, p) => {
                let (x, p) = (*x, *p);
                let local: Vec<f64> = val(x).data().iter().map(|v| p * v.powf(p - 1.0)).collect();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * local[k];
                    }
                }
            }
            Op::ClampMin(x, floor) => {
                let (x, floor) = (*x, *floor);
                let pass: Vec<bool> = val(x).data().iter().map(|&v| v > floor).collect();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..g.len() {
                        if pass[k] {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let x = *x;
                let n = val(x).numel() as f64;
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let (outer, len, inner) = split_axis(val(x).shape(), axis);
                if let Some(gx) = acc(nodes, grads, x) {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for k in 0..inner {
                                gx[base + k] += g[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::ScaleRows(m, v) => {
                let (m, v) = (*m, *v);
                let c = val(m).shape()[1];
                let md = val(m).data().to_vec();
                let vd = val(v).data().to_vec();
                if let Some(gm) = acc(nodes, grads, m) {
                    for k in 0..g.len() {
                        gm[k] += g[k] * vd[k / c];
                    }
                }
                if let Some(gv) = acc(nodes, grads, v) {
                    for k in 0..g.len() {
                        gv[k / c] += g[k] * md[k];
                    }
                }
            }
            Op::ScaleCols(m, v) => {
                let (m, v) = (*m, *v);
                let c = val(m).shape()[1];
                let md = val(m).data().to_vec();
                let vd = val(v).data().to_vec();
                if let Some(gm) = acc(nodes, grads, m) {
                    for k in 0..g.len() {
                        gm[k] += g[k] * vd[k % c];
                    }
                }
                if let Some(gv) = acc(nodes, grads, v) {
                    for k in 0..g.len() {
                        gv[k % c] += g[k] * md[k];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let (outer, _, inner) = split_axis(out.shape(), axis);
                let lens: Vec<usize> = parts.iter().map(|p| val(*p).shape()[axis]).collect();
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, len) in parts.iter().zip(&lens) {
                    if let Some(gp) = acc(nodes, grads, *p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                add_into(acc(nodes, grads, x), g);
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let map = permute_index_map(val(x).shape(), axes);
                if let Some(gx) = acc(nodes, grads, x) {
                    for (k, &src) in map.iter().enumerate() {
                        gx[src] += g[k];
                    }
                }
            }
            Op::CropLast { x, start } => {
                let (x, start) = (*x, *start);
                let t = *val(x).shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                let rows = g.len().checked_div(len).unwrap_or(0);
                if let Some(gx) = acc(nodes, grads, x) {
                    for r in 0..rows {
                        for k in 0..len {
                            gx[r * t + start + k] += g[r * len + k];
                        }
                    }
                }
            }
            Op::Conv {
                x,
                w,
                bias,
                dilation,
            } => {
                let (x, w, bias, dilation) = (*x, *w, *bias, *dilation);
                let xs = val(x).shape().to_vec();
                let ws = val(w).shape().to_vec();
                let (b, cin, n, t) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let tout = out.shape()[3];
                let xd = val(x).data();
                let wd = val(w).data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for bi in 0..b {
                        for o in 0..cout {
                            let gbase = (bi * cout + o) * n * tout;
                            for c in 0..cin {
                                let in_base = (bi * cin + c) * n * t;
                                for j in 0..k {
                                    let wv = wd[(o * cin + c) * k + j];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let off = j * dilation;
                                    for ni in 0..n {
                                        let dst = &mut gx[in_base + ni * t + off..in_base + ni * t + off + tout];
                                        let src = &g[gbase + ni * tout..gbase + (ni + 1) * tout];
                                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += wv * s);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = acc(nodes, grads, w) {
                    for bi in 0..b {
                        for o in 0..cout {
                            let gbase = (bi * cout + o) * n * tout;
                            for c in 0..cin {
                                let in_base = (bi * cin + c) * n * t;
                                for j in 0..k {
                                    let off = j * dilation;
                                    let mut s = 0.0;
                                    for ni in 0..n {
                                        let src = &xd[in_base + ni * t + off..in_base + ni * t + off + tout];
                                        let gs = &g[gbase + ni * tout..gbase + (ni + 1) * tout];
                                        s += src.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    gw[(o * cin + c) * k + j] += s;
                                }
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    if let Some(gb) = acc(nodes, grads, bv) {
                        for bi in 0..b {
                            for o in 0..cout {
                                let gbase = (bi * cout + o) * n * tout;
                                gb[o] += g[gbase..gbase + n * tout].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::NodeMix { theta, x } => {
                let (theta, x) = (*theta, *x);
                let (n, n2) = (val(theta).shape()[0], val(theta).shape()[1]);
                let xs = val(x).shape().to_vec();
                let (b, f) = (xs[0], xs[2]);
                let th = val(theta).data();
                let xd = val(x).data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for bi in 0..b {
                        for i in 0..n {
                            for j in 0..n2 {
                                let tv = th[i * n2 + j];
                                if tv == 0.0 {
                                    continue;
                                }
                                for c in 0..f {
                                    gx[(bi * n2 + j) * f + c] += tv * g[(bi * n + i) * f + c];
                                }
                            }
                        }
                    }
                }
                if let Some(gt) = acc(nodes, grads, theta) {
                    for bi in 0..b {
                        for i in 0..n {
                            for j in 0..n2 {
                                let mut s = 0.0;
                                for c in 0..f {
                                    s += g[(bi * n + i) * f + c] * xd[(bi * n2 + j) * f + c];
                                }
                                gt[i * n2 + j] += s;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let f = inv_std.len();
                let r = xhat.len() / f.max(1);
                let gd = val(gamma).data().to_vec();
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let batch_stats = *batch_stats;
                if let Some(gg) = acc(nodes, grads, gamma) {
                    for k in 0..g.len() {
                        gg[k % f] += g[k] * xhat[k];
                    }
                }
                if let Some(gb) = acc(nodes, grads, beta) {
                    for k in 0..g.len() {
                        gb[k % f] += g[k];
                    }
                }
                if let Some(gx) = acc(nodes, grads, x) {
                    if batch_stats {
                        let mut sum_d = vec![0.0; f];
                        let mut sum_dx = vec![0.0; f];
                        for k in 0..g.len() {
                            let d = g[k] * gd[k % f];
                            sum_d[k % f] += d;
                            sum_dx[k % f] += d * xhat[k];
                        }
                        let rf = r as f64;
                        for k in 0..g.len() {
                            let j = k % f;
                            let d = g[k] * gd[j];
                            gx[k] += inv_std[j] / rf * (rf * d - sum_d[j] - xhat[k] * sum_dx[j]);
                        }
                    } else {
                        for k in 0..g.len() {
                            gx[k] += g[k] * gd[k % f] * inv_std[k % f];
                        }
                    }
                }
            }
            Op::Softmax { x, tau } => {
                let (x, tau) = (*x, *tau);
                let y = out.data().to_vec();
                let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..y.len() {
                        gx[k] += y[k] * (g[k] - dot) / tau;
                    }
                }
            }
        }
    }
}

fn add_into(dst: Option<&mut [f64]>, g: &[f64]) {
    if let Some(d) = dst {
        d.iter_mut().zip(g).for_each(|(d, s)| *d += s);
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each output position of the permutation, the linear source index.
fn permute_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
