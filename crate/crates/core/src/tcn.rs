//! Gated dilated-inception temporal convolutions.
//!
//! Tensors are laid out `[B, C, N, T]`. Each layer runs one causal
//! convolution per kernel size, crops the branches to a common length from
//! the oldest side, concatenates them, and gates `tanh(filter) ⊙ σ(gate)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{next, prefixed, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub layers: usize,
    pub kernel_sizes: Vec<usize>,
    pub dilation_exponential: f64,
    /// Total width of the concatenated inception branches.
    pub conv_channels: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            layers: 2,
            kernel_sizes: vec![2, 3, 6, 7],
            dilation_exponential: 1.0,
            conv_channels: 32,
            residual_channels: 32,
            skip_channels: 64,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("tcn needs at least one layer".into()));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "kernel sizes must be nonempty and >= 1, got {:?}",
                self.kernel_sizes
            )));
        }
        if !(self.dilation_exponential > 0.0) || !self.dilation_exponential.is_finite() {
            return Err(Error::Config(format!(
                "dilation exponential must be > 0, got {}",
                self.dilation_exponential
            )));
        }
        if self.residual_channels == 0 || self.skip_channels == 0 {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.conv_channels == 0 || !self.conv_channels.is_multiple_of(self.kernel_sizes.len()) {
            return Err(Error::Config(format!(
                "conv_channels {} must be a positive multiple of the {} kernel sizes",
                self.conv_channels,
                self.kernel_sizes.len()
            )));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }

    /// Dilation of the 0-based layer `layer`.
    pub fn dilation(&self, layer: usize) -> usize {
        dilation_for(layer, self.dilation_exponential)
    }

    /// Number of input steps one output step depends on: `1 + Σ (k_max − 1)·d_ℓ`.
    pub fn required_window(&self) -> usize {
        1 + (0..self.layers)
            .map(|l| (self.max_kernel() - 1) * self.dilation(l))
            .sum::<usize>()
    }

    /// Output length for an input of `window` steps.
    pub fn output_len(&self, window: usize) -> Result<usize> {
        let need = self.required_window();
        if window < need {
            return Err(Error::Config(format!(
                "window {window} is shorter than the receptive field {need}"
            )));
        }
        Ok(window - need + 1)
    }
}

pub fn dilation_for(layer: usize, de: f64) -> usize {
    (de.powi(layer as i32).round() as usize).max(1)
}

/// Receptive field in the closed form
/// `1 + (k−1)·DE^{L−1}/(DE−1)` for `DE > 1`, `L·(k−1) + 1` otherwise.
///
/// For `DE > 1` this is not the exact span of the stack; see
/// [`TcnConfig::required_window`].
pub fn receptive_field(kernel_size: usize, layers: usize, de: f64) -> usize {
    let k = kernel_size as f64;
    if de > 1.0 {
        (1.0 + (k - 1.0) * de.powi(layers as i32 - 1) / (de - 1.0)).ceil() as usize
    } else {
        layers * (kernel_size - 1) + 1
    }
}

/// A convolution kernel with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// Uniform in `±1/√(C_in·k)`.
    pub fn init<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        ConvParams {
            weight: Tensor::uniform(&[cout, cin, k], bound, rng),
            bias: Tensor::uniform(&[cout], bound, rng),
        }
    }

    pub fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[cout, cin, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

impl ParamSet for ConvParams {
    type Vars = ConvVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn bind(&self, vars: &mut dyn Iterator<Item = Var>) -> ConvVars {
        ConvVars {
            weight: next(vars),
            bias: next(vars),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcnLayerParams {
    /// One per kernel size.
    pub filter: Vec<ConvParams>,
    pub gate: Vec<ConvParams>,
    pub residual: ConvParams,
    pub skip: ConvParams,
}

#[derive(Clone, Debug)]
pub struct TcnLayerVars {
    pub filter: Vec<ConvVars>,
    pub gate: Vec<ConvVars>,
    pub residual: ConvVars,
    pub skip: ConvVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcnParams {
    pub layers: Vec<TcnLayerParams>,
}

impl TcnParams {
    pub fn init<R: Rng + ?Sized>(cfg: &TcnConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, |o, i, k| ConvParams::init(o, i, k, rng))
    }

    pub fn zeros(cfg: &TcnConfig) -> Result<Self> {
        Self::build(cfg, ConvParams::zeros)
    }

    fn build(cfg: &TcnConfig, mut make: impl FnMut(usize, usize, usize) -> ConvParams) -> Result<Self> {
        cfg.validate()?;
        let branch = cfg.conv_channels / cfg.kernel_sizes.len();
        let cres = cfg.residual_channels;
        let layers = (0..cfg.layers)
            .map(|_| TcnLayerParams {
                filter: cfg.kernel_sizes.iter().map(|&k| make(branch, cres, k)).collect(),
                gate: cfg.kernel_sizes.iter().map(|&k| make(branch, cres, k)).collect(),
                residual: make(cres, cfg.conv_channels, 1),
                skip: make(cfg.skip_channels, cfg.conv_channels, 1),
            })
            .collect();
        Ok(TcnParams { layers })
    }
}

impl ParamSet for TcnParams {
    type Vars = Vec<TcnLayerVars>;

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (j, c) in l.filter.iter().enumerate() {
                out.extend(prefixed(&format!("layer{i}.filter{j}"), c.named()));
            }
            for (j, c) in l.gate.iter().enumerate() {
                out.extend(prefixed(&format!("layer{i}.gate{j}"), c.named()));
            }
            out.extend(prefixed(&format!("layer{i}.residual"), l.residual.named()));
            out.extend(prefixed(&format!("layer{i}.skip"), l.skip.named()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for c in l.filter.iter_mut().chain(l.gate.iter_mut()) {
                out.extend(c.tensors_mut());
            }
            out.extend(l.residual.tensors_mut());
            out.extend(l.skip.tensors_mut());
        }
        out
    }

    fn bind(&self, vars: &mut dyn Iterator<Item = Var>) -> Vec<TcnLayerVars> {
        self.layers
            .iter()
            .map(|l| TcnLayerVars {
                filter: l.filter.iter().map(|c| c.bind(vars)).collect(),
                gate: l.gate.iter().map(|c| c.bind(vars)).collect(),
                residual: l.residual.bind(vars),
                skip: l.skip.bind(vars),
            })
            .collect()
    }
}

/// Parallel causal convolutions with a shared dilation, cropped to the
/// shortest branch and concatenated on channels.
pub fn dilated_inception(g: &mut Graph, x: Var, branches: &[ConvVars], dilation: usize) -> Result<Var> {
    let t = *g.shape(x).last().unwrap_or(&0);
    let kmax = branches
        .iter()
        .map(|b| g.shape(b.weight)[2])
        .max()
        .ok_or_else(|| Error::Config("dilated inception needs at least one kernel".into()))?;
    let span = (kmax - 1) * dilation;
    if t <= span {
        return Err(Error::Config(format!(
            "{t} steps are too few for kernel {kmax} at dilation {dilation}; need {}",
            span + 1
        )));
    }
    let out_len = t - span;
    let mut outs = Vec::with_capacity(branches.len());
    for b in branches {
        let y = g.conv_time(x, b.weight, Some(b.bias), dilation)?;
        outs.push(g.crop_recent(y, out_len)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat(&outs, 1)
}

/// `tanh(filter) ⊙ σ(gate)`
pub fn gated_fusion(g: &mut Graph, filter: Var, gate: Var) -> Result<Var> {
    if g.shape(filter) != g.shape(gate) {
        return Err(Error::dim(
            "gated_fusion",
            format!("{:?} vs {:?}", g.shape(filter), g.shape(gate)),
        ));
    }
    let f = g.tanh(filter)?;
    let s = g.sigmoid(gate)?;
    g.mul(f, s)
}

/// `proj(fused) + crop(layer_in)`
pub fn residual_step(g: &mut Graph, layer_in: Var, fused: Var, proj: &ConvVars) -> Result<Var> {
    let t = *g.shape(fused).last().unwrap_or(&0);
    let p = g.conv_time(fused, proj.weight, Some(proj.bias), 1)?;
    let c = g.crop_recent(layer_in, t)?;
    g.add(p, c)
}

/// Projects each layer's fused output, crops to the last layer's length and
/// sums.
pub fn skip_collect(g: &mut Graph, fused: &[Var], projs: &[ConvVars]) -> Result<Var> {
    if fused.is_empty() || fused.len() != projs.len() {
        return Err(Error::dim("skip_collect", format!("{} outputs, {} projections", fused.len(), projs.len())));
    }
    let t = fused
        .iter()
        .map(|&f| *g.shape(f).last().unwrap_or(&0))
        .min()
        .unwrap_or(0);
    let mut sum: Option<Var> = None;
    for (&f, p) in fused.iter().zip(projs) {
        let s = g.conv_time(f, p.weight, Some(p.bias), 1)?;
        let s = g.crop_recent(s, t)?;
        sum = Some(match sum {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(sum.expect("nonempty"))
}

/// Runs the layer stack on `x: [B, C_res, N, T]`.
/// Returns `(features, skip_sum)`, both with `T − required_window + 1` steps.
pub fn tcn_forward(g: &mut Graph, x: Var, cfg: &TcnConfig, layers: &[TcnLayerVars]) -> Result<(Var, Var)> {
    cfg.validate()?;
    let t = *g.shape(x).last().unwrap_or(&0);
    cfg.output_len(t)?;
    if layers.len() != cfg.layers {
        return Err(Error::Config(format!("{} layer parameter sets for {} layers", layers.len(), cfg.layers)));
    }
    let mut h = x;
    let mut fused_all = Vec::with_capacity(layers.len());
    for (l, p) in layers.iter().enumerate() {
        let d = cfg.dilation(l);
        let f = dilated_inception(g, h, &p.filter, d)?;
        let gt = dilated_inception(g, h, &p.gate, d)?;
        let fused = gated_fusion(g, f, gt)?;
        h = residual_step(g, h, fused, &p.residual)?;
        fused_all.push(fused);
    }
    let projs: Vec<ConvVars> = layers.iter().map(|p| p.skip).collect();
    let skip = skip_collect(g, &fused_all, &projs)?;
    Ok((h, skip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field(7, 3, 1.0), 19);
        assert_eq!(receptive_field(7, 3, 2.0), 25);
        assert_eq!(receptive_field(2, 1, 1.0), 2);
        let cfg = TcnConfig {
            layers: 3,
            kernel_sizes: vec![7],
            conv_channels: 1,
            ..Default::default()
        };
        assert_eq!(cfg.required_window(), 19);
        let cfg = TcnConfig {
            dilation_exponential: 2.0,
            ..cfg
        };
        // dilations 1, 2, 4
        assert_eq!(cfg.required_window(), 43);
    }

    #[test]
    fn fractional_dilation_schedule() {
        assert_eq!((0..4).map(|l| dilation_for(l, 1.5)).collect::<Vec<_>>(), vec![1, 2, 2, 3]);
    }

    fn x4(data: Vec<f64>, shape: [usize; 4]) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn difference_kernel_on_ramp() {
        let mut g = Graph::new();
        let x = g.constant(x4((0..6).map(|v| v as f64).collect(), [1, 1, 1, 6]));
        let b = ConvVars {
            weight: g.constant(Tensor::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap()),
            bias: g.constant(Tensor::zeros(&[1])),
        };
        let y = dilated_inception(&mut g, x, &[b], 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 5]);
    }

    #[test]
    fn averaging_branches_keep_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 10], 4.0));
        let branches: Vec<ConvVars> = [2usize, 3, 6]
            .iter()
            .map(|&k| ConvVars {
                weight: g.constant(Tensor::full(&[1, 1, k], 1.0 / k as f64)),
                bias: g.constant(Tensor::zeros(&[1])),
            })
            .collect();
        let y = dilated_inception(&mut g, x, &branches, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 5]);
        assert!(g.value(y).data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn too_short_window_is_config_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 6]));
        let b = ConvVars {
            weight: g.constant(Tensor::zeros(&[1, 1, 7])),
            bias: g.constant(Tensor::zeros(&[1])),
        };
        assert!(matches!(dilated_inception(&mut g, x, &[b], 1), Err(Error::Config(_))));
    }

    #[test]
    fn gating_examples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let zero = g.constant(Tensor::zeros(&[3]));
        let y = gated_fusion(&mut g, f, zero).unwrap();
        for (o, i) in g.value(y).data().iter().zip([-1.0f64, 0.0, 2.0]) {
            assert!((o - 0.5 * i.tanh()).abs() < 1e-15);
        }
        let shut = g.constant(Tensor::full(&[3], -50.0));
        let y = gated_fusion(&mut g, f, shut).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-20));
        let y = gated_fusion(&mut g, zero, f).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(gated_fusion(&mut g, f, bad).is_err());
    }

    #[test]
    fn zero_kernels_pass_input_through_residual() {
        let cfg = TcnConfig {
            layers: 2,
            kernel_sizes: vec![2, 3],
            conv_channels: 4,
            residual_channels: 2,
            skip_channels: 3,
            ..Default::default()
        };
        let p = TcnParams::zeros(&cfg).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 2, 2, 8], 0.7));
        let (h, skip) = tcn_forward(&mut g, x, &cfg, &vars).unwrap();
        assert_eq!(g.shape(h), &[1, 2, 2, 4]);
        assert!(g.value(skip).data().iter().all(|&v| v == 0.0));
        assert!(g.value(h).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn skip_is_additive() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let id = ConvVars {
            weight: g.constant(Tensor::ones(&[1, 1, 1])),
            bias: g.constant(Tensor::zeros(&[1])),
        };
        let one = skip_collect(&mut g, &[f], &[id]).unwrap();
        let two = skip_collect(&mut g, &[f, f], &[id, id]).unwrap();
        let a = g.value(one).data().to_vec();
        let b = g.value(two).data().to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| (2.0 * x - y).abs() < 1e-15));
    }

    #[test]
    fn output_is_causal_and_bounded() {
        let cfg = TcnConfig {
            layers: 2,
            kernel_sizes: vec![2, 3],
            conv_channels: 4,
            residual_channels: 3,
            skip_channels: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = TcnParams::init(&cfg, &mut rng).unwrap();
        let base = Tensor::uniform(&[1, 3, 2, 12], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let vars = p.register(&mut g, false);
            let xv = g.constant(x.clone());
            let (_, s) = tcn_forward(&mut g, xv, &cfg, &vars).unwrap();
            g.value(s).clone()
        };
        let y0 = run(&base);
        // output step j covers input steps up to j + required - 1
        let need = cfg.required_window();
        let mut bumped = base.clone();
        let last = bumped.numel() - 1;
        bumped.data_mut()[last] += 1.0;
        let y1 = run(&bumped);
        let tout = y0.shape()[3];
        for j in 0..tout {
            let sees_last = j + need - 1 == 11;
            for c in 0..2 {
                for n in 0..2 {
                    let idx = (c * 2 + n) * tout + j;
                    if !sees_last {
                        assert_eq!(y0.data()[idx], y1.data()[idx]);
                    }
                }
            }
        }
    }
}
