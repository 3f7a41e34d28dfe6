use rand::Rng;

use super::config::{Ablation, ModelConfig, StructureMode};
use crate::error::Result;
use crate::hypergraph::{MtclParams, MtclVars};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{next, prefixed, ParamSet};
use crate::tcn::{ConvParams, ConvVars, TcnLayerVars, TcnParams};

/// Dense layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[fan_in, fan_out], bound, rng),
            bias: Tensor::uniform(&[fan_out], bound, rng),
        }
    }
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_bias(y, self.bias)
    }
}

impl ParamSet for Linear {
    type Vars = LinearVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn bind(&self, vars: &mut dyn Iterator<Item = Var>) -> LinearVars {
        LinearVars {
            weight: next(vars),
            bias: next(vars),
        }
    }
}

/// `ReLU(BN(x·W + b))`
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayer {
    pub linear: Linear,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadLayerVars {
    pub linear: LinearVars,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub input_proj: Option<ConvParams>,
    pub tcn: Option<TcnParams>,
    pub temporal_mlp: Vec<Linear>,
    pub mtcl: Option<MtclParams>,
    pub gsl_embed: Option<Tensor>,
    /// `[F, F']` weight of the graph convolution.
    pub spatial_weight: Option<Tensor>,
    /// `[N·F, N·F']` layer replacing graph convolution.
    pub dense_spatial: Option<Linear>,
    pub head: Vec<HeadLayer>,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub input_proj: Option<ConvVars>,
    pub tcn: Option<Vec<TcnLayerVars>>,
    pub temporal_mlp: Vec<LinearVars>,
    pub mtcl: Option<MtclVars>,
    pub gsl_embed: Option<Var>,
    pub spatial_weight: Option<Var>,
    pub dense_spatial: Option<LinearVars>,
    pub head: Vec<HeadLayerVars>,
    pub out: LinearVars,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, n: usize, rng: &mut R) -> Result<Self> {
        cfg.validate_for(n)?;
        let cs = cfg.temporal_width();
        let cg = cfg.gcn_channels;
        let (input_proj, tcn, temporal_mlp) = if cfg.uses_tcn() {
            (
                Some(ConvParams::init(cfg.tcn.residual_channels, 1, 1, rng)),
                Some(TcnParams::init(&cfg.tcn, rng)?),
                Vec::new(),
            )
        } else {
            (None, None, vec![Linear::init(cfg.window, cs, rng), Linear::init(cs, cs, rng)])
        };
        let graph_path = graph_path(cfg);
        let mtcl = if graph_path == GraphPath::Hypergraph {
            Some(MtclParams::init(n, &cfg.hypergraph, rng)?)
        } else {
            None
        };
        let gsl_embed = if matches!(graph_path, GraphPath::Gsl | GraphPath::BinaryTopK) {
            let d = cfg.gsl.embed_dim;
            Some(Tensor::uniform(&[n, d], 1.0 / (d as f64).sqrt(), rng))
        } else {
            None
        };
        let (spatial_weight, dense_spatial) = if graph_path == GraphPath::Dense {
            (None, Some(Linear::init(n * cs, n * cg, rng)))
        } else {
            let b = 1.0 / (cs as f64).sqrt();
            (Some(Tensor::uniform(&[cs, cg], b, rng)), None)
        };
        let mut head = Vec::new();
        let mut width = cg;
        for &h in &cfg.mlp_hidden {
            head.push(HeadLayer {
                linear: Linear::init(width, h, rng),
                gamma: Tensor::ones(&[h]),
                beta: Tensor::zeros(&[h]),
            });
            width = h;
        }
        let out = Linear::init(width, 1, rng);
        Ok(ModelParams {
            input_proj,
            tcn,
            temporal_mlp,
            mtcl,
            gsl_embed,
            spatial_weight,
            dense_spatial,
            head,
            out,
        })
    }
}

/// Which spatial operator a configuration uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphPath {
    Hypergraph,
    Identity,
    Gsl,
    BinaryTopK,
    Dense,
}

pub fn graph_path(cfg: &ModelConfig) -> GraphPath {
    match (cfg.ablation, cfg.structure) {
        (Ablation::NoGcn, _) => GraphPath::Dense,
        (Ablation::NoHyper, _) => GraphPath::BinaryTopK,
        (Ablation::NoMtcl, _) => GraphPath::Identity,
        (_, StructureMode::Gsl) => GraphPath::Gsl,
        (_, StructureMode::Mtcl) => GraphPath::Hypergraph,
    }
}

impl ParamSet for ModelParams {
    type Vars = ModelVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(p) = &self.input_proj {
            out.extend(prefixed("input_proj", p.named()));
        }
        if let Some(p) = &self.tcn {
            out.extend(prefixed("tcn", p.named()));
        }
        for (i, l) in self.temporal_mlp.iter().enumerate() {
            out.extend(prefixed(&format!("temporal_mlp{i}"), l.named()));
        }
        if let Some(p) = &self.mtcl {
            out.extend(prefixed("mtcl", p.named()));
        }
        if let Some(e) = &self.gsl_embed {
            out.push(("gsl.embed".into(), e));
        }
        if let Some(w) = &self.spatial_weight {
            out.push(("spatial.weight".into(), w));
        }
        if let Some(l) = &self.dense_spatial {
            out.extend(prefixed("dense_spatial", l.named()));
        }
        for (i, h) in self.head.iter().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.linear.named()));
            out.push((format!("head{i}.gamma"), &h.gamma));
            out.push((format!("head{i}.beta"), &h.beta));
        }
        out.extend(prefixed("out", self.out.named()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.input_proj {
            out.extend(p.tensors_mut());
        }
        if let Some(p) = &mut self.tcn {
            out.extend(p.tensors_mut());
        }
        for l in &mut self.temporal_mlp {
            out.extend(l.tensors_mut());
        }
        if let Some(p) = &mut self.mtcl {
            out.extend(p.tensors_mut());
        }
        if let Some(e) = &mut self.gsl_embed {
            out.push(e);
        }
        if let Some(w) = &mut self.spatial_weight {
            out.push(w);
        }
        if let Some(l) = &mut self.dense_spatial {
            out.extend(l.tensors_mut());
        }
        for h in &mut self.head {
            out.extend(h.linear.tensors_mut());
            out.push(&mut h.gamma);
            out.push(&mut h.beta);
        }
        out.extend(self.out.tensors_mut());
        out
    }

    fn bind(&self, vars: &mut dyn Iterator<Item = Var>) -> ModelVars {
        ModelVars {
            input_proj: self.input_proj.as_ref().map(|p| p.bind(vars)),
            tcn: self.tcn.as_ref().map(|p| p.bind(vars)),
            temporal_mlp: self.temporal_mlp.iter().map(|l| l.bind(vars)).collect(),
            mtcl: self.mtcl.as_ref().map(|p| p.bind(vars)),
            gsl_embed: self.gsl_embed.as_ref().map(|_| next(vars)),
            spatial_weight: self.spatial_weight.as_ref().map(|_| next(vars)),
            dense_spatial: self.dense_spatial.as_ref().map(|l| l.bind(vars)),
            head: self
                .head
                .iter()
                .map(|h| HeadLayerVars {
                    linear: h.linear.bind(vars),
                    gamma: next(vars),
                    beta: next(vars),
                })
                .collect(),
            out: self.out.bind(vars),
        }
    }
}
