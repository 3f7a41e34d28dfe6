//! Learned hypergraph incidence and its normalized Laplacian.
//!
//! `H_raw = ReLU(gen ⊙ att)` where `gen = ReLU(N1t·Wh1)·Wh2` and
//! `att = σ(N2t·Wa)`, with `N1t = tanh(α·N1·W1)`, `N2t = tanh(α·N2·W2)`.
//! `H = [H_raw | I]`, `Θ = Dv^{-1/2} H De^{-1} Hᵀ Dv^{-1/2}`, `L = I − Θ`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{next, ParamSet};

/// Floor for hyperedge degrees, so empty hyperedges stay invertible.
pub const EDGE_DEGREE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSource {
    /// Attention reads the second embedding.
    #[default]
    N2,
    /// Attention reads the first embedding (the generator's input).
    N1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypergraphConfig {
    pub embed_dim: usize,
    /// Learned hyperedges; `None` means `ceil(N / 2)`.
    pub hyperedges: Option<usize>,
    /// Generator hidden width; `None` means `embed_dim`.
    pub hidden: Option<usize>,
    pub alpha: f64,
    pub attention_source: AttentionSource,
}

impl Default for HypergraphConfig {
    fn default() -> Self {
        HypergraphConfig {
            embed_dim: 16,
            hyperedges: None,
            hidden: None,
            alpha: 3.0,
            attention_source: AttentionSource::N2,
        }
    }
}

impl HypergraphConfig {
    pub fn hyperedges_for(&self, n: usize) -> usize {
        self.hyperedges.unwrap_or(n.div_ceil(2)).max(1)
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == Some(0) || self.hyperedges == Some(0) {
            return Err(Error::Config("hypergraph widths must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Trainable tensors of the structure learner.
#[derive(Clone, Debug, PartialEq)]
pub struct MtclParams {
    pub n1: Tensor,
    pub n2: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub wh1: Tensor,
    pub wh2: Tensor,
    pub wa: Tensor,
    pub alpha: f64,
}

impl MtclParams {
    /// Uniform init in `±1/√d`.
    pub fn init<R: Rng + ?Sized>(n: usize, cfg: &HypergraphConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let m = cfg.hyperedges_for(n);
        let h = cfg.hidden_width();
        let b = 1.0 / (d as f64).sqrt();
        Ok(MtclParams {
            n1: Tensor::uniform(&[n, d], b, rng),
            n2: Tensor::uniform(&[n, d], b, rng),
            w1: Tensor::uniform(&[d, d], b, rng),
            w2: Tensor::uniform(&[d, d], b, rng),
            wh1: Tensor::uniform(&[d, h], b, rng),
            wh2: Tensor::uniform(&[h, m], b, rng),
            wa: Tensor::uniform(&[d, m], b, rng),
            alpha: cfg.alpha,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n1.shape()[0]
    }

    /// Evaluates the structure outside of any training graph.
    pub fn structure(&self, source: AttentionSource) -> Result<HypergraphStructure> {
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let s = build_structure(&mut g, &v, source)?;
        Ok(s.values(&g))
    }
}

impl ParamSet for MtclParams {
    type Vars = MtclVars;

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("n1".into(), &self.n1),
            ("n2".into(), &self.n2),
            ("w1".into(), &self.w1),
            ("w2".into(), &self.w2),
            ("wh1".into(), &self.wh1),
            ("wh2".into(), &self.wh2),
            ("wa".into(), &self.wa),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.n1,
            &mut self.n2,
            &mut self.w1,
            &mut self.w2,
            &mut self.wh1,
            &mut self.wh2,
            &mut self.wa,
        ]
    }

    fn bind(&self, vars: &mut dyn Iterator<Item = Var>) -> MtclVars {
        MtclVars {
            n1: next(vars),
            n2: next(vars),
            w1: next(vars),
            w2: next(vars),
            wh1: next(vars),
            wh2: next(vars),
            wa: next(vars),
            alpha: self.alpha,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MtclVars {
    pub n1: Var,
    pub n2: Var,
    pub w1: Var,
    pub w2: Var,
    pub wh1: Var,
    pub wh2: Var,
    pub wa: Var,
    pub alpha: f64,
}

/// Graph handles of a built structure.
#[derive(Clone, Copy, Debug)]
pub struct StructureVars {
    pub h: Var,
    pub dv: Var,
    pub de: Var,
    pub theta: Var,
    pub laplacian: Var,
}

impl StructureVars {
    pub fn values(&self, g: &Graph) -> HypergraphStructure {
        HypergraphStructure {
            h: g.value(self.h).clone(),
            dv: g.value(self.dv).data().to_vec(),
            de: g.value(self.de).data().to_vec(),
            theta: g.value(self.theta).clone(),
            laplacian: g.value(self.laplacian).clone(),
        }
    }
}

/// `Dv` and `De` are kept as their diagonals.
#[derive(Clone, Debug, PartialEq)]
pub struct HypergraphStructure {
    pub h: Tensor,
    pub dv: Vec<f64>,
    pub de: Vec<f64>,
    pub theta: Tensor,
    pub laplacian: Tensor,
}

impl HypergraphStructure {
    /// Structure with self-loop hyperedges only: `Θ = I`, `L = 0`.
    pub fn identity(n: usize) -> Self {
        HypergraphStructure {
            h: Tensor::eye(n),
            dv: vec![1.0; n],
            de: vec![1.0; n],
            theta: Tensor::eye(n),
            laplacian: Tensor::zeros(&[n, n]),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.dv.len()
    }
}

/// `tanh(α · N · W)`
pub fn embed_transform(g: &mut Graph, n: Var, w: Var, alpha: f64) -> Result<Var> {
    let p = g.matmul(n, w)?;
    let p = g.scale(p, alpha)?;
    g.tanh(p)
}

/// `ReLU(N1t · Wh1) · Wh2`, `N × m`.
pub fn hyperedge_generator(g: &mut Graph, n1t: Var, wh1: Var, wh2: Var) -> Result<Var> {
    let hidden = g.matmul(n1t, wh1)?;
    let hidden = g.relu(hidden)?;
    g.matmul(hidden, wh2)
}

/// `σ(N2t · Wa)`, `N × m`.
pub fn attention_scores(g: &mut Graph, n2t: Var, wa: Var) -> Result<Var> {
    let logits = g.matmul(n2t, wa)?;
    g.sigmoid(logits)
}

/// `ReLU(gen ⊙ att)`
pub fn build_incidence(g: &mut Graph, gen: Var, att: Var) -> Result<Var> {
    let p = g.mul(gen, att)?;
    g.relu(p)
}

/// `[H_raw | I_N]`
pub fn augment_self_loops(g: &mut Graph, h_raw: Var) -> Result<Var> {
    let shape = g.shape(h_raw).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("augment_self_loops", format!("{shape:?}")));
    }
    let eye = g.constant(Tensor::eye(shape[0]));
    if shape[1] == 0 {
        return Ok(eye);
    }
    g.concat(&[h_raw, eye], 1)
}

/// Node degrees (row sums) and floored hyperedge degrees (column sums).
pub fn degrees(g: &mut Graph, h: Var) -> Result<(Var, Var)> {
    let dv = g.sum_axis(h, 1)?;
    let de = g.sum_axis(h, 0)?;
    let de = g.clamp_min(de, EDGE_DEGREE_EPS)?;
    Ok((dv, de))
}

/// Returns `(Θ, L)`.
pub fn laplacian(g: &mut Graph, h: Var, dv: Var, de: Var) -> Result<(Var, Var)> {
    let n = g.shape(h)[0];
    if g.value(dv).data().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Parameter("node degrees must be positive".into()));
    }
    let dv_isqrt = g.powf(dv, -0.5)?;
    let de_inv = g.powf(de, -1.0)?;
    let b = g.scale_rows(h, dv_isqrt)?;
    let bw = g.scale_cols(b, de_inv)?;
    let bt = g.transpose(b)?;
    let theta = g.matmul(bw, bt)?;
    let eye = g.constant(Tensor::eye(n));
    let l = g.sub(eye, theta)?;
    Ok((theta, l))
}

/// The full chain from embeddings to Laplacian.
pub fn build_structure(g: &mut Graph, p: &MtclVars, source: AttentionSource) -> Result<StructureVars> {
    let n1t = embed_transform(g, p.n1, p.w1, p.alpha)?;
    let n2t = embed_transform(g, p.n2, p.w2, p.alpha)?;
    let gen = hyperedge_generator(g, n1t, p.wh1, p.wh2)?;
    let att_in = match source {
        AttentionSource::N2 => n2t,
        AttentionSource::N1 => n1t,
    };
    let att = attention_scores(g, att_in, p.wa)?;
    let h_raw = build_incidence(g, gen, att)?;
    let h = augment_self_loops(g, h_raw)?;
    let (dv, de) = degrees(g, h)?;
    let (theta, l) = laplacian(g, h, dv, de)?;
    Ok(StructureVars {
        h,
        dv,
        de,
        theta,
        laplacian: l,
    })
}

/// Writes an `N × N` matrix as `<prefix>_epoch<epoch>.csv` with a header of
/// feature names. Returns the file path.
pub fn snapshot_matrix(
    m: &Tensor,
    names: &[String],
    dir: impl AsRef<Path>,
    prefix: &str,
    epoch: usize,
) -> Result<PathBuf> {
    let n = names.len();
    if m.shape() != [n, n] {
        return Err(Error::dim("snapshot", format!("{:?} for {n} names", m.shape())));
    }
    let path = dir.as_ref().join(format!("{prefix}_epoch{epoch}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(names)?;
    for i in 0..n {
        w.write_record((0..n).map(|j| format!("{}", m.at(i, j))))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn snapshot_laplacian(l: &Tensor, names: &[String], dir: impl AsRef<Path>, epoch: usize) -> Result<PathBuf> {
    snapshot_matrix(l, names, dir, "laplacian", epoch)
}

/// Reads a snapshot back as `(names, matrix)`.
pub fn read_snapshot(path: impl AsRef<Path>) -> Result<(Vec<String>, Tensor)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::with_capacity(names.len() * names.len());
    for rec in r.records() {
        for cell in rec?.iter() {
            data.push(cell.parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        }
    }
    let n = names.len();
    Ok((names, Tensor::new(vec![n, n], data)?))
}
