use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphconv::GslConfig;
use crate::hypergraph::HypergraphConfig;
use crate::masking::MaskConfig;
use crate::tcn::TcnConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Binary top-K graph with plain GCN instead of the hypergraph.
    NoHyper,
    /// Per-node MLP over the raw window instead of the TCN.
    NoTcn,
    /// Fully connected layer over all nodes instead of graph convolution.
    NoGcn,
    /// Fixed identity hypergraph.
    NoMtcl,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoHyper,
        Ablation::NoTcn,
        Ablation::NoGcn,
        Ablation::NoMtcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoHyper => "no_hyper",
            Ablation::NoTcn => "no_tcn",
            Ablation::NoGcn => "no_gcn",
            Ablation::NoMtcl => "no_mtcl",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureMode {
    #[default]
    Mtcl,
    Gsl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub horizon: usize,
    pub tcn: TcnConfig,
    pub hypergraph: HypergraphConfig,
    pub gsl: GslConfig,
    /// Output width of the spatial stage.
    pub gcn_channels: usize,
    /// Hidden widths of the prediction head.
    pub mlp_hidden: Vec<usize>,
    pub mask: MaskConfig,
    pub ablation: Ablation,
    pub structure: StructureMode,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 16,
            horizon: 1,
            tcn: TcnConfig::default(),
            hypergraph: HypergraphConfig::default(),
            gsl: GslConfig::default(),
            gcn_channels: 32,
            mlp_hidden: vec![64],
            mask: MaskConfig::default(),
            ablation: Ablation::Full,
            structure: StructureMode::Mtcl,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip: None,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn uses_tcn(&self) -> bool {
        self.ablation != Ablation::NoTcn
    }

    /// Width of the per-node temporal features.
    pub fn temporal_width(&self) -> usize {
        self.tcn.skip_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 {
            return Err(Error::Config("window and horizon must be >= 1".into()));
        }
        self.tcn.validate()?;
        self.hypergraph.validate()?;
        if self.uses_tcn() {
            self.tcn.output_len(self.window)?;
        }
        if self.gsl.embed_dim == 0 || self.gsl.top_k == Some(0) {
            return Err(Error::Config("gsl embed_dim and top_k must be >= 1".into()));
        }
        if self.gcn_channels == 0 || self.mlp_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        self.mask.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks that depend on the feature count.
    pub fn validate_for(&self, n_features: usize) -> Result<()> {
        self.validate()?;
        if n_features == 0 {
            return Err(Error::Config("dataset has no features".into()));
        }
        let graph_needed = matches!(self.ablation, Ablation::NoHyper) || (self.structure == StructureMode::Gsl && self.ablation != Ablation::NoGcn);
        if graph_needed {
            let k = self.gsl.k_for(n_features);
            if n_features < 2 || k >= n_features {
                return Err(Error::Config(format!(
                    "top-K graph needs 1 <= K <= N-1; K={k}, N={n_features}"
                )));
            }
        }
        Ok(())
    }
}
