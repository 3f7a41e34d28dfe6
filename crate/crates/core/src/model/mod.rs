//! The forecaster: masking, temporal convolution, spatial propagation and an
//! MLP head predicting every feature `h` steps ahead.

mod checkpoint;
mod config;
mod params;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, ModelConfig, StructureMode};
pub use params::{graph_path, GraphPath, HeadLayer, HeadLayerVars, Linear, LinearVars, ModelParams, ModelVars};
pub use train::{mse_loss, train, EpochReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Windows;
use crate::error::{Error, Result};
use crate::graphconv::{build_adjacency, binary_adjacency, gcn_propagate, hypergraph_conv, residual_correlation, topk_select};
use crate::hypergraph::build_structure;
use crate::masking::{apply_mask, importance_scores, mask_probabilities, sample_mask, temporal_weights, MaskStage};
use crate::numerics::{BnMode, BnStats, Graph, Tensor, Var};
use crate::params::ParamSet;
use crate::tcn::tcn_forward;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, optional input masking drawn from `seed`.
    Train { stage: MaskStage, seed: u64 },
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_names: Vec<String>,
    pub params: ModelParams,
    /// Running statistics of each head batch-norm layer.
    pub bn: Vec<BnStats>,
    /// Completed training epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

/// Forecasts for a run of windows, row-major `len × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub values: Vec<f64>,
    pub targets: Vec<f64>,
    pub target_indices: Vec<usize>,
    pub n_features: usize,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.target_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_indices.is_empty()
    }

    /// Signed errors `ŷ − y`, row-major.
    pub fn errors(&self) -> Vec<f64> {
        self.values.iter().zip(&self.targets).map(|(p, t)| p - t).collect()
    }
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, feature_names: Vec<String>) -> Result<Self> {
        let n = feature_names.len();
        config.validate_for(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config, n, &mut rng)?;
        let bn = config.mlp_hidden.iter().map(|&h| BnStats::new(h)).collect();
        Ok(Model {
            config,
            feature_names,
            params,
            bn,
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Builds predictions `[B, N]` for `inputs: [B, N, K]`.
    pub fn forward(&mut self, g: &mut Graph, vars: &ModelVars, inputs: &Tensor, mode: Mode) -> Result<Var> {
        forward(&self.config, g, vars, inputs, mode, &mut self.bn)
    }

    /// Forward in eval mode on a private graph; running statistics untouched.
    pub fn predict_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let mut bn = self.bn.clone();
        let out = forward(&self.config, &mut g, &vars, inputs, Mode::Eval, &mut bn)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode forecasts for every window, split over `threads` workers.
    pub fn predict(&self, windows: &Windows, threads: usize) -> Result<Predictions> {
        let n = self.n_features();
        if windows.n_features() != n {
            return Err(Error::Data(format!(
                "checkpoint expects {n} features, data has {}",
                windows.n_features()
            )));
        }
        if windows.window() != self.config.window {
            return Err(Error::Config(format!(
                "windows of {} steps for a model trained on {}",
                windows.window(),
                self.config.window
            )));
        }
        let bs = self.config.batch_size.max(1);
        let starts: Vec<usize> = (0..windows.len()).step_by(bs).collect();
        let run = |start: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
            let pos: Vec<usize> = (start..(start + bs).min(windows.len())).collect();
            let b = windows.batch(&pos);
            let x = Tensor::new(vec![b.len(), n, b.window], b.inputs)?;
            let y = self.predict_batch(&x)?;
            Ok((y.into_data(), b.targets, b.target_indices))
        };
        let threads = threads.max(1).min(starts.len().max(1));
        let parts: Vec<Result<(Vec<f64>, Vec<f64>, Vec<usize>)>> = if threads == 1 {
            starts.iter().map(|&s| run(s)).collect()
        } else {
            let chunk = starts.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = starts
                    .chunks(chunk)
                    .map(|c| scope.spawn(|| c.iter().map(|&s| run(s)).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("prediction worker panicked"))
                    .collect()
            })
        };
        let mut out = Predictions {
            values: Vec::with_capacity(windows.len() * n),
            targets: Vec::with_capacity(windows.len() * n),
            target_indices: Vec::with_capacity(windows.len()),
            n_features: n,
        };
        for p in parts {
            let (v, t, i) = p?;
            out.values.extend(v);
            out.targets.extend(t);
            out.target_indices.extend(i);
        }
        Ok(out)
    }

    /// Mean squared error over all windows in eval mode.
    pub fn evaluate_mse(&self, windows: &Windows) -> Result<f64> {
        let p = self.predict(windows, 1)?;
        if p.values.is_empty() {
            return Err(Error::Data("no windows to evaluate".into()));
        }
        Ok(p.errors().iter().map(|e| e * e).sum::<f64>() / p.values.len() as f64)
    }

    /// The current `N × N` Laplacian driving masking: the hypergraph
    /// Laplacian, `I − D^{-1/2} A D^{-1/2}` for graph paths, zero otherwise.
    pub fn laplacian(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let s = spatial_structure(&self.config, &mut g, &vars, self.n_features())?;
        Ok(s.laplacian)
    }
}

enum SpatialOp {
    Theta(Var),
    Adjacency(Var),
    Dense,
}

struct Spatial {
    op: SpatialOp,
    laplacian: Tensor,
}

fn adjacency_laplacian(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let d: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.at(i, j)).sum::<f64>()).collect();
    let mut l = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            l.data_mut()[i * n + j] -= a.at(i, j) / (d[i] * d[j]).sqrt();
        }
    }
    l
}

fn spatial_structure(cfg: &ModelConfig, g: &mut Graph, vars: &ModelVars, n: usize) -> Result<Spatial> {
    let missing = || Error::State("parameters do not match the configured graph path".into());
    match graph_path(cfg) {
        GraphPath::Hypergraph => {
            let mv = vars.mtcl.as_ref().ok_or_else(missing)?;
            let s = build_structure(g, mv, cfg.hypergraph.attention_source)?;
            Ok(Spatial {
                op: SpatialOp::Theta(s.theta),
                laplacian: g.value(s.laplacian).clone(),
            })
        }
        GraphPath::Identity => Ok(Spatial {
            op: SpatialOp::Theta(g.constant(Tensor::eye(n))),
            laplacian: Tensor::zeros(&[n, n]),
        }),
        GraphPath::Gsl => {
            let e = vars.gsl_embed.ok_or_else(missing)?;
            let c = residual_correlation(g, e)?;
            let nb = topk_select(g.value(c), cfg.gsl.k_for(n))?;
            let a = build_adjacency(g, c, &nb)?;
            let laplacian = adjacency_laplacian(g.value(a));
            Ok(Spatial {
                op: SpatialOp::Adjacency(a),
                laplacian,
            })
        }
        GraphPath::BinaryTopK => {
            let e = vars.gsl_embed.ok_or_else(missing)?;
            let e = g.constant(g.value(e).clone());
            let c = residual_correlation(g, e)?;
            let nb = topk_select(g.value(c), cfg.gsl.k_for(n))?;
            let a = binary_adjacency(&nb);
            let laplacian = adjacency_laplacian(&a);
            Ok(Spatial {
                op: SpatialOp::Adjacency(g.constant(a)),
                laplacian,
            })
        }
        GraphPath::Dense => Ok(Spatial {
            op: SpatialOp::Dense,
            laplacian: Tensor::zeros(&[n, n]),
        }),
    }
}

fn forward(
    cfg: &ModelConfig,
    g: &mut Graph,
    vars: &ModelVars,
    inputs: &Tensor,
    mode: Mode,
    bn: &mut [BnStats],
) -> Result<Var> {
    let (b, n, k) = match inputs.shape() {
        &[b, n, k] => (b, n, k),
        s => return Err(Error::dim("forward", format!("inputs {s:?} are not [B, N, K]"))),
    };
    if k != cfg.window {
        return Err(Error::Config(format!("window {k} does not match configured {}", cfg.window)));
    }
    let spatial = spatial_structure(cfg, g, vars, n)?;

    let mut x = inputs.clone();
    if let Mode::Train { stage, seed } = mode {
        if cfg.mask.enabled && stage != MaskStage::Off {
            let scores = importance_scores(&spatial.laplacian)?;
            let probs = mask_probabilities(&scores, cfg.mask.tau, cfg.mask.invert_importance)?;
            let weights = temporal_weights(cfg.mask.alpha_decay, k)?;
            let mask = sample_mask(&probs, &weights, cfg.mask.base_ratio, stage, b, seed)?;
            x = apply_mask(&x, &mask)?;
        }
    }

    let cs = cfg.temporal_width();
    let feats = if let (Some(proj), Some(layers)) = (&vars.input_proj, &vars.tcn) {
        let x = g.constant(x.reshaped(&[b, 1, n, k])?);
        let h0 = g.conv_time(x, proj.weight, Some(proj.bias), 1)?;
        let (_, skip) = tcn_forward(g, h0, &cfg.tcn, layers)?;
        let s = g.relu(skip)?;
        let s = g.crop_recent(s, 1)?;
        let s = g.reshape(s, &[b, cs, n])?;
        g.permute(s, &[0, 2, 1])?
    } else {
        let mut h = g.constant(x.reshaped(&[b * n, k])?);
        for l in &vars.temporal_mlp {
            h = l.apply(g, h)?;
            h = g.relu(h)?;
        }
        g.reshape(h, &[b, n, cs])?
    };

    let cg = cfg.gcn_channels;
    let spatial_out = match spatial.op {
        SpatialOp::Theta(theta) => {
            let w = vars.spatial_weight.ok_or_else(|| Error::State("missing spatial weight".into()))?;
            hypergraph_conv(g, feats, theta, w)?
        }
        SpatialOp::Adjacency(a) => {
            let w = vars.spatial_weight.ok_or_else(|| Error::State("missing spatial weight".into()))?;
            gcn_propagate(g, feats, a, w)?
        }
        SpatialOp::Dense => {
            let l = vars.dense_spatial.ok_or_else(|| Error::State("missing dense layer".into()))?;
            let flat = g.reshape(feats, &[b, n * cs])?;
            let y = l.apply(g, flat)?;
            g.reshape(y, &[b, n, cg])?
        }
    };

    let bn_mode = match mode {
        Mode::Train { .. } => BnMode::Train,
        Mode::Eval => BnMode::Eval,
    };
    if bn.len() != vars.head.len() {
        return Err(Error::State(format!("{} batch-norm states for {} head layers", bn.len(), vars.head.len())));
    }
    let mut h = g.reshape(spatial_out, &[b * n, cg])?;
    for (layer, stats) in vars.head.iter().zip(bn.iter_mut()) {
        h = layer.linear.apply(g, h)?;
        h = g.batch_norm(h, layer.gamma, layer.beta, stats, bn_mode)?;
        h = g.relu(h)?;
    }
    let y = vars.out.apply(g, h)?;
    g.reshape(y, &[b, n])
}
