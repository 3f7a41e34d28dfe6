use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, Model};
use crate::dataio::Windows;
use crate::error::{Error, Result};
use crate::masking::{stage_for_epoch, MaskStage};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 0-based epoch just completed.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub stage: MaskStage,
}

/// `mean((ŷ − y)²)`
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

fn mix(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Runs the remaining epochs up to `config.epochs` with momentum SGD on the
/// MSE loss. `on_epoch` sees the model after every epoch.
pub fn train<F>(model: &mut Model, windows: &Windows, mut on_epoch: F) -> Result<()>
where
    F: FnMut(&Model, &EpochReport) -> Result<()>,
{
    let cfg = model.config.clone();
    let n = model.n_features();
    if windows.n_features() != n || windows.window() != cfg.window {
        return Err(Error::Data(format!(
            "windows are {} features x {} steps, model expects {n} x {}",
            windows.n_features(),
            windows.window(),
            cfg.window
        )));
    }
    if cfg.epochs > model.epoch && windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let boundaries = cfg.mask.boundaries_for(cfg.epochs);
    let mut velocity: Vec<Vec<f64>> = model
        .params
        .named()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();

    for epoch in model.epoch..cfg.epochs {
        let stage = stage_for_epoch(Some(epoch), &boundaries);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch, usize::MAX)));
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() * n < 2 {
                continue;
            }
            let batch = windows.batch(chunk);
            let b = batch.len();
            let x = Tensor::new(vec![b, n, cfg.window], batch.inputs)?;
            let y = Tensor::new(vec![b, n], batch.targets)?;

            let mut g = Graph::new();
            let leaves: Vec<Var> = model
                .params
                .named()
                .into_iter()
                .map(|(_, t)| g.leaf(t.clone(), true))
                .collect();
            let vars = model.params.bind(&mut leaves.iter().copied());
            let mode = Mode::Train {
                stage,
                seed: mix(cfg.seed, epoch, bi),
            };
            let step = (|| -> Result<f64> {
                let pred = model.forward(&mut g, &vars, &x, mode)?;
                let target = g.constant(y);
                let loss = mse_loss(&mut g, pred, target)?;
                let value = g.value(loss).data()[0];
                g.backward(loss)?;
                Ok(value)
            })()
            .map_err(|e| diverged(epoch, e))?;

            let mut grads: Vec<Tensor> = leaves.iter().map(|&v| g.grad_or_zeros(v)).collect();
            if let Some(clip) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|t| t.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let f = clip / norm;
                    for t in &mut grads {
                        t.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            for ((p, v), gr) in model.params.tensors_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(gr.data()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.lr * *vi;
                }
            }
            if !model.params.named().iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "parameters became non-finite".into(),
                });
            }
            total += step;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("every batch has fewer than 2 rows".into()));
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("epoch loss {loss}"),
            });
        }
        model.epoch = epoch + 1;
        model.loss_history.push(loss);
        on_epoch(model, &EpochReport { epoch, loss, stage })?;
    }
    Ok(())
}
