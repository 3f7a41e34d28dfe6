//! Binary checkpoint: magic, version, JSON header, little-endian f64 blobs.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::dataio::NormalizationState;
use crate::error::{Error, Result};
use crate::numerics::{BnStats, Tensor};
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    n_features: usize,
    feature_names: Vec<String>,
    normalization: Option<NormalizationState>,
    epoch: usize,
    loss_history: Vec<f64>,
    tensors: Vec<Entry>,
}

/// A trained model with the normalization fitted on its training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalization: Option<NormalizationState>,
}

fn buffers(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, s) in model.bn.iter().enumerate() {
        out.push((format!("head{i}.running_mean"), Tensor::vector(s.running_mean.clone())));
        out.push((format!("head{i}.running_var"), Tensor::vector(s.running_var.clone())));
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut tensors: Vec<(String, Tensor)> = m
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        tensors.extend(buffers(m));
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            config: m.config.clone(),
            n_features: m.n_features(),
            feature_names: m.feature_names.clone(),
            normalization: self.normalization.clone(),
            epoch: m.epoch,
            loss_history: m.loss_history.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let blob = &body[hlen..];
        if blob.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if header.feature_names.len() != header.n_features {
            return Err(bad("feature name count does not match n_features"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(header.config.seed);
        let mut params = ModelParams::init(&header.config, header.n_features, &mut rng)?;
        let mut model_bn: Vec<BnStats> = header.config.mlp_hidden.iter().map(|&h| BnStats::new(h)).collect();

        let expected: Vec<(String, Vec<usize>)> = {
            let mut v: Vec<(String, Vec<usize>)> = params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect();
            for (i, &h) in header.config.mlp_hidden.iter().enumerate() {
                v.push((format!("head{i}.running_mean"), vec![h]));
                v.push((format!("head{i}.running_var"), vec![h]));
            }
            v
        };
        if expected.len() != header.tensors.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, configuration needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), e) in expected.iter().zip(&header.tensors) {
            if &e.name != name || &e.shape != shape {
                return Err(bad(format!("expected {name} {shape:?}, found {} {:?}", e.name, e.shape)));
            }
            let len: usize = shape.iter().product();
            let data = values
                .get(e.offset..e.offset + len)
                .ok_or_else(|| bad(format!("{name} runs past the end of the data")))?;
            loaded.push(Tensor::new(shape.clone(), data.to_vec())?);
        }
        let mut it = loaded.into_iter();
        for p in params.tensors_mut() {
            *p = it.next().expect("counted above");
        }
        for s in &mut model_bn {
            s.running_mean = it.next().expect("counted above").into_data();
            s.running_var = it.next().expect("counted above").into_data();
        }
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                feature_names: header.feature_names,
                params,
                bn: model_bn,
                epoch: header.epoch,
                loss_history: header.loss_history,
            },
            normalization: header.normalization,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
