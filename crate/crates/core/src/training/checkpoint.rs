use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use super::{Adam, TrainConfig};
use crate::autodiff::NdArray;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// Model parameters plus the state needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    /// Validation log-likelihood after `epoch`.
    pub val_ll: Option<f64>,
}

impl Checkpoint {
    /// A checkpoint holding only parameters.
    pub fn from_params(params: ModelParams) -> Self {
        Self {
            params,
            train_config: None,
            optimizer: None,
            epoch: 0,
            val_ll: None,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta_err = |e: serde_json::Error| Error::Checkpoint(format!("metadata: {e}"));
        let optimizer = self.optimizer.as_ref().map(|a| {
            json!({
                "learning_rate": a.learning_rate,
                "beta1": a.beta1,
                "beta2": a.beta2,
                "eps": a.eps,
                "step": a.step,
            })
        });
        let metadata = json!({
            "content": "checkpoint",
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model": serde_json::to_value(&self.params.config).map_err(meta_err)?,
            "train": self.train_config.as_ref().map(serde_json::to_value).transpose().map_err(meta_err)?,
            "optimizer": optimizer,
            "epoch": self.epoch,
            "val_ll": self.val_ll,
        });
        let mut arrays: Vec<(String, NdArray)> = self
            .params
            .arrays()
            .iter()
            .map(|(n, a)| (format!("param/{n}"), a.clone()))
            .collect();
        if let Some(a) = &self.optimizer {
            arrays.extend(
                a.first_moments()
                    .iter()
                    .map(|(n, m)| (format!("adam.m/{n}"), m.clone())),
            );
            arrays.extend(
                a.second_moments()
                    .iter()
                    .map(|(n, v)| (format!("adam.v/{n}"), v.clone())),
            );
        }
        Ok(Container { metadata, arrays })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let meta = &c.metadata;
        if meta.get("content").and_then(Value::as_str) != Some("checkpoint") {
            return Err(bad("container does not hold a checkpoint".into()));
        }
        match meta.get("format_version").and_then(Value::as_u64) {
            Some(CHECKPOINT_FORMAT_VERSION) => {}
            v => return Err(bad(format!("unsupported checkpoint format version {v:?}"))),
        }
        let field = |key: &str| meta.get(key).cloned().unwrap_or(Value::Null);
        let config: ModelConfig =
            serde_json::from_value(field("model")).map_err(|e| bad(format!("model config: {e}")))?;
        let train_config: Option<TrainConfig> =
            serde_json::from_value(field("train")).map_err(|e| bad(format!("train config: {e}")))?;
        let epoch = field("epoch").as_u64().ok_or_else(|| bad("missing epoch".into()))? as usize;
        let val_ll = field("val_ll").as_f64();

        let mut groups: [BTreeMap<String, NdArray>; 3] = Default::default();
        for (name, a) in c.arrays {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| bad(format!("array name `{name}`")))?;
            let slot = match prefix {
                "param" => 0,
                "adam.m" => 1,
                "adam.v" => 2,
                _ => return Err(bad(format!("unexpected array `{name}`"))),
            };
            if groups[slot].insert(rest.to_string(), a).is_some() {
                return Err(bad(format!("duplicate array `{name}`")));
            }
        }
        let [p, m, v] = groups;
        let params = ModelParams::from_arrays(config, p)?;
        let optimizer = match field("optimizer") {
            Value::Null => {
                if !m.is_empty() || !v.is_empty() {
                    return Err(bad("optimizer moments without optimizer settings".into()));
                }
                None
            }
            o => {
                let num = |k: &str| {
                    o.get(k)
                        .and_then(Value::as_f64)
                        .ok_or_else(|| bad(format!("optimizer.{k}")))
                };
                let same_layout = |x: &BTreeMap<String, NdArray>| {
                    x.len() == params.arrays().len()
                        && x.iter()
                            .all(|(n, a)| params.get(n).is_some_and(|p| p.shape() == a.shape()))
                };
                if !same_layout(&m) || !same_layout(&v) {
                    return Err(bad("optimizer moments do not match the parameters".into()));
                }
                Some(Adam {
                    learning_rate: num("learning_rate")?,
                    beta1: num("beta1")?,
                    beta2: num("beta2")?,
                    eps: num("eps")?,
                    step: o
                        .get("step")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| bad("optimizer.step".into()))?,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            params,
            train_config,
            optimizer,
            epoch,
            val_ll,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }
}

pub fn persist_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint.to_container()?.write(path.as_ref())
}

pub fn restore_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::read(path.as_ref())?)
}
