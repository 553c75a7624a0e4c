//! Losses, the Adam loop and checkpoints.
//!
//! Conditional models minimize the mean per-point negative log-likelihood;
//! latent models minimize `KL(q(z|T) || q(z|C)) − recon`, where `recon` is
//! the mean per-point log-likelihood under `z ~ q(z|T)`.
//!
//! Every epoch streams fresh tasks: task `i` of epoch `e` comes from stream
//! `e·tasks_per_epoch + i` of the `"train"` label, and its latent noise from
//! the same index of `"train-z"`. Batch gradients are computed on worker
//! threads and reduced in task order, so a run is reproducible for any
//! thread count.

mod adam;
mod checkpoint;
mod loss;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use adam::Adam;
pub use checkpoint::{persist_checkpoint, restore_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use loss::{
    conditional_nll_graph, conditional_nll_loss, elbo_graph, elbo_loss, loss_graph, task_gradient, LossTerms, LossVars,
    TaskGradient,
};

use crate::autodiff::NdArray;
use crate::error::{Error, Result};
use crate::eval::estimate_predictive_ll;
use crate::models::{ModelConfig, ModelKind, ModelParams};
use crate::parallel::map_ordered;
use crate::seed::{derive_seed, rng_for};
use crate::tasks::{load_series_csv, sample_tasks, KernelSpec, Task, TaskShape, TaskSource};

/// Where training tasks come from: a GP kernel or a CSV series.
///
/// Written as `rbf`, `periodic`, `matern32` or `csv:<path>`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Kernel(KernelSpec),
    Csv(PathBuf),
}

impl DataSpec {
    pub fn source(&self) -> Result<TaskSource> {
        Ok(match self {
            DataSpec::Kernel(k) => TaskSource::Kernel(*k),
            DataSpec::Csv(path) => TaskSource::Series(load_series_csv(path)?),
        })
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Kernel(k) => write!(f, "{k}"),
            DataSpec::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl FromStr for DataSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.strip_prefix("csv:") {
            Some("") => Err("`csv:` needs a path".into()),
            Some(path) => Ok(DataSpec::Csv(path.into())),
            None => s.parse().map(DataSpec::Kernel),
        }
    }
}

impl Serialize for DataSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DataSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataSpec,
    pub task_shape: TaskShape,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Latent samples per task in the ELBO.
    pub n_z_train: usize,
    /// Latent samples per task for the validation log-likelihood.
    pub n_z_val: usize,
    pub val_tasks: usize,
    pub seed: u64,
    /// Worker threads for batch gradients and validation. Does not affect
    /// results, so it is not recorded in checkpoints.
    #[serde(skip, default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    /// Desk-scale defaults: 20 epochs of 2,000 fresh tasks.
    pub fn new(kind: ModelKind, data: DataSpec) -> Self {
        Self {
            model: ModelConfig::new(kind),
            data,
            task_shape: TaskShape::default(),
            epochs: 20,
            tasks_per_epoch: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            n_z_train: 1,
            n_z_val: 16,
            val_tasks: 100,
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.tasks_per_epoch == 0 || self.batch_size == 0 {
            return bad("train.tasks_per_epoch and train.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.learning_rate) {
            return bad(format!("train.learning_rate {} outside [0, 1)", self.learning_rate));
        }
        if self.n_z_train == 0 || self.n_z_val == 0 {
            return bad("latent sample counts must be at least 1".into());
        }
        if self.val_tasks == 0 {
            return bad("train.val_tasks must be at least 1".into());
        }
        let s = &self.task_shape;
        if s.n_points < 2 || s.min_context == 0 || s.min_context > s.max_context {
            return bad(format!(
                "task shape needs n_points >= 2 and 1 <= min_context <= max_context, got {s:?}"
            ));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }

    fn batches_per_epoch(&self) -> usize {
        self.tasks_per_epoch.div_ceil(self.batch_size)
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ll: f64,
    /// Mean KL term over the epoch's tasks (zero for conditional models).
    pub kl_mean: f64,
    pub wall_seconds: f64,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last epoch.
    pub last: Checkpoint,
    /// State after the epoch with the highest validation log-likelihood.
    pub best: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// The fixed validation tasks of a run.
pub fn validation_tasks(config: &TrainConfig, source: &TaskSource) -> Result<Vec<Task>> {
    sample_tasks(source, &config.task_shape, config.seed, "valid", config.val_tasks)
}

fn train_noise(config: &TrainConfig, index: u64) -> NdArray {
    let d_z = config.model.d_z;
    let n = if config.model.kind.is_latent() {
        config.n_z_train
    } else {
        1
    };
    let mut rng = rng_for(config.seed, "train-z", index);
    let data = (0..n * d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
    NdArray::new(vec![n, d_z], data).expect("noise shape")
}

fn batch_mean(grads: &mut BTreeMap<String, NdArray>, add: &BTreeMap<String, NdArray>) {
    for (name, g) in grads.iter_mut() {
        for (a, b) in g.data_mut().iter_mut().zip(add[name].data()) {
            *a += b;
        }
    }
}

/// [`train_with`] without an observer.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, |_, _| Ok(()))
}

/// Runs the configured number of epochs, calling `observer` after each one
/// with its metrics and the current state (e.g. to persist both, so the last
/// good checkpoint survives a later failure).
pub fn train_with<F>(config: &TrainConfig, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
{
    config.validate()?;
    let source = config.data.source()?;
    let val = validation_tasks(config, &source)?;
    let mut params = ModelParams::init(&config.model, config.seed)?;
    let mut adam = Adam::new(&params, config.learning_rate);
    let val_seed = derive_seed(config.seed, "valid-z", 0);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut kl_sum) = (0.0, 0.0);
        for batch in 0..config.batches_per_epoch() {
            let lo = batch * config.batch_size;
            let hi = (lo + config.batch_size).min(config.tasks_per_epoch);
            let indices: Vec<u64> = (lo..hi).map(|i| (epoch * config.tasks_per_epoch + i) as u64).collect();
            let results = map_ordered(&indices, config.threads, |_, &idx| {
                let task = source.sample_task(&config.task_shape, &mut rng_for(config.seed, "train", idx))?;
                task_gradient(&params, &task, &train_noise(config, idx))
            });
            let non_finite = || Error::NonFiniteLoss { epoch, batch };
            let mut total: Option<BTreeMap<String, NdArray>> = None;
            for r in results {
                let tg = match r {
                    Ok(tg) => tg,
                    Err(Error::Autograd(crate::autodiff::AutogradError::NonFinite { .. })) => return Err(non_finite()),
                    Err(e) => return Err(e),
                };
                if !tg.terms.loss.is_finite() {
                    return Err(non_finite());
                }
                loss_sum += tg.terms.loss;
                kl_sum += tg.terms.kl;
                match total.as_mut() {
                    None => total = Some(tg.grads),
                    Some(t) => batch_mean(t, &tg.grads),
                }
            }
            let mut grads = total.expect("non-empty batch");
            let scale = 1.0 / (hi - lo) as f64;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut params, &grads)?;
        }
        let val_ll = estimate_predictive_ll(&params, &val, config.n_z_val, val_seed, config.threads)?.mean;
        let n = config.tasks_per_epoch as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            val_ll,
            kl_mean: kl_sum / n,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} train_loss {:.4} val_ll {:.4} kl {:.4} ({:.1}s)",
            m.epoch,
            m.train_loss,
            m.val_ll,
            m.kl_mean,
            m.wall_seconds
        );
        let ckpt = Checkpoint {
            params: params.clone(),
            train_config: Some(config.clone()),
            optimizer: Some(adam.clone()),
            epoch: epoch + 1,
            val_ll: Some(val_ll),
        };
        observer(&m, &ckpt)?;
        metrics.push(m);
        if best.as_ref().is_none_or(|b| b.val_ll.is_some_and(|v| val_ll > v)) {
            best = Some(ckpt);
        }
    }
    let last = Checkpoint {
        params,
        train_config: Some(config.clone()),
        optimizer: Some(adam),
        epoch: config.epochs,
        val_ll: metrics.last().map(|m| m.val_ll),
    };
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last,
        metrics,
    })
}
