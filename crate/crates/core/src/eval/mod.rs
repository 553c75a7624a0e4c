//! Held-out scoring and the probes used to inspect trained models.
//!
//! * [`estimate_predictive_ll`]: mean per-point log-likelihood over tasks.
//!   Latent models use the mixture estimator
//!   `log((1/K) Σ_k exp(Σ_t log p(y_t | z_k))) / n` with `z_k ~ q(z|C)`.
//! * [`probe_global_uncertainty`]: average latent mean and scale given only
//!   `ε` observed points.
//! * [`latent_manipulation_grid`]: predictive means while two latent
//!   coordinates sweep Gaussian percentiles.
//! * [`emit_prediction_bands`]: `μ ± 2σ` curves, one per latent sample.

mod quantile;


use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use quantile::normal_quantile;

use crate::autodiff::{Graph, NdArray};
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::models::{decode, encode, LatentMode, ModelParams};
use crate::parallel::map_ordered;
use crate::seed::{rng_for, Rng};
use crate::tasks::Task;

/// A mean over tasks with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    /// Sample mean and `s / √n` (zero for a single value).
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::contract("an estimate needs at least one value"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std_error, n })
    }
}

fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `log(mean(exp(v)))` with the maximum shifted out.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// `Σ_t log p(y_t | x_t, z_k)` for `n_z` samples `z_k ~ q(z|C)` drawn with
/// `rng` (latent models only).
pub fn latent_sample_log_likelihoods(params: &ModelParams, task: &Task, n_z: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !params.kind().is_latent() {
        return Err(Error::UnsupportedModel(params.kind().to_string()));
    }
    if n_z == 0 {
        return Err(Error::contract("a latent model needs n_z >= 1"));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let enc = encode(&mut g, params, &p, task, LatentMode::Prior)?;
    let prior = enc.prior.expect("latent model");
    let y = g.constant(NdArray::row(task.y_target.data().to_vec()));
    let mark = g.len();
    let mut totals = Vec::with_capacity(n_z);
    for _ in 0..n_z {
        let eps = NdArray::vector(standard_normal(rng, params.config.d_z));
        let z = prior.sample(&mut g, &eps)?;
        let (pred, _) = decode(&mut g, params, &p, &enc, Some(z))?;
        let lp = pred.log_prob(&mut g, y)?;
        totals.push(g.value(lp).sum());
        g.truncate(mark);
    }
    Ok(totals)
}

/// Per-point predictive log-likelihood of one task. Latent models draw
/// `n_z` samples from `q(z|C)` using `rng`.
pub fn task_log_likelihood(params: &ModelParams, task: &Task, n_z: usize, rng: &mut Rng) -> Result<f64> {
    let n = task.n_target() as f64;
    if params.kind().is_latent() {
        return Ok(log_mean_exp(&latent_sample_log_likelihoods(params, task, n_z, rng)?) / n);
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let enc = encode(&mut g, params, &p, task, LatentMode::Prior)?;
    let y = g.constant(NdArray::row(task.y_target.data().to_vec()));
    let (pred, _) = decode(&mut g, params, &p, &enc, None)?;
    let lp = pred.log_prob(&mut g, y)?;
    Ok(g.value(lp).sum() / n)
}

/// Mean per-point predictive log-likelihood over `tasks` with its standard
/// error across tasks. Task `i` draws its latent samples from stream `i` of
/// `seed`, so the result does not depend on `threads`.
pub fn estimate_predictive_ll(
    params: &ModelParams,
    tasks: &[Task],
    n_z: usize,
    seed: u64,
    threads: usize,
) -> Result<Estimate> {
    if params.kind().is_latent() && n_z == 0 {
        return Err(Error::contract("a latent model needs n_z >= 1"));
    }
    let per_task = map_ordered(tasks, threads, |i, task| {
        task_log_likelihood(params, task, n_z, &mut rng_for(seed, "eval-z", i as u64))
    });
    let values = per_task.into_iter().collect::<Result<Vec<f64>>>()?;
    Estimate::from_values(&values)
}

/// `q(z | context)` of a latent model, without running the decoder.
pub fn latent_prior(params: &ModelParams, task: &Task) -> Result<DiagGaussian> {
    if !params.kind().is_latent() {
        return Err(Error::UnsupportedModel(params.kind().to_string()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let enc = encode(&mut g, params, &p, task, LatentMode::Prior)?;
    let q = enc.prior.expect("latent model").value(&g)?;
    let d = q.dim();
    DiagGaussian::new(q.mu.reshape(vec![d])?, q.sigma.reshape(vec![d])?)
}

/// Averages of the latent parameters given `epsilon` observed points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub epsilon: usize,
    pub mu_z_mean: f64,
    pub sigma_z_mean: f64,
    pub mu_z_std_error: f64,
    pub sigma_z_std_error: f64,
    pub n_tasks: usize,
}

/// For every task, replaces the context by `epsilon` target points chosen
/// uniformly without replacement (stream `i` of `seed` for task `i`),
/// computes `q(z|C)` and averages `μ_z` and `σ_z` over latent dimensions,
/// then over tasks.
pub fn probe_global_uncertainty(
    params: &ModelParams,
    tasks: &[Task],
    epsilon: usize,
    seed: u64,
    threads: usize,
) -> Result<ProbeResult> {
    if !params.kind().is_latent() {
        return Err(Error::UnsupportedModel(params.kind().to_string()));
    }
    if epsilon == 0 {
        return Err(Error::contract("epsilon must be at least 1"));
    }
    let per_task = map_ordered(tasks, threads, |i, task| {
        if epsilon > task.n_target() {
            return Err(Error::contract(format!(
                "epsilon {epsilon} exceeds the {} target points of task {i}",
                task.n_target()
            )));
        }
        let mut rng = rng_for(seed, "probe", i as u64);
        let mut idx = sample(&mut rng, task.n_target(), epsilon).into_vec();
        idx.sort_unstable();
        let q = latent_prior(params, &task.with_context_indices(&idx)?)?;
        Ok((q.mu.mean(), q.sigma.mean()))
    });
    let pairs = per_task.into_iter().collect::<Result<Vec<_>>>()?;
    let (mus, sigmas): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let mu = Estimate::from_values(&mus)?;
    let sigma = Estimate::from_values(&sigmas)?;
    Ok(ProbeResult {
        epsilon,
        mu_z_mean: mu.mean,
        sigma_z_mean: sigma.mean,
        mu_z_std_error: mu.std_error,
        sigma_z_std_error: sigma.std_error,
        n_tasks: tasks.len(),
    })
}

/// One cell of a latent manipulation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationCell {
    pub dim_i: usize,
    pub dim_j: usize,
    pub step_i: usize,
    pub step_j: usize,
    pub z_value_i: f64,
    pub z_value_j: f64,
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Percentiles (in percent) visited by a sweep of `steps` points; a single
/// step sits at the midpoint.
pub fn sweep_percentiles(steps: usize, pct_lo: f64, pct_hi: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::contract("a sweep needs at least one step"));
    }
    if !(pct_lo > 0.0 && pct_lo <= pct_hi && pct_hi < 100.0) {
        return Err(Error::contract(format!(
            "percentiles [{pct_lo}, {pct_hi}] must satisfy 0 < lo <= hi < 100"
        )));
    }
    if steps == 1 {
        return Ok(vec![0.5 * (pct_lo + pct_hi)]);
    }
    Ok((0..steps)
        .map(|k| pct_lo + (pct_hi - pct_lo) * k as f64 / (steps - 1) as f64)
        .collect())
}

/// Sweeps latent coordinates `dims` over percentiles `pct_lo..pct_hi` of
/// `N(μ_z, (relax·σ_z)²)` in `steps × steps` cells, holding the other
/// coordinates at `μ_z`, and records the predictive curve of each cell.
/// Cells are ordered row-major in `(step_i, step_j)`.
pub fn latent_manipulation_grid(
    params: &ModelParams,
    task: &Task,
    dims: (usize, usize),
    steps: usize,
    pct_lo: f64,
    pct_hi: f64,
    relax: f64,
) -> Result<Vec<ManipulationCell>> {
    if !params.kind().is_latent() {
        return Err(Error::UnsupportedModel(params.kind().to_string()));
    }
    let d_z = params.config.d_z;
    let (di, dj) = dims;
    if di >= d_z || dj >= d_z || di == dj {
        return Err(Error::contract(format!(
            "manipulated dims ({di}, {dj}) must be distinct and below d_z = {d_z}"
        )));
    }
    if !(relax >= 0.0 && relax.is_finite()) {
        return Err(Error::contract(format!("relaxation {relax} must be finite and >= 0")));
    }
    let pcts = sweep_percentiles(steps, pct_lo, pct_hi)?;
    let quantiles = pcts.iter().map(|p| normal_quantile(p / 100.0)).collect::<Vec<_>>();

    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let enc = encode(&mut g, params, &p, task, LatentMode::Prior)?;
    let q = enc.prior.as_ref().expect("latent model").value(&g)?;
    let (mu, sigma) = (q.mu.data().to_vec(), q.sigma.data().to_vec());
    let value = |d: usize, k: usize| mu[d] + relax * sigma[d] * quantiles[k];
    let order = sorted_order(task);
    let x: Vec<f64> = order.iter().map(|&t| task.x_target.data()[t]).collect();
    let mark = g.len();
    let mut cells = Vec::with_capacity(steps * steps);
    for si in 0..steps {
        for sj in 0..steps {
            let mut z = mu.clone();
            z[di] = value(di, si);
            z[dj] = value(dj, sj);
            let zv = g.constant(NdArray::new(vec![d_z, 1], z)?);
            let (pred, _) = decode(&mut g, params, &p, &enc, Some(zv))?;
            let (m, s) = (g.value(pred.mu).data(), g.value(pred.sigma).data());
            cells.push(ManipulationCell {
                dim_i: di,
                dim_j: dj,
                step_i: si,
                step_j: sj,
                z_value_i: value(di, si),
                z_value_j: value(dj, sj),
                x: x.clone(),
                mu: order.iter().map(|&t| m[t]).collect(),
                sigma: order.iter().map(|&t| s[t]).collect(),
            });
            g.truncate(mark);
        }
    }
    Ok(cells)
}

/// Predictive mean and `σ` at the sorted target inputs for one latent draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub task_id: usize,
    pub z_index: usize,
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PredictionBand {
    /// `(μ − 2σ, μ + 2σ)` per point.
    pub fn interval(&self) -> Vec<(f64, f64)> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| (m - 2.0 * s, m + 2.0 * s))
            .collect()
    }
}

fn sorted_order(task: &Task) -> Vec<usize> {
    let x = task.x_target.data();
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    order
}

/// One band per latent sample `z ~ q(z|C)` (a single band for conditional
/// models), over the target inputs in increasing order.
pub fn emit_prediction_bands(
    params: &ModelParams,
    task: &Task,
    task_id: usize,
    n_z: usize,
    seed: u64,
) -> Result<Vec<PredictionBand>> {
    if n_z == 0 {
        return Err(Error::contract("n_z must be at least 1"));
    }
    let mut rng = rng_for(seed, "bands", task_id as u64);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let enc = encode(&mut g, params, &p, task, LatentMode::Prior)?;
    let order = sorted_order(task);
    let x: Vec<f64> = order.iter().map(|&t| task.x_target.data()[t]).collect();
    let draws = if enc.prior.is_some() { n_z } else { 1 };
    let mark = g.len();
    let mut bands = Vec::with_capacity(draws);
    for k in 0..draws {
        let z = match &enc.prior {
            Some(q) => Some(q.sample(&mut g, &NdArray::vector(standard_normal(&mut rng, params.config.d_z)))?),
            None => None,
        };
        let (pred, _) = decode(&mut g, params, &p, &enc, z)?;
        let (m, s) = (g.value(pred.mu).data(), g.value(pred.sigma).data());
        bands.push(PredictionBand {
            task_id,
            z_index: k,
            x: x.clone(),
            mu: order.iter().map(|&t| m[t]).collect(),
            sigma: order.iter().map(|&t| s[t]).collect(),
        });
        g.truncate(mark);
    }
    Ok(bands)
}
