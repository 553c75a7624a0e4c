use super::{Bound, ModelKind, ModelParams};
use crate::autodiff::{Graph, NdArray, Var};
use crate::distributions::{DiagGaussian, GaussianVars};
use crate::error::{Error, Result};
use crate::setconv::{build_grid, decode_from_grid_var, encode_to_grid_var, Grid};
use crate::tasks::Task;

/// Which latent distribution `z` is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// `q(z | context)`; the only option at prediction time.
    Prior,
    /// `q(z | targets)`, used by the ELBO. Both distributions are built.
    Posterior,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Predictive Gaussian over the targets, `[1, n]`.
    pub predictive: GaussianVars,
    /// `q(z | context)`, `[d_z, 1]`; latent models only.
    pub prior: Option<GaussianVars>,
    /// `q(z | targets)`; latent models in [`LatentMode::Posterior`] only.
    pub posterior: Option<GaussianVars>,
    /// The `[2 + d_z, s]` input of the merger MLP (GBCoNP only).
    pub merger_input: Option<Var>,
}

#[derive(Clone, Debug)]
enum Representation {
    /// Aggregated MLP representation `[r_dim, 1]`.
    Vector(Var),
    /// Context features on the task grid, `[2, s]`.
    Grid { grid: Grid, features: Var },
}

/// Everything a forward pass computes before `z` is chosen. Decoding the
/// same encoding with several latent samples shares this work.
#[derive(Clone, Debug)]
pub struct Encoding {
    repr: Representation,
    pub prior: Option<GaussianVars>,
    pub posterior: Option<GaussianVars>,
    x_target: Var,
}

impl Encoding {
    /// The distribution `z` is drawn from under `mode`.
    pub fn latent(&self, mode: LatentMode) -> Option<&GaussianVars> {
        match mode {
            LatentMode::Prior => self.prior.as_ref(),
            LatentMode::Posterior => self.posterior.as_ref().or(self.prior.as_ref()),
        }
    }
}

/// Grid covering a task's context and target inputs with the configured
/// margin and resolution.
pub fn task_grid(params: &ModelParams, task: &Task) -> Result<Grid> {
    let (lo, hi) = task.x_extent();
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    build_grid(lo, hi, params.config.points_per_unit, params.config.margin)
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(w, x)?;
    Ok(g.add(y, b)?)
}

/// Applies `prefix.0 ..` to the columns of `x`. With `linear_output` the
/// last layer has no ReLU.
fn mlp(g: &mut Graph, p: &Bound, prefix: &str, layers: usize, x: Var, linear_output: bool) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("{prefix}.{i}"), h)?;
        if !(linear_output && i + 1 == layers) {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Pointwise trunk, linear mean/raw-scale heads, then the mean over columns.
fn latent_gaussian(g: &mut Graph, params: &ModelParams, p: &Bound, input: Var) -> Result<GaussianVars> {
    let h = mlp(g, p, "latent", params.config.mlp.widths.len(), input, false)?;
    let mu = linear(g, p, "latent.mu", h)?;
    let raw = linear(g, p, "latent.sigma", h)?;
    let mu = g.mean_axis(mu, 1)?;
    let raw = g.mean_axis(raw, 1)?;
    GaussianVars::from_raw_with_floor(g, mu, raw, params.config.sigma_floor)
}

fn predictive_heads(g: &mut Graph, params: &ModelParams, p: &Bound, h: Var) -> Result<GaussianVars> {
    let mu = linear(g, p, "head.mu", h)?;
    let raw = linear(g, p, "head.sigma", h)?;
    GaussianVars::from_raw_with_floor(g, mu, raw, params.config.sigma_floor)
}

fn stack_rows(g: &mut Graph, x: &NdArray, y: &NdArray) -> Var {
    let mut data = x.data().to_vec();
    data.extend_from_slice(y.data());
    g.constant(NdArray::new(vec![2, x.len()], data).expect("paired rows"))
}

/// Runs every part of the model that does not depend on `z`.
pub fn encode(g: &mut Graph, params: &ModelParams, p: &Bound, task: &Task, mode: LatentMode) -> Result<Encoding> {
    let kind = params.kind();
    let layers = params.config.mlp.widths.len();
    let x_target = g.constant(NdArray::row(task.x_target.data().to_vec()));
    let want_posterior = kind.is_latent() && mode == LatentMode::Posterior;
    match kind {
        ModelKind::Cnp | ModelKind::Np => {
            if task.n_context() == 0 {
                return Err(Error::contract(format!("{kind} needs at least one context point")));
            }
            let pairs = stack_rows(g, &task.x_context, &task.y_context);
            let h = mlp(g, p, "encoder", layers + 1, pairs, true)?;
            let r = g.mean_axis(h, 1)?;
            let (prior, posterior) = if kind == ModelKind::Np {
                let prior = latent_gaussian(g, params, p, pairs)?;
                let posterior = if want_posterior {
                    let targets = stack_rows(g, &task.x_target, &task.y_target);
                    Some(latent_gaussian(g, params, p, targets)?)
                } else {
                    None
                };
                (Some(prior), posterior)
            } else {
                (None, None)
            };
            Ok(Encoding {
                repr: Representation::Vector(r),
                prior,
                posterior,
                x_target,
            })
        }
        ModelKind::ConvCnp | ModelKind::GbConp => {
            let grid = task_grid(params, task)?;
            let ls = p.get("setconv.encoder.log_ls")?;
            let yc = g.constant(NdArray::row(task.y_context.data().to_vec()));
            let features = encode_to_grid_var(g, task.x_context.data(), yc, &grid, ls)?;
            let (prior, posterior) = if kind == ModelKind::GbConp {
                let prior = latent_gaussian(g, params, p, features)?;
                let posterior = if want_posterior {
                    let yt = g.constant(NdArray::row(task.y_target.data().to_vec()));
                    let target_features = encode_to_grid_var(g, task.x_target.data(), yt, &grid, ls)?;
                    Some(latent_gaussian(g, params, p, target_features)?)
                } else {
                    None
                };
                (Some(prior), posterior)
            } else {
                (None, None)
            };
            Ok(Encoding {
                repr: Representation::Grid { grid, features },
                prior,
                posterior,
                x_target,
            })
        }
    }
}

/// Decodes an encoding with latent sample `z` (`[d_z, 1]`, ignored by
/// conditional models). Returns the predictive Gaussian and, for GBCoNP,
/// the merger-MLP input.
pub fn decode(
    g: &mut Graph,
    params: &ModelParams,
    p: &Bound,
    enc: &Encoding,
    z: Option<Var>,
) -> Result<(GaussianVars, Option<Var>)> {
    let kind = params.kind();
    let cfg = &params.config;
    let z = match (kind.is_latent(), z) {
        (true, Some(z)) => Some(z),
        (true, None) => return Err(Error::contract(format!("{kind} decoding needs a latent sample"))),
        (false, _) => None,
    };
    let n = g.shape(enc.x_target)[1];
    match &enc.repr {
        Representation::Vector(r) => {
            let mut parts = vec![enc.x_target, g.broadcast(*r, &[cfg.r_dim, n])?];
            if let Some(z) = z {
                parts.push(g.broadcast(z, &[cfg.d_z, n])?);
            }
            let input = g.concat(&parts, 0)?;
            let h = mlp(g, p, "decoder", cfg.mlp.widths.len(), input, false)?;
            Ok((predictive_heads(g, params, p, h)?, None))
        }
        Representation::Grid { grid, features } => {
            let s = grid.len();
            let (mut h, merger_input) = match z {
                Some(z) => {
                    let zs = g.broadcast(z, &[cfg.d_z, s])?;
                    let input = g.concat(&[*features, zs], 0)?;
                    (mlp(g, p, "merger", cfg.mlp.widths.len() + 1, input, true)?, Some(input))
                }
                None => (*features, None),
            };
            for i in 0..cfg.conv.depth {
                let k = p.get(&format!("conv.{i}.k"))?;
                let b = p.get(&format!("conv.{i}.b"))?;
                h = g.conv1d(h, k, b)?;
                if i + 1 < cfg.conv.depth {
                    h = g.relu(h)?;
                }
            }
            let ls = p.get("setconv.decoder.log_ls")?;
            let xt = g.value(enc.x_target).data().to_vec();
            let at_targets = decode_from_grid_var(g, h, grid, &xt, ls)?;
            Ok((predictive_heads(g, params, p, at_targets)?, merger_input))
        }
    }
}

/// Complete forward pass with one latent sample `z = μ + σ·noise` (noise
/// defaults to zero, i.e. the latent mean).
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    p: &Bound,
    task: &Task,
    noise: Option<&NdArray>,
    mode: LatentMode,
) -> Result<ForwardVars> {
    let enc = encode(g, params, p, task, mode)?;
    let z = match enc.latent(mode) {
        Some(q) => {
            let d_z = params.config.d_z;
            let zeros;
            let noise = match noise {
                Some(n) => n,
                None => {
                    zeros = NdArray::zeros(&[d_z]);
                    &zeros
                }
            };
            Some(q.sample(g, noise)?)
        }
        None => None,
    };
    let (predictive, merger_input) = decode(g, params, p, &enc, z)?;
    Ok(ForwardVars {
        predictive,
        prior: enc.prior,
        posterior: enc.posterior,
        merger_input,
    })
}

/// Plain-array result of a forward pass. Predictive parameters are `[n]`,
/// latent parameters `[d_z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub predictive: DiagGaussian,
    pub prior: Option<DiagGaussian>,
    pub posterior: Option<DiagGaussian>,
}

fn flat(d: DiagGaussian) -> Result<DiagGaussian> {
    let n = d.mu.len();
    DiagGaussian::new(d.mu.reshape(vec![n])?, d.sigma.reshape(vec![n])?)
}

/// Evaluates the model with frozen parameters.
pub fn predict(params: &ModelParams, task: &Task, noise: Option<&NdArray>, mode: LatentMode) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = forward_graph(&mut g, params, &p, task, noise, mode)?;
    let read = |q: Option<GaussianVars>| q.map(|q| q.value(&g).and_then(flat)).transpose();
    Ok(Prediction {
        predictive: flat(out.predictive.value(&g)?)?,
        prior: read(out.prior)?,
        posterior: read(out.posterior)?,
    })
}

fn expect_kind(params: &ModelParams, kind: ModelKind) -> Result<()> {
    if params.kind() == kind {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "expected a {kind} model, got {}",
            params.kind()
        )))
    }
}

fn mode_for(use_target_posterior: bool) -> LatentMode {
    if use_target_posterior {
        LatentMode::Posterior
    } else {
        LatentMode::Prior
    }
}

pub fn cnp_forward(params: &ModelParams, task: &Task) -> Result<DiagGaussian> {
    expect_kind(params, ModelKind::Cnp)?;
    Ok(predict(params, task, None, LatentMode::Prior)?.predictive)
}

pub fn np_forward(
    params: &ModelParams,
    task: &Task,
    noise: &NdArray,
    use_target_posterior: bool,
) -> Result<Prediction> {
    expect_kind(params, ModelKind::Np)?;
    predict(params, task, Some(noise), mode_for(use_target_posterior))
}

pub fn convcnp_forward(params: &ModelParams, task: &Task) -> Result<DiagGaussian> {
    expect_kind(params, ModelKind::ConvCnp)?;
    Ok(predict(params, task, None, LatentMode::Prior)?.predictive)
}

pub fn gbconp_forward(
    params: &ModelParams,
    task: &Task,
    noise: &NdArray,
    use_target_posterior: bool,
) -> Result<Prediction> {
    expect_kind(params, ModelKind::GbConp)?;
    predict(params, task, Some(noise), mode_for(use_target_posterior))
}

/// `q(z | features)` of a GBCoNP from `[2, s]` grid features.
pub fn latent_from_grid(params: &ModelParams, features: &NdArray) -> Result<DiagGaussian> {
    expect_kind(params, ModelKind::GbConp)?;
    if features.ndim() != 2 || features.shape()[0] != 2 {
        return Err(Error::contract(format!(
            "latent path reads [2, s] grid features, got {:?}",
            features.shape()
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(features.clone());
    let q = latent_gaussian(&mut g, params, &p, f)?;
    flat(q.value(&g)?)
}
