use std::collections::BTreeMap;

use crate::autodiff::{AutogradError, Graph, NdArray, Var};
use crate::distributions::kl_divergence_var;
use crate::error::{Error, Result};
use crate::models::{decode, encode, Bound, LatentMode, ModelKind, ModelParams};
use crate::tasks::Task;

/// Graph handles of one task's training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// The minimized scalar.
    pub loss: Var,
    /// Mean per-target-point log-likelihood (averaged over latent samples).
    pub recon: Var,
    /// `KL(q(z|targets) || q(z|context))`; latent models only.
    pub kl: Option<Var>,
}

/// Plain values of [`LossVars`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

fn target_row(g: &mut Graph, task: &Task) -> Var {
    g.constant(NdArray::row(task.y_target.data().to_vec()))
}

/// Negative mean per-point log-likelihood of the targets (CNP, ConvCNP).
pub fn conditional_nll_graph(g: &mut Graph, params: &ModelParams, p: &Bound, task: &Task) -> Result<LossVars> {
    if params.kind().is_latent() {
        return Err(Error::contract(format!("{} is trained on the ELBO", params.kind())));
    }
    let enc = encode(g, params, p, task, LatentMode::Prior)?;
    let (pred, _) = decode(g, params, p, &enc, None)?;
    let y = target_row(g, task);
    let lp = pred.log_prob(g, y)?;
    let recon = g.mean(lp)?;
    let loss = g.neg(recon)?;
    Ok(LossVars { loss, recon, kl: None })
}

/// Negative ELBO per target point (NP, GBCoNP): `KL / n − recon`, where
/// `recon` averages the mean per-point log-likelihood over one latent sample
/// per row of `noise` (`[n_z, d_z]`) drawn from the target posterior, and `n`
/// is the number of targets. The reported `kl` is the undivided divergence.
pub fn elbo_graph(g: &mut Graph, params: &ModelParams, p: &Bound, task: &Task, noise: &NdArray) -> Result<LossVars> {
    if !params.kind().is_latent() {
        return Err(Error::UnsupportedModel(params.kind().to_string()));
    }
    let d_z = params.config.d_z;
    if noise.ndim() != 2 || noise.shape()[1] != d_z || noise.shape()[0] == 0 {
        return Err(Error::contract(format!(
            "ELBO noise has shape {:?}, expected [n_z >= 1, {d_z}]",
            noise.shape()
        )));
    }
    let enc = encode(g, params, p, task, LatentMode::Posterior)?;
    let posterior = enc.posterior.expect("posterior mode");
    let prior = enc.prior.expect("latent model");
    let y = target_row(g, task);
    let mut terms = Vec::with_capacity(noise.shape()[0]);
    for row in noise.data().chunks(d_z) {
        let z = posterior.sample(g, &NdArray::vector(row.to_vec()))?;
        let (pred, _) = decode(g, params, p, &enc, Some(z))?;
        let lp = pred.log_prob(g, y)?;
        terms.push(g.mean(lp)?);
    }
    let stacked = g.concat(&terms, 0)?;
    let recon = g.mean(stacked)?;
    let kl = kl_divergence_var(g, &posterior, &prior)?;
    let kl_per_point = g.scale(kl, 1.0 / task.n_target() as f64)?;
    let loss = g.sub(kl_per_point, recon)?;
    Ok(LossVars {
        loss,
        recon,
        kl: Some(kl),
    })
}

/// The training objective of whichever model `params` holds; `noise` is
/// ignored by conditional models.
pub fn loss_graph(g: &mut Graph, params: &ModelParams, p: &Bound, task: &Task, noise: &NdArray) -> Result<LossVars> {
    match params.kind() {
        ModelKind::Cnp | ModelKind::ConvCnp => conditional_nll_graph(g, params, p, task),
        ModelKind::Np | ModelKind::GbConp => elbo_graph(g, params, p, task, noise),
    }
}

fn terms(g: &Graph, v: &LossVars) -> LossTerms {
    LossTerms {
        loss: g.value(v.loss).item(),
        recon: g.value(v.recon).item(),
        kl: v.kl.map_or(0.0, |k| g.value(k).item()),
    }
}

/// Mean over targets of the negative log predictive density.
pub fn conditional_nll_loss(params: &ModelParams, task: &Task) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let v = conditional_nll_graph(&mut g, params, &p, task)?;
    Ok(g.value(v.loss).item())
}

/// Negative ELBO and its two terms for latent samples `noise` (`[n_z, d_z]`).
pub fn elbo_loss(params: &ModelParams, task: &Task, noise: &NdArray) -> Result<LossTerms> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let v = elbo_graph(&mut g, params, &p, task, noise)?;
    Ok(terms(&g, &v))
}

/// Loss terms and parameter gradients of one task.
#[derive(Clone, Debug)]
pub struct TaskGradient {
    pub terms: LossTerms,
    pub grads: BTreeMap<String, NdArray>,
}

pub fn task_gradient(params: &ModelParams, task: &Task, noise: &NdArray) -> Result<TaskGradient> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let v = loss_graph(&mut g, params, &p, task, noise)?;
    let back = g.backward(v.loss)?;
    let grads = p
        .vars()
        .iter()
        .map(|(name, &var)| (name.clone(), back.get_or_zeros(&g, var)))
        .collect::<BTreeMap<_, _>>();
    if grads.values().any(|a| !a.is_finite()) {
        return Err(AutogradError::NonFinite { op: "backward" }.into());
    }
    Ok(TaskGradient {
        terms: terms(&g, &v),
        grads,
    })
}
