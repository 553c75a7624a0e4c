use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelKind};
use crate::autodiff::{Graph, NdArray, Var};
use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};
use crate::setconv::SetConvParams;

/// Named parameter arrays of one model, together with its architecture.
///
/// Names are dotted paths (`encoder.0.w`, `conv.2.k`, `head.sigma.b`, ...)
/// and iterate in sorted order, which fixes the layout of checkpoints and
/// optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    arrays: BTreeMap<String, NdArray>,
}

enum Init {
    /// `w: [fan_out, fan_in]` from `N(0, gain / fan_in)` and `b: [fan_out, 1]` zero.
    Dense {
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    },
    /// `k: [c_out, c_in, width]` from `N(0, gain / (c_in·width))` and `b: [c_out]` zero.
    Conv {
        c_in: usize,
        c_out: usize,
        width: usize,
        gain: f64,
    },
    Scalar(f64),
}

/// Hidden layers get He gain; a linear output layer gets unit gain.
fn mlp(specs: &mut Vec<(String, Init)>, prefix: &str, input: usize, widths: &[usize], output: Option<usize>) {
    let mut dims = vec![input];
    dims.extend_from_slice(widths);
    dims.extend(output);
    let n = dims.len() - 1;
    for i in 0..n {
        let gain = if output.is_some() && i + 1 == n { 1.0 } else { 2.0 };
        specs.push((
            format!("{prefix}.{i}"),
            Init::Dense {
                fan_in: dims[i],
                fan_out: dims[i + 1],
                gain,
            },
        ));
    }
}

fn head(specs: &mut Vec<(String, Init)>, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    specs.push((name.to_string(), Init::Dense { fan_in, fan_out, gain }));
}

fn layout(config: &ModelConfig) -> Vec<(String, Init)> {
    let widths = &config.mlp.widths;
    let hidden = *widths.last().expect("validated");
    let (d_z, c) = (config.d_z, config.conv.channels);
    let mut specs = Vec::new();
    match config.kind {
        ModelKind::Cnp | ModelKind::Np => {
            mlp(&mut specs, "encoder", 2, widths, Some(config.r_dim));
            let latent = if config.kind == ModelKind::Np { d_z } else { 0 };
            mlp(&mut specs, "decoder", 1 + config.r_dim + latent, widths, None);
            head(&mut specs, "head.mu", hidden, 1, 1.0);
            head(&mut specs, "head.sigma", hidden, 1, 1.0);
        }
        ModelKind::ConvCnp | ModelKind::GbConp => {
            let ls = SetConvParams::for_resolution(config.points_per_unit).log_length_scale;
            specs.push(("setconv.encoder.log_ls".into(), Init::Scalar(ls)));
            specs.push(("setconv.decoder.log_ls".into(), Init::Scalar(ls)));
            let depth = config.conv.depth;
            for i in 0..depth {
                let c_in = if i == 0 && config.kind == ModelKind::ConvCnp {
                    2
                } else {
                    c
                };
                let gain = if i + 1 == depth { 1.0 } else { 2.0 };
                let width = config.conv.kernel_size;
                specs.push((
                    format!("conv.{i}"),
                    Init::Conv {
                        c_in,
                        c_out: c,
                        width,
                        gain,
                    },
                ));
            }
            if config.kind == ModelKind::GbConp {
                mlp(&mut specs, "merger", 2 + d_z, widths, Some(c));
            }
            head(&mut specs, "head.mu", c, 1, 1.0);
            head(&mut specs, "head.sigma", c, 1, 1.0);
        }
    }
    if config.kind.is_latent() {
        mlp(&mut specs, "latent", 2, widths, None);
        // zero heads: prior and posterior start identical
        head(&mut specs, "latent.mu", hidden, d_z, 0.0);
        head(&mut specs, "latent.sigma", hidden, d_z, 0.0);
    }
    specs
}

fn normal(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

impl ModelParams {
    /// Fresh parameters: He-normal weights for layers followed by a ReLU,
    /// `N(0, 1/fan_in)` for linear outputs, zero biases, and set-convolution
    /// length scales of two grid spacings. Each layer draws from its own
    /// stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut arrays = BTreeMap::new();
        for (name, init) in layout(config) {
            let mut rng = rng_for(seed, &name, 0);
            match init {
                Init::Dense { fan_in, fan_out, gain } => {
                    let w = normal(&mut rng, fan_in * fan_out, (gain / fan_in as f64).sqrt());
                    arrays.insert(format!("{name}.w"), NdArray::new(vec![fan_out, fan_in], w)?);
                    arrays.insert(format!("{name}.b"), NdArray::zeros(&[fan_out, 1]));
                }
                Init::Conv {
                    c_in,
                    c_out,
                    width,
                    gain,
                } => {
                    let k = normal(&mut rng, c_out * c_in * width, (gain / (c_in * width) as f64).sqrt());
                    arrays.insert(format!("{name}.k"), NdArray::new(vec![c_out, c_in, width], k)?);
                    arrays.insert(format!("{name}.b"), NdArray::zeros(&[c_out]));
                }
                Init::Scalar(v) => {
                    arrays.insert(name, NdArray::scalar(v));
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            arrays,
        })
    }

    /// Reassembles parameters (e.g. from a checkpoint), checking that the
    /// names and shapes match what `config` expects.
    pub fn from_arrays(config: ModelConfig, arrays: BTreeMap<String, NdArray>) -> Result<Self> {
        let template = Self::init(&config, 0)?;
        if template.arrays.len() != arrays.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter arrays, expected {} for {}",
                arrays.len(),
                template.arrays.len(),
                config.kind
            )));
        }
        for (name, t) in &template.arrays {
            match arrays.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter array `{name}`"))),
                Some(a) if a.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        a.shape(),
                        t.shape()
                    )))
                }
                Some(a) if !a.is_finite() => {
                    return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, arrays })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn arrays(&self) -> &BTreeMap<String, NdArray> {
        &self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.arrays.get(name)
    }

    /// Replaces one array; the shape must stay the same.
    pub fn set(&mut self, name: &str, value: NdArray) -> Result<()> {
        let slot = self
            .arrays
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn arrays_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray)> {
        self.arrays.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.values().map(NdArray::len).sum()
    }

    /// Puts every array on `g`, as named differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let v = if trainable {
                    g.named_leaf(name, a.clone())
                } else {
                    g.constant(a.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter array of a model.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, e.g. by
    /// [`check_gradients`](crate::autodiff::check_gradients).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("model has no parameter `{name}`")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}
