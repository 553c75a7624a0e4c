//! The four model families as forward maps from a task to a predictive
//! Gaussian over the target values.
//!
//! | kind      | representation            | latent path                  |
//! |-----------|---------------------------|------------------------------|
//! | `cnp`     | mean of a pointwise MLP   | none                         |
//! | `np`      | mean of a pointwise MLP   | `z` from a second set MLP    |
//! | `convcnp` | set convolution + CNN     | none                         |
//! | `gbconp`  | set convolution + CNN     | one `z` shared by the grid   |
//!
//! Forward passes are written once against a [`Graph`](crate::autodiff::Graph)
//! ([`forward_graph`]); the plain functions ([`cnp_forward`],
//! [`gbconp_forward`], ...) evaluate them with frozen parameters.

mod forward;
mod params;


use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use forward::{
    cnp_forward, convcnp_forward, decode, encode, forward_graph, gbconp_forward, latent_from_grid, np_forward, predict,
    task_grid, Encoding, ForwardVars, LatentMode, Prediction,
};
pub use params::{Bound, ModelParams};

use crate::distributions::SIGMA_MIN;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnp,
    Np,
    ConvCnp,
    GbConp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Cnp, ModelKind::Np, ModelKind::ConvCnp, ModelKind::GbConp];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnp => "cnp",
            ModelKind::Np => "np",
            ModelKind::ConvCnp => "convcnp",
            ModelKind::GbConp => "gbconp",
        }
    }

    /// Whether the model has a latent path (and is trained on the ELBO).
    pub fn is_latent(self) -> bool {
        matches!(self, ModelKind::Np | ModelKind::GbConp)
    }

    /// Whether the model works on a discretized grid.
    pub fn is_convolutional(self) -> bool {
        matches!(self, ModelKind::ConvCnp | ModelKind::GbConp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cnp" => Ok(ModelKind::Cnp),
            "np" => Ok(ModelKind::Np),
            "convcnp" => Ok(ModelKind::ConvCnp),
            "gbconp" => Ok(ModelKind::GbConp),
            other => Err(format!("unknown model `{other}` (expected cnp, np, convcnp or gbconp)")),
        }
    }
}

/// Hidden-layer widths of a pointwise MLP. ReLU follows every hidden layer;
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { widths: vec![64, 64] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBackboneConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel_size: usize,
}

impl Default for ConvBackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            channels: 32,
            kernel_size: 5,
        }
    }
}

/// Architecture of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub mlp: MlpConfig,
    /// Width of the deterministic representation of the MLP-based models.
    pub r_dim: usize,
    pub d_z: usize,
    pub conv: ConvBackboneConfig,
    pub points_per_unit: usize,
    pub margin: f64,
    /// Lower bound on every predicted and latent standard deviation.
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
}

fn default_sigma_floor() -> f64 {
    SIGMA_MIN
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            mlp: MlpConfig::default(),
            r_dim: 64,
            d_z: 128,
            conv: ConvBackboneConfig::default(),
            points_per_unit: 32,
            margin: 0.1,
            sigma_floor: SIGMA_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mlp.widths.is_empty() || self.mlp.widths.contains(&0) {
            return bad(format!(
                "mlp widths {:?} need at least one positive entry",
                self.mlp.widths
            ));
        }
        if self.r_dim == 0 || self.d_z == 0 {
            return bad("r_dim and d_z must be positive".into());
        }
        if self.conv.depth == 0 || self.conv.channels == 0 {
            return bad("conv depth and channels must be positive".into());
        }
        if self.conv.kernel_size % 2 == 0 {
            return bad(format!("conv kernel size {} is even", self.conv.kernel_size));
        }
        if self.points_per_unit < 2 {
            return bad(format!("points_per_unit {} < 2", self.points_per_unit));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("negative grid margin {}", self.margin));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return bad(format!("sigma floor {} must be positive", self.sigma_floor));
        }
        Ok(())
    }
}
