use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three stationary covariance functions used for synthetic tasks.
///
/// All parameters are fixed:
///
/// | kernel   | k(d), d = x − x′                          |
/// |----------|-------------------------------------------|
/// | RBF      | exp(−½ (d / 0.2)²)                        |
/// | Periodic | exp(−2 (sin(2π\|d\|) / 0.5)²)             |
/// | Matérn-3/2 | (1 + 5√3 \|d\|) exp(−5√3 \|d\|)           |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpec {
    Rbf,
    Periodic,
    Matern32,
}

impl KernelSpec {
    pub const ALL: [KernelSpec; 3] = [KernelSpec::Rbf, KernelSpec::Periodic, KernelSpec::Matern32];

    pub fn eval(self, x: f64, x2: f64) -> f64 {
        let d = (x - x2).abs();
        match self {
            KernelSpec::Rbf => (-0.5 * (d / 0.2).powi(2)).exp(),
            KernelSpec::Periodic => (-2.0 * ((2.0 * PI * d).sin() / 0.5).powi(2)).exp(),
            KernelSpec::Matern32 => {
                let r = 5.0 * 3f64.sqrt() * d;
                (1.0 + r) * (-r).exp()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelSpec::Rbf => "rbf",
            KernelSpec::Periodic => "periodic",
            KernelSpec::Matern32 => "matern32",
        }
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: KernelSpec, x: f64, x2: f64) -> f64 {
    spec.eval(x, x2)
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelSpec::Rbf),
            "periodic" => Ok(KernelSpec::Periodic),
            "matern32" | "matern-3/2" | "matern" => Ok(KernelSpec::Matern32),
            other => Err(format!("unknown kernel `{other}` (expected rbf, periodic or matern32)")),
        }
    }
}
