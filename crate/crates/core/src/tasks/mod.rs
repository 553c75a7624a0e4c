//! Meta-regression tasks: synthetic Gaussian-process series, the
//! context/target split with per-task normalization, and CSV ingestion.

mod csv_series;
mod gp;
mod kernel;
mod records;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use csv_series::load_series_csv;
pub use gp::{sample_gp_at, sample_gp_task, JITTER, MAX_JITTER};
pub use kernel::{kernel_eval, KernelSpec};
pub use records::{read_tasks, tasks_from_container, tasks_to_container, write_tasks};

use crate::autodiff::NdArray;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Range of the synthetic inputs before normalization.
pub const X_RANGE: (f64, f64) = (-2.0, 2.0);

/// A 1-D series with strictly increasing inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl RawSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::contract(format!("{} inputs but {} values", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(Error::contract("a series needs at least 2 points"));
        }
        if x.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::contract("series inputs must be strictly increasing"));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::contract("series contains non-finite values"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `len` consecutive points starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len < 2 || start + len > self.len() {
            return Err(Error::contract(format!(
                "window [{start}, {}) outside a series of {} points",
                start + len,
                self.len()
            )));
        }
        Self::new(self.x[start..start + len].to_vec(), self.y[start..start + len].to_vec())
    }
}

/// The affine maps applied to a task's raw inputs and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_min: f64,
    pub x_max: f64,
    pub y_mean: f64,
    pub y_std: f64,
    /// Set when the values were constant and `y_std` fell back to 1.
    pub constant_y: bool,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        x_min: -1.0,
        x_max: 1.0,
        y_mean: 0.0,
        y_std: 1.0,
        constant_y: false,
    };

    pub fn x_forward(&self, x: f64) -> f64 {
        2.0 * (x - self.x_min) / (self.x_max - self.x_min) - 1.0
    }

    pub fn x_inverse(&self, x: f64) -> f64 {
        (x + 1.0) * 0.5 * (self.x_max - self.x_min) + self.x_min
    }

    pub fn y_forward(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn y_inverse(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

/// One meta-learning sample: a context set and a target set.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub x_context: NdArray,
    pub y_context: NdArray,
    pub x_target: NdArray,
    pub y_target: NdArray,
    pub normalization: Normalization,
}

impl Task {
    /// Assembles a task from already-normalized arrays.
    pub fn from_parts(
        x_context: Vec<f64>,
        y_context: Vec<f64>,
        x_target: Vec<f64>,
        y_target: Vec<f64>,
    ) -> Result<Self> {
        if x_context.len() != y_context.len() || x_target.len() != y_target.len() {
            return Err(Error::contract("context/target inputs and values differ in length"));
        }
        if x_target.is_empty() {
            return Err(Error::contract("a task needs at least one target point"));
        }
        Ok(Self {
            x_context: NdArray::vector(x_context),
            y_context: NdArray::vector(y_context),
            x_target: NdArray::vector(x_target),
            y_target: NdArray::vector(y_target),
            normalization: Normalization::IDENTITY,
        })
    }

    pub fn n_context(&self) -> usize {
        self.x_context.len()
    }

    pub fn n_target(&self) -> usize {
        self.x_target.len()
    }

    /// The same targets with the context replaced by the target points at
    /// `indices`.
    pub fn with_context_indices(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_target()) {
            return Err(Error::contract(format!("context index {bad} out of range")));
        }
        let xt = self.x_target.data();
        let yt = self.y_target.data();
        Ok(Self {
            x_context: NdArray::vector(indices.iter().map(|&i| xt[i]).collect()),
            y_context: NdArray::vector(indices.iter().map(|&i| yt[i]).collect()),
            ..self.clone()
        })
    }

    /// The task whose context is its whole target set.
    pub fn full_context(&self) -> Self {
        Self {
            x_context: self.x_target.clone(),
            y_context: self.y_target.clone(),
            ..self.clone()
        }
    }

    /// Smallest and largest input over context and target points.
    pub fn x_extent(&self) -> (f64, f64) {
        self.x_context
            .data()
            .iter()
            .chain(self.x_target.data())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }
}

/// Splits a series into a normalized task.
///
/// Every point is a target; `m_context` of them, chosen without
/// replacement, form the context. Inputs are mapped affinely onto
/// `[-1, 1]` and values standardized by their (population) mean and
/// standard deviation.
pub fn make_task(series: &RawSeries, m_context: usize, rng: &mut Rng) -> Result<Task> {
    let n = series.len();
    if m_context < 1 || m_context > n {
        return Err(Error::contract(format!("context size {m_context} outside [1, {n}]")));
    }
    let (x_min, x_max) = (series.x[0], series.x[n - 1]);
    let y_mean = series.y.iter().sum::<f64>() / n as f64;
    let var = series.y.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let constant_y = !(std > 0.0);
    let normalization = Normalization {
        x_min,
        x_max,
        y_mean,
        y_std: if constant_y { 1.0 } else { std },
        constant_y,
    };
    let x_target: Vec<f64> = series.x.iter().map(|&x| normalization.x_forward(x)).collect();
    let y_target: Vec<f64> = series.y.iter().map(|&y| normalization.y_forward(y)).collect();

    let mut indices = sample(rng, n, m_context).into_vec();
    indices.sort_unstable();
    let task = Task {
        x_context: NdArray::vector(indices.iter().map(|&i| x_target[i]).collect()),
        y_context: NdArray::vector(indices.iter().map(|&i| y_target[i]).collect()),
        x_target: NdArray::vector(x_target),
        y_target: NdArray::vector(y_target),
        normalization,
    };
    Ok(task)
}

/// Where training and evaluation tasks come from.
#[derive(Clone, Debug)]
pub enum TaskSource {
    Kernel(KernelSpec),
    Series(RawSeries),
}

/// Shape of the tasks drawn from a [`TaskSource`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskShape {
    pub n_points: usize,
    pub min_context: usize,
    pub max_context: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            n_points: 100,
            min_context: 1,
            max_context: 50,
        }
    }
}

impl TaskSource {
    /// Draws one task: a fresh GP sample, or a random window of the series.
    pub fn sample_task(&self, shape: &TaskShape, rng: &mut Rng) -> Result<Task> {
        let series = match self {
            TaskSource::Kernel(spec) => sample_gp_task(*spec, shape.n_points, rng)?,
            TaskSource::Series(series) => {
                let len = shape.n_points.min(series.len());
                let start = rng.random_range(0..=series.len() - len);
                series.window(start, len)?
            }
        };
        let hi = shape.max_context.min(series.len());
        let lo = shape.min_context.clamp(1, hi);
        let m = rng.random_range(lo..=hi);
        make_task(&series, m, rng)
    }

    pub fn describe(&self) -> String {
        match self {
            TaskSource::Kernel(k) => k.name().to_string(),
            TaskSource::Series(s) => format!("series[{}]", s.len()),
        }
    }
}

/// `count` tasks drawn from independent per-task streams of `seed`.
pub fn sample_tasks(source: &TaskSource, shape: &TaskShape, seed: u64, label: &str, count: usize) -> Result<Vec<Task>> {
    (0..count)
        .map(|i| source.sample_task(shape, &mut crate::seed::rng_for(seed, label, i as u64)))
        .collect()
}
