use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{KernelSpec, RawSeries, X_RANGE};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Diagonal jitter added before factorization.
pub const JITTER: f64 = 1e-6;
/// Jitter is escalated ×10 up to this value before giving up.
pub const MAX_JITTER: f64 = 1e-3;

/// Draws `y ~ GP(0, K)` at the given inputs via a Cholesky factor of the
/// jittered kernel matrix.
pub fn sample_gp_at(spec: KernelSpec, xs: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    let n = xs.len();
    let base = DMatrix::from_fn(n, n, |i, j| spec.eval(xs[i], xs[j]));
    let mut jitter = JITTER;
    let chol = loop {
        let k = &base + DMatrix::identity(n, n) * jitter;
        if let Some(c) = k.cholesky() {
            break c;
        }
        if jitter >= MAX_JITTER {
            return Err(Error::DegenerateKernel { jitter });
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    };
    let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = chol.l() * eps;
    Ok(y.iter().copied().collect())
}

/// One synthetic series: `n_points` inputs uniform on [-2, 2], sorted,
/// with GP-distributed values.
pub fn sample_gp_task(spec: KernelSpec, n_points: usize, rng: &mut Rng) -> Result<RawSeries> {
    if n_points < 2 {
        return Err(Error::contract(format!("need at least 2 points, got {n_points}")));
    }
    let (lo, hi) = X_RANGE;
    let mut x: Vec<f64> = (0..n_points).map(|_| rng.random_range(lo..hi)).collect();
    x.sort_by(f64::total_cmp);
    // Ties have probability ~0 but would break strict monotonicity.
    for i in 1..x.len() {
        if x[i] <= x[i - 1] {
            x[i] = x[i - 1] + 1e-9;
        }
    }
    let y = sample_gp_at(spec, &x, rng)?;
    RawSeries::new(x, y)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = sample_gp_task(KernelSpec::Periodic, 50, &mut Rng::seed_from_u64(5)).unwrap();
        let b = sample_gp_task(KernelSpec::Periodic, 50, &mut Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.x().iter().all(|x| (-2.0..2.0).contains(x)));
    }

    #[test]
    fn rejects_single_point() {
        assert!(sample_gp_task(KernelSpec::Rbf, 1, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn unit_marginal_variance() {
        let mut rng = Rng::seed_from_u64(9);
        let n = 20_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let y = sample_gp_at(KernelSpec::Rbf, &[-0.7, 1.3], &mut rng).unwrap();
            acc += y[0] * y[0];
        }
        let var = acc / n as f64;
        assert!((var - (1.0 + 1e-6)).abs() < 0.03, "{var}");
    }

    #[test]
    fn cholesky_succeeds_on_random_inputs() {
        let mut rng = Rng::seed_from_u64(1);
        for trial in 0..1000 {
            let spec = KernelSpec::ALL[trial % 3];
            let n = rng.random_range(2..40);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = sample_gp_at(spec, &xs, &mut rng).unwrap();
            assert_eq!(y.len(), n);
        }
    }

    #[test]
    fn clustered_periodic_inputs_escalate_jitter() {
        // Inputs one period apart give (numerically) identical rows.
        let xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 2.0).collect();
        let y = sample_gp_at(KernelSpec::Periodic, &xs, &mut Rng::seed_from_u64(2)).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
