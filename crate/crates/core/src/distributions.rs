//! Diagonal Gaussians: log-density, KL divergence, pathwise sampling and
//! the positivity transform for network-emitted scales.
//!
//! Every operation exists twice: once on plain arrays ([`DiagGaussian`]) for
//! evaluation code, and once on graph nodes ([`GaussianVars`]) so losses can
//! be differentiated. The two routes are tested against each other.

use crate::autodiff::{softplus, Graph, NdArray, Var};
use crate::error::{Error, Result};

/// Lower bound on every predicted standard deviation.
pub const SIGMA_MIN: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Independent Gaussians with per-coordinate mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mu: NdArray,
    pub sigma: NdArray,
}

impl DiagGaussian {
    pub fn new(mu: NdArray, sigma: NdArray) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::contract(format!(
                "mean shape {:?} differs from scale shape {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        if let Some(bad) = sigma.data().iter().find(|s| !(**s > 0.0)) {
            return Err(Error::contract(format!("non-positive scale {bad}")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Per-coordinate `log N(y_i; mu_i, sigma_i^2)`.
    pub fn log_prob(&self, y: &NdArray) -> Result<NdArray> {
        if y.len() != self.mu.len() {
            return Err(Error::contract(format!(
                "log_prob of {} values under a {}-dimensional Gaussian",
                y.len(),
                self.mu.len()
            )));
        }
        let data = y
            .data()
            .iter()
            .zip(self.mu.data().iter().zip(self.sigma.data()))
            .map(|(&y, (&m, &s))| {
                let z = (y - m) / s;
                -HALF_LN_2PI - s.ln() - 0.5 * z * z
            })
            .collect();
        Ok(NdArray::new(self.mu.shape().to_vec(), data)?)
    }

    /// `mu + sigma * noise`.
    pub fn sample(&self, noise: &NdArray) -> Result<NdArray> {
        reparam_sample(self, noise)
    }
}

/// `KL(q || p)` summed over coordinates.
pub fn kl_divergence(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::contract(format!(
            "KL between {}- and {}-dimensional Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, sq) = (q.mu.data()[i], q.sigma.data()[i]);
        let (mp, sp) = (p.mu.data()[i], p.sigma.data()[i]);
        let d = mq - mp;
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

pub fn reparam_sample(dist: &DiagGaussian, noise: &NdArray) -> Result<NdArray> {
    if noise.len() != dist.dim() {
        return Err(Error::contract(format!(
            "{} noise values for a {}-dimensional Gaussian",
            noise.len(),
            dist.dim()
        )));
    }
    let data = dist
        .mu
        .data()
        .iter()
        .zip(dist.sigma.data())
        .zip(noise.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(NdArray::new(dist.mu.shape().to_vec(), data)?)
}

/// `SIGMA_MIN + softplus(raw)`, elementwise.
pub fn sigma_from_raw(raw: &NdArray) -> NdArray {
    raw.map(|r| SIGMA_MIN + softplus(r))
}

/// A diagonal Gaussian whose parameters live on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    /// Builds the distribution from an unconstrained scale output.
    pub fn from_raw(g: &mut Graph, mu: Var, raw_sigma: Var) -> Result<Self> {
        Self::from_raw_with_floor(g, mu, raw_sigma, SIGMA_MIN)
    }

    /// As [`GaussianVars::from_raw`] with scale floor `floor` instead of
    /// [`SIGMA_MIN`].
    pub fn from_raw_with_floor(g: &mut Graph, mu: Var, raw_sigma: Var, floor: f64) -> Result<Self> {
        let sp = g.softplus(raw_sigma)?;
        let sigma = g.add_scalar(sp, floor)?;
        Ok(Self { mu, sigma })
    }

    /// Reads the current values back off the graph.
    pub fn value(&self, g: &Graph) -> Result<DiagGaussian> {
        DiagGaussian::new(g.value(self.mu).clone(), g.value(self.sigma).clone())
    }

    /// Elementwise log-density of `y`, differentiable in `y`, `mu`, `sigma`.
    pub fn log_prob(&self, g: &mut Graph, y: Var) -> Result<Var> {
        if g.shape(y) != g.shape(self.mu) {
            return Err(Error::contract(format!(
                "log_prob of {:?} values under {:?} Gaussian",
                g.shape(y),
                g.shape(self.mu)
            )));
        }
        let diff = g.sub(y, self.mu)?;
        let z = g.div(diff, self.sigma)?;
        let z2 = g.square(z)?;
        let half_z2 = g.scale(z2, -0.5)?;
        let log_sigma = g.log(self.sigma)?;
        let t = g.sub(half_z2, log_sigma)?;
        Ok(g.add_scalar(t, -HALF_LN_2PI)?)
    }

    /// `mu + sigma * noise` with `noise` held constant.
    pub fn sample(&self, g: &mut Graph, noise: &NdArray) -> Result<Var> {
        if noise.len() != g.value(self.mu).len() {
            return Err(Error::contract(format!(
                "{} noise values for a {}-dimensional Gaussian",
                noise.len(),
                g.value(self.mu).len()
            )));
        }
        let noise = g.constant(noise.clone().reshape(g.shape(self.mu).to_vec())?);
        let scaled = g.mul(self.sigma, noise)?;
        Ok(g.add(self.mu, scaled)?)
    }
}

/// Differentiable `KL(q || p)`, summed to a `[1]` node.
pub fn kl_divergence_var(g: &mut Graph, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    if g.shape(q.mu) != g.shape(p.mu) {
        return Err(Error::contract(format!(
            "KL between {:?} and {:?} Gaussians",
            g.shape(q.mu),
            g.shape(p.mu)
        )));
    }
    let log_ratio = {
        let lp = g.log(p.sigma)?;
        let lq = g.log(q.sigma)?;
        g.sub(lp, lq)?
    };
    let var_q = g.square(q.sigma)?;
    let diff = g.sub(q.mu, p.mu)?;
    let d2 = g.square(diff)?;
    let num = g.add(var_q, d2)?;
    let var_p = g.square(p.sigma)?;
    let den = g.scale(var_p, 2.0)?;
    let frac = g.div(num, den)?;
    let t = g.add(log_ratio, frac)?;
    let t = g.add_scalar(t, -0.5)?;
    Ok(g.sum(t)?)
}

pub fn sigma_from_raw_var(g: &mut Graph, raw: Var) -> Result<Var> {
    let sp = g.softplus(raw)?;
    Ok(g.add_scalar(sp, SIGMA_MIN)?)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::autodiff::check_gradients;

    fn gauss(mu: &[f64], sigma: &[f64]) -> DiagGaussian {
        DiagGaussian::new(NdArray::vector(mu.to_vec()), NdArray::vector(sigma.to_vec())).unwrap()
    }

    #[test]
    fn log_prob_at_mean_unit_scale() {
        let d = gauss(&[0.3, -2.0], &[1.0, 1.0]);
        let lp = d.log_prob(&NdArray::vector(vec![0.3, -2.0])).unwrap();
        for v in lp.data() {
            assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_at_mean_scale_e() {
        let e = std::f64::consts::E;
        let d = gauss(&[1.0], &[e]);
        let lp = d.log_prob(&NdArray::vector(vec![1.0])).unwrap();
        assert!((lp.item() + 0.918_938_533_204_672_7 + 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_prob_symmetric() {
        let d = gauss(&[0.7], &[0.4]);
        for a in [0.1, 0.5, 3.0] {
            let up = d.log_prob(&NdArray::vector(vec![0.7 + a])).unwrap().item();
            let down = d.log_prob(&NdArray::vector(vec![0.7 - a])).unwrap().item();
            assert!((up - down).abs() < 1e-14);
        }
    }

    #[test]
    fn non_positive_sigma_rejected() {
        assert!(DiagGaussian::new(NdArray::vector(vec![0.0]), NdArray::vector(vec![0.0])).is_err());
        assert!(DiagGaussian::new(NdArray::vector(vec![0.0, 1.0]), NdArray::vector(vec![1.0])).is_err());
    }

    #[test]
    fn kl_closed_form_values() {
        let q = gauss(&[0.0], &[1.0]);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!((kl_divergence(&q, &gauss(&[1.0], &[1.0])).unwrap() - 0.5).abs() < 1e-15);
        let expected = 2f64.ln() + 0.125 - 0.5;
        assert!((kl_divergence(&q, &gauss(&[0.0], &[2.0])).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.318_147_180_559_945_3).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(kl_divergence(&gauss(&[0.0], &[1.0]), &gauss(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn reparam_cases() {
        let d = gauss(&[0.5, -1.0], &[2.0, 3.0]);
        assert_eq!(d.sample(&NdArray::vector(vec![0.0, 0.0])).unwrap().data(), &[0.5, -1.0]);
        let unit = gauss(&[0.0], &[1.0]);
        assert_eq!(unit.sample(&NdArray::vector(vec![1.5])).unwrap().data(), &[1.5]);
        assert!(d.sample(&NdArray::vector(vec![0.0])).is_err());
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = gauss(&[0.25], &[1.0]);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                d.sample(&NdArray::vector(vec![e])).unwrap().item()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.25).abs() < 0.02, "{mean}");
    }

    #[test]
    fn sigma_from_raw_values() {
        let s = sigma_from_raw(&NdArray::vector(vec![0.0, -30.0, 10.0]));
        assert!((s.data()[0] - (1e-3 + 2f64.ln())).abs() < 1e-15);
        assert!((s.data()[0] - 0.694_147).abs() < 1e-6);
        assert!(s.data()[1] > SIGMA_MIN && s.data()[1] - SIGMA_MIN < 1e-12);
        assert!((s.data()[2] - (10.001 + 4.54e-5)).abs() < 1e-7);
    }

    #[test]
    fn density_integrates_to_one() {
        // Trapezoid rule over mu ± 8 sigma.
        let (mu, sigma) = (0.4, 0.7);
        let d = gauss(&[mu], &[sigma]);
        let n = 10_000;
        let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
        let h = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
        let dens: Vec<f64> = xs
            .iter()
            .map(|&x| d.log_prob(&NdArray::vector(vec![x])).unwrap().item().exp())
            .collect();
        let integral = h * (dens.iter().sum::<f64>() - 0.5 * (dens[0] + dens[n - 1]));
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn graph_route_matches_array_route() {
        let q = gauss(&[0.2, -0.4, 1.0], &[0.5, 1.2, 0.9]);
        let p = gauss(&[0.0, 0.3, 0.8], &[1.0, 0.7, 2.0]);
        let y = NdArray::vector(vec![0.1, 0.0, -1.0]);
        let mut g = Graph::new();
        let qv = GaussianVars {
            mu: g.leaf(q.mu.clone()),
            sigma: g.leaf(q.sigma.clone()),
        };
        let pv = GaussianVars {
            mu: g.leaf(p.mu.clone()),
            sigma: g.leaf(p.sigma.clone()),
        };
        let yv = g.constant(y.clone());
        let lp = qv.log_prob(&mut g, yv).unwrap();
        let kl = kl_divergence_var(&mut g, &qv, &pv).unwrap();
        assert!(g.value(lp).max_abs_diff(&q.log_prob(&y).unwrap()).unwrap() < 1e-14);
        assert!((g.value(kl).item() - kl_divergence(&q, &p).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn reparam_gradient_matches_fd() {
        let params = BTreeMap::from([
            ("mu".to_string(), NdArray::vector(vec![0.3, -0.2])),
            ("sigma".to_string(), NdArray::vector(vec![0.8, 1.7])),
        ]);
        let noise = NdArray::vector(vec![1.3, -0.6]);
        let errs = check_gradients(
            &params,
            |g, v| {
                let d = GaussianVars {
                    mu: v["mu"],
                    sigma: v["sigma"],
                };
                let s = d.sample(g, &noise).map_err(|e| match e {
                    Error::Autograd(a) => a,
                    other => crate::autodiff::AutogradError::Contract(other.to_string()),
                })?;
                let sq = g.square(s)?;
                g.sum(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(errs["sigma"] < 1e-6 && errs["mu"] < 1e-6, "{errs:?}");
    }

    fn param_vec() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-3.0..3.0f64, 3),
            prop::collection::vec(0.05..4.0f64, 3),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn kl_nonnegative((mq, sq) in param_vec(), (mp, sp) in param_vec()) {
            let kl = kl_divergence(&gauss(&mq, &sq), &gauss(&mp, &sp)).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_divergence(&gauss(&mq, &sq), &gauss(&mq, &sq)).unwrap().abs() < 1e-12);
        }

        #[test]
        fn sigma_above_floor(raw in -700.0..700.0f64) {
            let s = sigma_from_raw(&NdArray::vector(vec![raw])).item();
            // the floor is strict until softplus(raw) drops below one ulp of it
            prop_assert!(s >= SIGMA_MIN);
            prop_assert!(s > SIGMA_MIN || raw < -40.0);
        }
    }
}
