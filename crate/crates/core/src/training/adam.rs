use std::collections::BTreeMap;

use crate::autodiff::NdArray;
use crate::error::{Error, Result};
use crate::models::ModelParams;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub(crate) m: BTreeMap<String, NdArray>,
    pub(crate) v: BTreeMap<String, NdArray>,
}

impl Adam {
    /// Zeroed moments shaped like `params`, β₁ 0.9, β₂ 0.999, ε 1e-8.
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: BTreeMap<String, NdArray> = params
            .arrays()
            .iter()
            .map(|(n, a)| (n.clone(), NdArray::zeros(a.shape())))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &BTreeMap<String, NdArray> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, NdArray> {
        &self.v
    }

    /// Applies one update. `grads` must name every parameter array.
    pub fn update(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, NdArray>) -> Result<()> {
        for (name, p) in params.arrays() {
            match grads.get(name) {
                None => return Err(Error::contract(format!("no gradient for `{name}`"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::contract(format!(
                        "gradient for `{name}` has shape {:?}",
                        g.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.arrays_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data());
            for ((p, (m, v)), &g) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                if self.learning_rate != 0.0 {
                    *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MlpConfig, ModelConfig, ModelKind};

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            mlp: MlpConfig { widths: vec![3] },
            r_dim: 2,
            ..ModelConfig::new(ModelKind::Cnp)
        };
        ModelParams::init(&cfg, 0).unwrap()
    }

    fn const_grads(p: &ModelParams, g: f64) -> BTreeMap<String, NdArray> {
        p.arrays()
            .iter()
            .map(|(n, a)| (n.clone(), NdArray::full(a.shape(), g)))
            .collect()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr·g/(|g| + ε/√…) ≈ lr·sign(g)
        let mut p = params();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.01);
        let g = const_grads(&p, 0.5);
        adam.update(&mut p, &g).unwrap();
        for (name, a) in p.arrays() {
            for (x, y) in a.data().iter().zip(before.get(name).unwrap().data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_hand_recursion() {
        let mut p = params();
        let name = "head.mu.b".to_string();
        let x0 = p.get(&name).unwrap().item();
        let mut adam = Adam::new(&p, 0.1);
        let gs = [1.0, -2.0, 0.5];
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        for (t, &g) in gs.iter().enumerate() {
            let mut grads = const_grads(&p, 0.0);
            grads.insert(name.clone(), NdArray::new(vec![1, 1], vec![g]).unwrap());
            adam.update(&mut p, &grads).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = t as i32 + 1;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.get(&name).unwrap().item() - x).abs() < 1e-15);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let mut p = params();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0);
        for g in [1.0, -3.0] {
            let grads = const_grads(&p, g);
            adam.update(&mut p, &grads).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut p = params();
        let mut adam = Adam::new(&p, 0.1);
        let mut grads = const_grads(&p, 1.0);
        grads.remove("head.mu.w");
        let before = (p.clone(), adam.clone());
        assert!(adam.update(&mut p, &grads).is_err());
        assert_eq!((p, adam), before);
    }
}
