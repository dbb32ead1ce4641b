use std::collections::BTreeMap;

use super::params::{param_key, GradMap, ModelParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moment estimation with bias correction.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }
}

/// First-order optimizer carrying its moment state across steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", config.lr)));
        }
        Ok(Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every unfrozen group. Frozen groups are not
    /// touched at all, so they stay bit-identical.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradMap) -> Result<()> {
        let keys: Vec<(String, String)> = params
            .groups()
            .iter()
            .filter(|g| !g.frozen)
            .flat_map(|g| g.tensors.keys().map(move |n| (g.name.clone(), n.clone())))
            .collect();

        // Validate everything before mutating anything.
        for (g, n) in &keys {
            let key = param_key(g, n);
            let grad = grads
                .get(&key)
                .ok_or_else(|| Error::UnknownParam(format!("no gradient for {key}")))?;
            let p = params.get(g, n).expect("key came from params");
            if grad.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
        }

        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (g, n) in keys {
            let key = param_key(&g, &n);
            let grad = &grads[&key];
            let p = params.tensor_mut(&g, &n).expect("validated above");
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(grad.data()) {
                        *w -= c.lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let len = grad.numel();
                    let m = self.first.entry(key.clone()).or_insert_with(|| vec![0.0; len]);
                    let v = self.second.entry(key).or_insert_with(|| vec![0.0; len]);
                    for (((w, d), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * d;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * d * d;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamGroup, Tensor};

    fn params(frozen: bool) -> ModelParams {
        let mut g = ParamGroup::new("g").with("w", Tensor::scalar(1.0));
        g.frozen = frozen;
        ModelParams::new(vec![g]).unwrap()
    }

    fn grad(v: f64) -> GradMap {
        [("g/w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
            let mut p = params(false);
            let before = p.clone();
            let mut opt = Optimizer::new(cfg).unwrap();
            for _ in 0..3 {
                opt.step(&mut p, &grad(0.0)).unwrap();
            }
            assert!(p.bit_eq(&before));
        }
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut p = params(true);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        opt.step(&mut p, &grad(5.0)).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = params(false);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001)).unwrap();
        opt.step(&mut p, &grad(1.0)).unwrap();
        let w = p.get("g", "w").unwrap().data()[0];
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "{w}");
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = params(false);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5)).unwrap();
        opt.step(&mut p, &grad(2.0)).unwrap();
        assert_eq!(p.get("g", "w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params(false);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5)).unwrap();
        let bad: GradMap = [("g/w".to_string(), Tensor::zeros(&[1, 2]))].into_iter().collect();
        assert!(matches!(opt.step(&mut p, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0)).is_err());
    }
}
