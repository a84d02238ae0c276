//! SGD and Adam over a named parameter set.

use std::collections::BTreeMap;

use crate::params::ParamSet;
use crate::tensor::{TensorError, TensorResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptMode {
    Sgd,
    Adam,
}

/// Per-parameter moment buffers plus step counter and hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub mode: OptMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(mode: OptMode, lr: f64) -> TensorResult<Self> {
        if lr <= 0.0 {
            return Err(TensorError::InvalidConfig {
                what: format!("learning rate must be positive, got {lr}"),
            });
        }
        Ok(OptimizerState {
            mode,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// One update over every trainable parameter that has a gradient.
    /// Parameters without a gradient buffer are untouched.
    pub fn apply(&mut self, params: &mut ParamSet) -> TensorResult<()> {
        // NaN guard and clip factor first, over the full gradient set.
        let mut sq_norm = 0.0;
        for (name, t) in params.iter() {
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = &t.grad {
                for &gv in g {
                    if !gv.is_finite() {
                        return Err(TensorError::NonFinite {
                            what: format!("gradient of parameter {name}"),
                        });
                    }
                    sq_norm += gv * gv;
                }
            }
        }
        let clip = match self.grad_clip {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step;
        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.requires_grad && p.grad.is_some())
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let tensor = params.get_mut(&name).expect("name from iteration");
            let grad = tensor.grad.as_ref().expect("checked above");
            match self.mode {
                OptMode::Sgd => {
                    let lr = self.lr;
                    let updates: Vec<f64> = grad.iter().map(|&g| lr * clip * g).collect();
                    for (p, u) in tensor.data.iter_mut().zip(updates) {
                        *p -= u;
                    }
                }
                OptMode::Adam => {
                    let n = grad.len();
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - self.beta1.powi(t as i32);
                    let bc2 = 1.0 - self.beta2.powi(t as i32);
                    for i in 0..n {
                        let g = clip * grad[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        tensor.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
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
    use crate::tensor::Tensor;

    fn one_param(value: Vec<f64>, grad: Option<Vec<f64>>) -> ParamSet {
        let mut ps = ParamSet::new();
        let n = value.len();
        let mut t = Tensor::new(vec![1, n], value).unwrap().requires_grad(true);
        t.grad = grad;
        ps.insert("w.p", t).unwrap();
        ps
    }

    #[test]
    fn sgd_arithmetic() {
        let mut ps = one_param(vec![1.0], Some(vec![2.0]));
        let mut opt = OptimizerState::new(OptMode::Sgd, 0.1).unwrap();
        opt.grad_clip = None;
        opt.apply(&mut ps).unwrap();
        assert!((ps.get("w.p").unwrap().data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_hand_recurrence() {
        // Hand-evaluate the recurrence at t=1: m=0.1, v=1e-3,
        // mhat=1, vhat=1, p = 0 - lr * 1/(1+eps).
        let mut ps = one_param(vec![0.0], Some(vec![1.0]));
        let mut opt = OptimizerState::new(OptMode::Adam, 0.1).unwrap();
        opt.grad_clip = None;
        opt.apply(&mut ps).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        let got = ps.get("w.p").unwrap().data[0];
        assert!((got - expected).abs() < 1e-15, "got {got}");
        assert!((got + 0.1).abs() < 1e-8); // first step is ~ -lr * sign(g)
    }

    #[test]
    fn zero_gradient_leaves_params_but_decays_moments() {
        let mut ps = one_param(vec![0.5], Some(vec![1.0]));
        let mut opt = OptimizerState::new(OptMode::Adam, 0.05).unwrap();
        opt.grad_clip = None;
        opt.apply(&mut ps).unwrap();
        let m_before = opt.m["w.p"][0];

        // Now a zero gradient: moments decay, direction is still m/...,
        // but on a fresh optimizer the parameter must stay put.
        let mut ps2 = one_param(vec![0.5], Some(vec![0.0]));
        let mut opt2 = OptimizerState::new(OptMode::Adam, 0.05).unwrap();
        opt2.apply(&mut ps2).unwrap();
        assert_eq!(ps2.get("w.p").unwrap().data[0], 0.5);

        opt.apply(&mut one_param(vec![0.5], Some(vec![0.0]))).unwrap();
        assert!(opt.m["w.p"][0].abs() < m_before.abs());
    }

    #[test]
    fn missing_grad_is_untouched() {
        let mut ps = one_param(vec![3.0], None);
        let mut opt = OptimizerState::new(OptMode::Adam, 0.1).unwrap();
        opt.apply(&mut ps).unwrap();
        assert_eq!(ps.get("w.p").unwrap().data[0], 3.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut ps = one_param(vec![1.0], Some(vec![f64::NAN]));
        let mut opt = OptimizerState::new(OptMode::Adam, 0.1).unwrap();
        let err = opt.apply(&mut ps).unwrap_err();
        match err {
            TensorError::NonFinite { what } => assert!(what.contains("w.p"), "{what}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        assert!(OptimizerState::new(OptMode::Sgd, 0.0).is_err());
    }
}
