use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Adam hyperparameters. A non-zero `weight_decay` gives decoupled (AdamW) decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment accumulators and step counter for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: ParamSet,
    second: ParamSet,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam/AdamW update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.congruent(grads) || !params.congruent(&self.first) {
            return Err(Error::Shape(
                "optimizer step: params, grads and moments must be congruent".into(),
            ));
        }
        let c = self.config;
        self.step += 1;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut().iter_mut().zip(self.second.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((x, &gi), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                if c.weight_decay != 0.0 {
                    *x -= c.lr * c.weight_decay * *x;
                }
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Tensor;

    fn vector(values: &[f64]) -> ParamSet {
        ParamSet::new(vec![Tensor {
            name: "x".into(),
            shape: vec![values.len()],
            data: values.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let mut p = vector(&[1.0, -2.0, 3.0]);
        let g = vector(&[0.0, 0.0, 0.0]);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            s.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, vector(&[1.0, -2.0, 3.0]));
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_params() {
        let mut p = vector(&[1.0]);
        let g = vector(&[0.0]);
        let mut s = OptimizerState::new(
            AdamConfig {
                weight_decay: 0.1,
                ..AdamConfig::with_lr(0.01)
            },
            &p,
        );
        s.step(&mut p, &g).unwrap();
        assert_eq!(p.get_flat(0), Some(1.0 - 0.01 * 0.1));
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut p = vector(&[0.0, 0.0, 0.0]);
        let g = vector(&[3.0, -0.5, 1e-3]);
        let mut s = OptimizerState::new(AdamConfig::with_lr(0.1), &p);
        s.step(&mut p, &g).unwrap();
        for (x, gi) in p.iter_values().zip(g.iter_values()) {
            let expected = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-9, "{x} vs {expected}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vector(&[0.0, 0.0]);
        let g = vector(&[0.0]);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        assert!(matches!(s.step(&mut p, &g), Err(Error::Shape(_))));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // f(x) = sum_i a_i (x_i - c_i)^2
        let a = [1.0, 4.0, 0.5];
        let c = [2.0, -1.0, 0.5];
        let loss = |p: &ParamSet| -> f64 {
            p.iter_values()
                .zip(a.iter().zip(&c))
                .map(|(x, (ai, ci))| ai * (x - ci).powi(2))
                .sum()
        };
        let mut p = vector(&[0.0, 0.0, 0.0]);
        let mut s = OptimizerState::new(AdamConfig::with_lr(0.01), &p);
        let mut history = Vec::new();
        for _ in 0..100 {
            history.push(loss(&p));
            let g: Vec<f64> = p
                .iter_values()
                .zip(a.iter().zip(&c))
                .map(|(x, (ai, ci))| 2.0 * ai * (x - ci))
                .collect();
            s.step(&mut p, &vector(&g)).unwrap();
        }
        history.push(loss(&p));
        assert!(history.windows(2).skip(5).all(|w| w[1] < w[0]));
        assert!(history.last().unwrap() < &(0.5 * history[0]));
    }
}
