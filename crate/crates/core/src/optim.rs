//! ADAM optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// β1 = 0, β2 = 0.99, ε = 1e-8 with the given rate.
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.0,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid ADAM settings {self:?}")))
        }
    }
}

/// Per-parameter moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step_count: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }
}

/// One bias-corrected ADAM update of `params` from their gradient buffers.
///
/// Gradients are left in place; the caller resets them.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::contract(format!(
            "optimizer tracks {} tensors, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.is_none() {
            return Err(Error::contract(format!("parameter {i} has no gradient")));
        }
        if p.len() != state.first_moment[i].len() {
            return Err(Error::dim("adam_step", &[p.len()], &[state.first_moment[i].len()]));
        }
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::one() - T::lit(c.beta1.powi(t));
    let bc2 = T::one() - T::lit(c.beta2.powi(t));
    let lr = T::lit(c.learning_rate);
    let eps = T::lit(c.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}
