use serde::{Deserialize, Serialize};

use super::{DenseArray, NumericsError, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<DenseArray>,
    pub second_moment: Vec<DenseArray>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_params(params: &ParamStore) -> Self {
        let zeros = |p: &DenseArray| DenseArray::zeros(p.shape());
        Self {
            first_moment: params.values().iter().map(zeros).collect(),
            second_moment: params.values().iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            state: OptimizerState::for_params(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[DenseArray]) -> Result<(), NumericsError> {
        if !(self.config.learning_rate > 0.0) {
            return Err(NumericsError::Invalid("learning rate must be positive".into()));
        }
        if grads.len() != params.len() || self.state.first_moment.len() != params.len() {
            return Err(NumericsError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.values().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.state.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let m = self.state.first_moment[i].data_mut();
            let v = self.state.second_moment[i].data_mut();
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
