//! Adam optimizer with bias correction.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Per-tensor moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(param_len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam step. Rejects non-finite gradients so a poisoned
/// update never reaches the parameters.
pub fn adam_update(
    cfg: &AdamConfig,
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            detail: format!(
                "{} params vs {} grads vs {} state",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient component {bad} in adam_update"),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        state.second_moment[i] = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Optimizer state for an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl ParamGroup {
    pub fn new(cfg: AdamConfig, param_lens: &[usize]) -> Self {
        ParamGroup {
            cfg,
            states: param_lens.iter().map(|&l| AdamState::new(l)).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Updates the tensor at `index` within the group.
    pub fn step(&mut self, index: usize, params: &mut Tensor, grads: &Tensor) -> Result<()> {
        adam_update(
            &self.cfg,
            &mut self.states[index],
            params.data_mut(),
            grads.data(),
        )
    }
}
