//! Gradient descent and Adam on flat parameter vectors.

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_BETA_FM: f64 = 0.90;
pub const DEFAULT_BETA_SM: f64 = 0.99;
pub const ADAM_EPSILON: f64 = 1e-8;

fn check_lengths(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    Ok(())
}

/// `η ← η − α·g`.
pub fn gd_step(params: &mut [f64], grads: &[f64], alpha_lr: f64) -> Result<()> {
    check_lengths(params, grads)?;
    if !(alpha_lr > 0.0 && alpha_lr < 1.0) {
        return Err(Error::Domain(format!("learning rate {alpha_lr} outside (0, 1)")));
    }
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= alpha_lr * g);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Number of steps taken so far.
    pub step: u64,
    pub alpha_lr: f64,
    pub beta_fm: f64,
    pub beta_sm: f64,
}

impl AdamState {
    /// Zero moments with the given rates.
    pub fn new(num_params: usize, alpha_lr: f64, beta_fm: f64, beta_sm: f64) -> Result<Self> {
        for (name, b) in [("beta_fm", beta_fm), ("beta_sm", beta_sm)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Domain(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(alpha_lr > 0.0 && alpha_lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate {alpha_lr} must be positive")));
        }
        Ok(AdamState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            alpha_lr,
            beta_fm,
            beta_sm,
        })
    }

    pub fn with_defaults(num_params: usize) -> Self {
        Self::new(num_params, DEFAULT_ALPHA, DEFAULT_BETA_FM, DEFAULT_BETA_SM).expect("valid defaults")
    }

    /// `m / (1 − β_fm^i)` for the current step.
    pub fn bias_corrected_first_moment(&self) -> Vec<f64> {
        let c = 1.0 - self.beta_fm.powi(self.step as i32);
        self.first_moment.iter().map(|m| m / c).collect()
    }

    pub fn bias_corrected_second_moment(&self) -> Vec<f64> {
        let c = 1.0 - self.beta_sm.powi(self.step as i32);
        self.second_moment.iter().map(|v| v / c).collect()
    }
}

/// One Adam update in place. Returns the step direction `δ`; the parameters
/// move by `−α·δ`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<Vec<f64>> {
    check_lengths(params, grads)?;
    if state.first_moment.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta_fm, state.beta_sm);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let mut delta = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let d = (m / c1) / ((v / c2).sqrt() + ADAM_EPSILON);
        params[i] -= state.alpha_lr * d;
        delta.push(d);
    }
    Ok(delta)
}
