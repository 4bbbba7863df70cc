use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl MomentState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is 1-based.
///
/// The gradient is checked before anything is modified, so a rejected step
/// leaves both the parameters and the moments untouched.
pub fn adam_step(
    name: &str,
    params: &mut [f32],
    grads: &[f32],
    state: &mut MomentState,
    hyper: &AdamConfig,
    step: u64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!(
                "{name}: params {} grads {} moments {}/{}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        });
    }
    if step == 0 {
        return Err(Error::InvalidArgument("adam step index is 1-based".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let bc1 = 1.0 - (hyper.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (hyper.beta2 as f64).powi(step as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for i in 0..params.len() {
        let g = grads[i];
        let m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        params[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
    Ok(())
}
