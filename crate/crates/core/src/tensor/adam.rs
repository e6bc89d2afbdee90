use super::Tensor;
use crate::error::{shape_err, Result};

/// Bias-corrected Adam state for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
        }
    }
}

/// Applies one Adam update to `params` using their accumulated gradients
/// (missing gradients count as zero).
pub fn adam_step(params: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(shape_err!(
            "adam: {} parameters for a state of {}",
            params.len(),
            state.first_moment.len()
        ));
    }
    for (p, m) in params.iter().zip(&state.first_moment) {
        if p.numel() != m.len() {
            return Err(shape_err!(
                "adam: parameter of {} values, moment buffer of {}",
                p.numel(),
                m.len()
            ));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params
        .iter()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let Some(g) = p.grad() else { continue };
        let mut data = p.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] -= state.learning_rate * mh / (vh.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
