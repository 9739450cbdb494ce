use serde::{Deserialize, Serialize};

use super::{shape_err, Gradients, NumError, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2.5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Result<Self, NumError> {
        if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
            return Err(NumError::Config(format!("learning rate must be positive, got {}", config.learning_rate)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.epsilon.is_nan() || config.epsilon < 0.0 {
            return Err(NumError::Config(format!("invalid Adam coefficients {config:?}")));
        }
        let zeros = || params.iter().map(|(_, _, t)| vec![F::zero(); t.len()]).collect::<Vec<_>>();
        Ok(Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            learning_rate: F::of(config.learning_rate),
            beta1: F::of(config.beta1),
            beta2: F::of(config.beta2),
            epsilon: F::of(config.epsilon),
        })
    }
}

/// One bias-corrected Adam update.
///
/// Parameters without a gradient buffer are skipped entirely (their moments do
/// not decay); a zero gradient still decays the moments. Any non-finite
/// gradient aborts the step before anything is modified.
pub fn adam_step<F: Real>(params: &mut ParamStore<F>, grads: &Gradients<F>, state: &mut OptimizerState<F>) -> Result<(), NumError> {
    if state.first_moment.len() != params.len() || grads.len() != params.len() {
        return Err(shape_err("adam_step", params.len(), (state.first_moment.len(), grads.len())));
    }
    for id in params.ids() {
        let n = params.get(id).len();
        if state.first_moment[id.index()].len() != n || state.second_moment[id.index()].len() != n {
            return Err(shape_err("adam_step moments", n, state.first_moment[id.index()].len()));
        }
    }
    if let Some((id, index, value)) = grads.first_non_finite() {
        return Err(NumError::NonFinite { param: params.name(id).to_string(), index, value: value.f64() });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = F::one() - state.beta1.powi(t);
    let bc2 = F::one() - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (F::one() - b1) * g[i];
            v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
