//! Adam optimizer (β1=0.9, β2=0.999, ε=1e-8) and the staircase
//! learning-rate schedule used by all training runs.

use super::{Result, Scalar, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment buffers for a fixed, ordered list of parameters.
pub struct AdamState<E: Scalar = f32> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    step: u64,
}

impl<E: Scalar> AdamState<E> {
    /// Zero-initialized state matching `params` (position `i` of every later
    /// `adam_step` call must be the same parameter).
    pub fn new(params: &[Tensor<E>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![E::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![E::ZERO; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update over `params`, reading each parameter's accumulated
/// gradient (a missing gradient counts as zero, e.g. frozen branches).
///
/// Uses bias-corrected moments: `p -= lr · m̂ / (√v̂ + ε)`.
pub fn adam_step<E: Scalar>(
    params: &[Tensor<E>],
    state: &mut AdamState<E>,
    lr: E,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            msg: format!(
                "state tracks {} parameters, got {}",
                state.m.len(),
                params.len()
            ),
        });
    }
    let beta1 = E::from_f64(ADAM_BETA1);
    let beta2 = E::from_f64(ADAM_BETA2);
    let eps = E::from_f64(ADAM_EPSILON);
    state.step += 1;
    let t = state.step as i32;
    let corr1 = E::ONE - E::from_f64(ADAM_BETA1.powi(t));
    let corr2 = E::ONE - E::from_f64(ADAM_BETA2.powi(t));
    for (i, p) in params.iter().enumerate() {
        if p.len() != state.m[i].len() {
            return Err(TensorError::LengthMismatch {
                len: state.m[i].len(),
                shape: p.shape().to_vec(),
            });
        }
        let grad = p.grad();
        let mut data = p.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(E::ZERO, |g| g[j]);
            m[j] = beta1 * m[j] + (E::ONE - beta1) * g;
            v[j] = beta2 * v[j] + (E::ONE - beta2) * g * g;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Staircase decay: `base_lr · decay^floor(iteration / interval)`.
pub fn lr_schedule<E: Scalar>(iteration: u64, base_lr: E, decay: E, interval: u64) -> E {
    let steps = (iteration / interval) as u32;
    let mut factor = E::ONE;
    for _ in 0..steps {
        factor = factor * decay;
    }
    base_lr * factor
}
