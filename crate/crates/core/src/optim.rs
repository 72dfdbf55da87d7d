//! Adam with bias correction and L2-coupled weight decay
//! (`g' = g + wd * theta`, decay folded into the gradient).

use crate::model::Param;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    pub step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Param<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            step_count: 0,
        }
    }

    pub fn moment_shapes(&self) -> Vec<usize> {
        self.m.iter().map(|b| b.len()).collect()
    }

    /// One update over every parameter. `grads` is parallel to `params`.
    pub fn step(
        &mut self,
        params: &mut [Param<S>],
        grads: &[Vec<S>],
        learning_rate: f64,
        weight_decay: f64,
    ) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient count mismatch"
        );
        self.step_count += 1;
        let t = self.step_count;
        let beta1 = S::from_f64(ADAM_BETA1);
        let beta2 = S::from_f64(ADAM_BETA2);
        let eps = S::from_f64(ADAM_EPSILON);
        let lr = S::from_f64(learning_rate);
        let wd = S::from_f64(weight_decay);
        let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
        let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(t as i32));

        for (p, (grad, (m, v))) in params
            .iter_mut()
            .zip(grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())))
        {
            assert_eq!(p.numel(), grad.len(), "{}: gradient shape mismatch", p.name);
            for i in 0..grad.len() {
                let g = grad[i] + wd * p.values[i];
                m[i] = beta1 * m[i] + (S::one() - beta1) * g;
                v[i] = beta2 * v[i] + (S::one() - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
