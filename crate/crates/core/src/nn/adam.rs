use crate::error::{Error, Result};
use crate::nn::network::ParamMap;
use crate::nn::tensor::Tensor;

/// Bias-corrected Adam optimizer state over a named parameter map.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub m: ParamMap,
    pub v: ParamMap,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Canonical defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn new(params: &ParamMap, lr: f64) -> Self {
        let m = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        let v = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        Self { step_count: 0, m, v, lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    /// One update over all parameters present in `grads`.
    ///
    /// Parameters without a gradient entry are left untouched; their moment
    /// estimates are not decayed either, which matches treating the missing
    /// gradient as "not part of this step's graph".
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        for (name, grad) in grads {
            let p = params.get(name).ok_or(Error::EmptyInput("unknown parameter in grads"))?;
            p.same_shape(grad, "adam_step")?;
            grad.ensure_finite("adam_step gradient")?;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let p = params.get_mut(name).unwrap();
            let m = self.m.get_mut(name).ok_or(Error::EmptyInput("unknown parameter in adam state"))?;
            let v = self.v.get_mut(name).unwrap();
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("w".to_string(), Tensor::from_vec(vec![v]));
        p
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = scalar_param(1.5);
        let mut state = AdamState::new(&params, 1e-3);
        let grads = scalar_param(0.0);
        for _ in 0..10 {
            state.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["w"].data()[0], 1.5);
        assert_eq!(state.step_count, 10);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = scalar_param(0.0);
        let mut state = AdamState::new(&params, 1e-3);
        let grads = scalar_param(40.0);
        state.step(&mut params, &grads).unwrap();
        let delta = params["w"].data()[0];
        // Bias-corrected first step is -lr * g/(|g| + eps') which is ~ -lr.
        assert!(delta < 0.0);
        assert!((delta.abs() - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn three_steps_match_hand_iterated_recurrence() {
        let mut params = scalar_param(0.25);
        let mut state = AdamState::new(&params, 1e-3);
        let grads = scalar_param(1.0);

        // Independent hand-rolled recurrence.
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut m, mut v, mut w) = (0.0_f64, 0.0_f64, 0.25_f64);
        for t in 1..=3 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);
        }

        for _ in 0..3 {
            state.step(&mut params, &grads).unwrap();
        }
        assert!((params["w"].data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = scalar_param(0.0);
        let mut state = AdamState::new(&params, 1e-3);
        let grads = scalar_param(f64::NAN);
        assert!(matches!(state.step(&mut params, &grads), Err(Error::NonFinite { .. })));
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn update_is_bitwise_deterministic() {
        let run = || {
            let mut params = scalar_param(0.7);
            let mut state = AdamState::new(&params, 3e-4);
            let grads = scalar_param(-2.5);
            for _ in 0..5 {
                state.step(&mut params, &grads).unwrap();
            }
            params["w"].data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
