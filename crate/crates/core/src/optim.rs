//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One optimisation step over `params`, which must be passed in the same
    /// order on every call. Weight decay is applied as `θ ← θ − lr·wd·θ`
    /// before the moment update.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {lr} and weight decay {weight_decay} must be non-negative"
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Config("optimiser state does not match parameter list".into()));
        }
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::MissingGradient(i));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, theta) in p.data_mut().iter_mut().enumerate() {
                *theta -= lr * weight_decay * *theta;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).into_param();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(0.7, 0.0);
        let mut st = AdamState::new();
        st.step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert_eq!(p.item(), 0.7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(0.0, 1.0);
        let mut st = AdamState::new();
        st.step(&mut [&mut p], 0.1, 0.0).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        assert!((p.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = param(1.0, 0.0);
        let mut st = AdamState::new();
        st.step(&mut [&mut p], 0.1, 0.5).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0).into_param();
        let mut st = AdamState::new();
        assert!(matches!(
            st.step(&mut [&mut p], 0.1, 0.0),
            Err(Error::MissingGradient(0))
        ));
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut st = AdamState::new();
        for k in 1..=5 {
            let mut p = param(1.0, 0.3);
            st.step(&mut [&mut p], 0.01, 0.0).unwrap();
            assert_eq!(st.t, k);
        }
        assert_eq!(st.first_moments()[0].len(), 1);
    }
}
