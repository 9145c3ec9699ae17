use serde::{Deserialize, Serialize};

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// Updates the moments with `grad` and moves `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(theta.len(), self.len(), "parameter length");
        assert_eq!(grad.len(), self.len(), "gradient length");
        self.step_count += 1;
        let t = self.step_count as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        for i in 0..theta.len() {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Functional form of [`AdamState::step`].
    pub fn stepped(&self, theta: &[f64], grad: &[f64], lr: f64) -> (AdamState, Vec<f64>) {
        let mut state = self.clone();
        let mut next = theta.to_vec();
        state.step(&mut next, grad, lr);
        (state, next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut state = AdamState::new(3);
        let mut theta = vec![1.0, -2.0, 0.5];
        state.step(&mut theta, &[0.0; 3], 1e-3);
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        let g = [0.3, -4.0, 1e-9];
        let lr = 1e-3;
        let (_, next) = AdamState::new(3).stepped(&[0.0; 3], &g, lr);
        for (x, gi) in next.iter().zip(g) {
            // m̂ = g, v̂ = g² after one step
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-18, "{x} vs {expected}");
        }
        assert!((next[0] + lr).abs() < 1e-10);
        assert!((next[1] - lr).abs() < 1e-10);
    }
}
