//! Adam with bias correction and per-tensor state.
//!
//! Each parameter tensor owns its moments and step counter, so a tensor
//! that is left out of an update keeps its state exactly as it was.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

impl Adam {
    /// One update of a single tensor.
    pub fn step<T: Real>(&self, params: &mut [T], grads: &[T], state: &mut AdamState<T>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        if state.m.len() != params.len() {
            state.m = vec![T::zero(); params.len()];
            state.v = vec![T::zero(); params.len()];
            state.step = 0;
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let eps = T::from_f64_lossy(self.eps);
        let lr = T::from_f64_lossy(lr);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// Updates every tensor of a parameter group; tensors outside the group
    /// are untouched, including their moments.
    pub fn apply_updates<T: Real>(
        &self,
        group: &mut [&mut [T]],
        grads: &[&[T]],
        states: &mut [AdamState<T>],
        lr: f64,
    ) {
        assert_eq!(group.len(), grads.len());
        assert_eq!(group.len(), states.len());
        for ((p, g), s) in group.iter_mut().zip(grads).zip(states.iter_mut()) {
            self.step(p, g, s, lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let mut w = vec![0.5f64, -2.0];
        let mut s = AdamState::default();
        Adam::default().step(&mut w, &[0.0, 0.0], &mut s, 0.1);
        assert_eq!(w, vec![0.5, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1.0f64, 1e-3, 250.0] {
            let mut w = vec![1.0f64];
            let mut s = AdamState::default();
            Adam::default().step(&mut w, &[g], &mut s, 0.1);
            assert!((w[0] - 0.9).abs() < 1e-6, "grad {g} -> {}", w[0]);
        }
    }

    #[test]
    fn repeated_gradient_moves_monotonically() {
        let mut w = vec![0.0f32];
        let mut s = AdamState::default();
        let mut prev = w[0];
        for _ in 0..2 {
            Adam::default().step(&mut w, &[0.7], &mut s, 0.01);
            assert!(w[0] < prev);
            prev = w[0];
        }
    }

    #[test]
    fn group_update_skips_tensors_outside_group() {
        let adam = Adam::default();
        let mut params = [vec![1.0f32, 2.0], vec![3.0f32]];
        let mut states = [AdamState::default(), AdamState::default()];
        let [a, _] = &mut params;
        adam.apply_updates(&mut [a], &[&[1.0, 1.0]], &mut states[..1], 0.1);
        assert_eq!(params[1], vec![3.0]);
        assert_eq!(states[1].step(), 0);
        assert_eq!(states[0].step(), 1);
        assert!(params[0][0] < 1.0);
    }
}
