use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidArgument {
                op: "adam",
                reason: format!("learning rate must be positive, got {lr}"),
            });
        }
        let zeros = |_| -> Vec<Tensor> { store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect() };
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((param, m), v) in store.params_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = param.value_and_grad_mut();
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn quadratic_store(w: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(w)).unwrap();
        store
    }

    /// Accumulates the gradient of `Σ c_i w_i²` and returns its max-norm.
    fn quadratic_grad(store: &mut ParamStore, curvature: &[f64]) -> f64 {
        let id = store.id("w").unwrap();
        let mut tape = Tape::new();
        let w = tape.param(store, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.weighted_sum(sq, curvature.to_vec()).unwrap();
        tape.backward(loss).unwrap().accumulate_into(store);
        store.get(id).grad().data().iter().fold(0.0, |a, g| a.max(g.abs()))
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = quadratic_store(vec![1.0, -2.0]);
        let mut adam = Adam::new(&store, 0.1).unwrap();
        adam.step(&mut store);
        assert_eq!(store.get(store.id("w").unwrap()).value().data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_descends() {
        let mut store = quadratic_store(vec![1.0]);
        let mut adam = Adam::new(&store, 0.1).unwrap();
        quadratic_grad(&mut store, &[1.0]);
        adam.step(&mut store);
        let id = store.id("w").unwrap();
        assert!(store.get(id).value().data()[0].abs() < 1.0);
        assert_eq!(store.get(id).grad().data(), &[0.0], "gradients are zeroed");
    }

    #[test]
    fn converges_on_two_dimensional_quadratic() {
        let curvature = [1.0, 4.0];
        let mut store = quadratic_store(vec![1.0, -1.5]);
        let mut adam = Adam::new(&store, 0.05).unwrap();
        for _ in 0..200 {
            quadratic_grad(&mut store, &curvature);
            adam.step(&mut store);
        }
        let grad_norm = quadratic_grad(&mut store, &curvature);
        assert!(grad_norm < 1e-3, "gradient norm {grad_norm}");
    }

    #[test]
    fn rejects_nonpositive_rate() {
        let store = quadratic_store(vec![0.0]);
        assert!(Adam::new(&store, 0.0).is_err());
    }
}
