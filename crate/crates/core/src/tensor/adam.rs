use super::{DenseMatrix, Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |p: &DenseMatrix| DenseMatrix::zeros(p.rows(), p.cols());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store.iter().map(|(_, _, p)| zeros(p)).collect(),
            second: store.iter().map(|(_, _, p)| zeros(p)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter for which `active` returns true.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        active: impl Fn(ParamId) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.first.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if store.get(id).shape() != g.shape() || self.first[id.0].shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !active(id) {
                continue;
            }
            let m = self.first[id.0].values_mut();
            let v = self.second[id.0].values_mut();
            let p = store.get_mut(id).values_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(g.values()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic_grads(store: &ParamStore, id: ParamId) -> (f64, Gradients) {
        let mut tape = Tape::new();
        let w = tape.param(store, id);
        let loss = tape.sum_squares(w);
        (tape.scalar(loss), tape.backward(loss, store).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", DenseMatrix::row_vector(&[0.3, -2.0]));
        let before = store.get(id).clone();
        let mut adam = AdamState::new(&store, 0.1);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let zero = tape.scale(w, 0.0);
        let loss = tape.sum(zero);
        let grads = tape.backward(loss, &store).unwrap();
        adam.step(&mut store, &grads, |_| true).unwrap();
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn first_step_magnitude() {
        let mut store = ParamStore::new();
        let id = store.add("w", DenseMatrix::row_vector(&[1.0, -0.5, 2.0]));
        let before = store.get(id).clone();
        let mut adam = AdamState::new(&store, 0.05);
        let (_, grads) = quadratic_grads(&store, id);
        adam.step(&mut store, &grads, |_| true).unwrap();
        for ((b, a), g) in before.values().iter().zip(store.get(id).values()).zip(grads.get(id).values()) {
            let expected = 0.05 * g / (g.abs() + 1e-8);
            assert!(((b - a) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", DenseMatrix::filled(1, 4, 1.0));
        let mut adam = AdamState::new(&store, 0.05);
        for _ in 0..200 {
            let (_, grads) = quadratic_grads(&store, id);
            adam.step(&mut store, &grads, |_| true).unwrap();
        }
        let norm = store.get(id).frobenius();
        assert!(norm < 1e-2, "norm {norm}");
        assert_eq!(adam.steps_taken(), 200);
    }

    #[test]
    fn inactive_params_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", DenseMatrix::filled(1, 2, 1.0));
        let b = store.add("b", DenseMatrix::filled(1, 2, 1.0));
        let mut adam = AdamState::new(&store, 0.1);
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let s = tape.add(va, vb).unwrap();
        let loss = tape.sum_squares(s);
        let grads = tape.backward(loss, &store).unwrap();
        adam.step(&mut store, &grads, |id| id == a).unwrap();
        assert_eq!(store.get(b), &DenseMatrix::filled(1, 2, 1.0));
        assert_ne!(store.get(a), &DenseMatrix::filled(1, 2, 1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("w", DenseMatrix::filled(1, 2, 1.0));
        let (_, grads) = quadratic_grads(&store, id);
        let mut other = ParamStore::new();
        other.add("w", DenseMatrix::filled(2, 2, 1.0));
        let mut adam = AdamState::new(&other, 0.1);
        assert!(matches!(adam.step(&mut other, &grads, |_| true), Err(Error::Shape(_))));
    }
}
