use ndarray::Array2;
use super::{ParamId, ParamStore};
use crate::error::{DpmsError, Result};

/// Adam optimizer state for every block of a [`ParamStore`].
///
/// The accumulated gradient in the store is treated as the gradient of the
/// objective to *maximize*; updates move along `+grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.blocks().map(|(_, b)| Array2::zeros(b.values().raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clears moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            a.fill(0.0);
        }
    }

    /// One ascent step on every unfrozen block using the store's gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(DpmsError::Invalid(format!(
                "optimizer tracks {} blocks, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..store.len() {
            let id = ParamId(i);
            if store.is_frozen(id) {
                continue;
            }
            let grad = store.grad(id).clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.dim() != grad.dim() {
                let (r, c) = m.dim();
                let (gr, gc) = grad.dim();
                return Err(DpmsError::shape(format!("adam state for {}", store.block(id).name()), &[r, c], &[gr, gc]));
            }
            let values = store.values_mut(id);
            ndarray::Zip::from(values)
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|x, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *x += lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(x: Array2<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", x).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let (mut s, id) = store_with(array![[1.5, -2.0]]);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.values(id), &array![[1.5, -2.0]]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // maximizing -x²/2 at x = 1 gives gradient -1; bias-corrected step is -lr
        let (mut s, id) = store_with(array![[1.0]]);
        let mut adam = AdamState::new(&s);
        let mut g = super::super::Gradients::default();
        g.insert(id, array![[-1.0]]);
        s.accumulate(&g).unwrap();
        adam.step(&mut s, 0.1).unwrap();
        assert!((s.values(id)[[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let (mut s, id) = store_with(array![[0.0]]);
        let mut adam = AdamState::new(&s);
        for _ in 0..2000 {
            s.zero_grads();
            let x = s.values(id)[[0, 0]];
            let mut g = super::super::Gradients::default();
            g.insert(id, array![[-(x - 3.0)]]);
            s.accumulate(&g).unwrap();
            adam.step(&mut s, 0.05).unwrap();
        }
        assert!((s.values(id)[[0, 0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let (mut s, id) = store_with(array![[1.0]]);
        s.set_frozen(id, true);
        let mut adam = AdamState::new(&s);
        let mut g = super::super::Gradients::default();
        g.insert(id, array![[5.0]]);
        s.accumulate(&g).unwrap();
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.values(id)[[0, 0]], 1.0);
    }
}
