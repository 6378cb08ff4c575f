use ndarray::Array2;

use crate::autograd::Gradients;
use crate::params::ParamStore;

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, indexed by parameter id.
    pub moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, clip: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            clip,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> f64 {
        let ids: Vec<_> = store.trainable_ids().collect();
        let norm = ids
            .iter()
            .filter_map(|&id| grads.param(id))
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in ids {
            let Some(grad) = grads.param(id) else { continue };
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                let shape = grad.raw_dim();
                (Array2::zeros(shape), Array2::zeros(shape))
            });
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 2), 3.0));
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let l = g.sum_squared_diff(w, Array2::from_elem((1, 2), -1.0));
            let grads = g.backward(l);
            adam.step(&mut store, &grads, 0.01);
        }
        assert!(store.value(id).iter().all(|v| (v + 1.0).abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 0.0));
        let mut adam = Adam::new(0.9, 0.999, 0.0, 0.0);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let l = g.sum_squared_diff(w, Array2::from_elem((1, 1), 5.0));
        let grads = g.backward(l);
        adam.step(&mut store, &grads, 0.1);
        assert!((store.value(id)[[0, 0]] - 0.1).abs() < 1e-12);
    }
}
