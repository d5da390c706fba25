//! Adam.

use crate::error::{shape_err, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam state: one pair of moment tensors per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. `grads` is in store order; `None` leaves the
    /// parameter and its moments untouched.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err(
                "adam",
                format!("{} gradients and {} moments for {} parameters", grads.len(), self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (i, (id, trainable)) in ids.into_iter().enumerate() {
            let Some(g) = grads[i].as_ref().filter(|_| trainable) else {
                continue;
            };
            let value = store.value_mut(id);
            if g.shape() != value.shape() {
                return Err(shape_err("adam", format!("gradient {:?} for parameter {:?}", g.shape(), value.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g as f64;
                let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
                let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + EPSILON);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap(), true).unwrap();
        let mut adam = Adam::new(&store);
        let g = Tensor::from_f64([3], &[0.5, -2.0, 0.0]).unwrap();
        adam.update(&mut store, &[Some(g)], 0.1).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn frozen_and_missing_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones([2]), false).unwrap();
        let b = store.add("b", Tensor::ones([2]), true).unwrap();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Some(Tensor::ones([2])), None], 0.1).unwrap();
        assert_eq!(store.get(a).value.data(), &[1.0, 1.0]);
        assert_eq!(store.get(b).value.data(), &[1.0, 1.0]);
        assert!(adam.update(&mut store, &[None], 0.1).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_f64([2], &[3.0, -4.0]).unwrap(), true).unwrap();
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let g = store.get(id).value.clone();
            adam.update(&mut store, &[Some(g)], 0.05).unwrap();
        }
        assert!(store.get(id).value.data().iter().all(|v| v.abs() < 1e-2));
    }
}
