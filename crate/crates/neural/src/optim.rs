use crate::error::{NnError, Result};
use crate::params::ParameterStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn step<T: Real>(&self, store: &mut ParameterStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(NnError::Format(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (a1, a2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape != store.value(id).shape {
                    return Err(NnError::Format(format!(
                        "gradient {:?} for parameter {} of shape {:?}",
                        g.shape,
                        store.name(id),
                        store.value(id).shape
                    )));
                }
            }
            let n = store.value(id).len();
            for k in 0..n {
                let gk = g.map_or(T::zero(), |g| g.data[k]);
                let m = b1 * store.m[i].data[k] + a1 * gk;
                let v = b2 * store.v[i].data[k] + a2 * gk * gk;
                store.m[i].data[k] = m;
                store.v[i].data[k] = v;
                let p = &mut store.value_mut(id).data[k];
                *p -= step_size * m / ((v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParameterStore::<f64>::new();
        store.add("w", Tensor::filled(&[1], 0.5)).unwrap();
        Adam::new(2e-4).step(&mut store, &[Some(Tensor::filled(&[1], 1.0))]).unwrap();
        let moved = store.value(store.id("w").unwrap()).data[0] - 0.5;
        assert!((moved + 2e-4).abs() < 1e-11, "{moved}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParameterStore::<f32>::new();
        store.add("w", Tensor::filled(&[3], 0.25)).unwrap();
        let before = store.value(store.id("w").unwrap()).clone();
        for _ in 0..10 {
            Adam::new(0.0).step(&mut store, &[Some(Tensor::filled(&[3], -3.0))]).unwrap();
        }
        assert_eq!(store.value(store.id("w").unwrap()), &before);
        assert_eq!(store.step(), 10);
    }

    #[test]
    fn gradient_shape_is_checked() {
        let mut store = ParameterStore::<f64>::new();
        store.add("w", Tensor::filled(&[2], 0.0)).unwrap();
        assert!(Adam::new(1.0).step(&mut store, &[Some(Tensor::filled(&[3], 1.0))]).is_err());
    }
}
