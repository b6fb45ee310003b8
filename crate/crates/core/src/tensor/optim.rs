use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<(), TensorError> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for (p, g) in params.values().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::Shape {
                        op: "adam_step",
                        detail: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (step_size, c2_sqrt, eps) = (T::of(lr / c1), T::of(c2.sqrt()), T::of(eps));
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else {
                // m and v still decay.
                for (m, v) in self.first[i].iter_mut().zip(&mut self.second[i]) {
                    *m *= b1;
                    *v *= b2;
                }
                for ((w, m), v) in p.data_mut().iter_mut().zip(&self.first[i]).zip(&self.second[i]) {
                    *w -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
                }
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
