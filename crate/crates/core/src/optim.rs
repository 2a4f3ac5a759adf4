use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Owns its moment buffers; one instance per parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with its gradient and learning rate.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Option<&Tensor<T>>],
        lrs: &[f64],
    ) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, p) in params.into_iter().enumerate() {
            let Some(g) = grads[k] else { continue };
            let lr = lrs[k];
            if lr == 0.0 {
                continue;
            }
            let step = T::from_f64(lr / c1);
            let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
            let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
            let inv_c2 = T::from_f64(1.0 / c2);
            let eps = T::from_f64(self.cfg.eps);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = tb1 * *mi + ob1 * gi;
                *vi = tb2 * *vi + ob2 * gi * gi;
                let denom = (*vi * inv_c2).sqrt() + eps;
                *pi -= step * *mi / denom;
            }
        }
    }
}
