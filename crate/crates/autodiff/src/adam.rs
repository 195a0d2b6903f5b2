use crate::{ParamId, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `step` is the
/// 1-based update count.
pub fn adam_update<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], cfg: &AdamConfig, step: u64) {
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam optimizer over a fixed group of parameters of one store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let m = params
            .iter()
            .map(|&id| vec![T::zero(); store.value(id).len()])
            .collect::<Vec<_>>();
        Adam {
            cfg,
            v: m.clone(),
            m,
            params,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update from the current gradient buffers, then zeroes
    /// the gradients of this group.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        for (k, &id) in self.params.iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            adam_update(
                value.data_mut(),
                grad.data(),
                &mut self.m[k],
                &mut self.v[k],
                &self.cfg,
                self.step,
            );
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }
}
