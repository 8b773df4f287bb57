//! Adam optimizer with optional global-norm gradient clipping.

use crate::element::Element;
use crate::store::ParamStore;
use ndarray::ArrayD;

pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T: Element> {
    cfg: AdamConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    steps: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, a)| ArrayD::zeros(a.shape())).collect();
        let v = store.iter().map(|(_, a)| ArrayD::zeros(a.shape())).collect();
        Adam {
            cfg,
            m,
            v,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` is the gradient for parameter `i` (missing
    /// entries are treated as zero and skipped).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<ArrayD<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.steps as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.steps as i32));
        let lr_t = T::from_f64(lr);

        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (one - b1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (one - b2) * gi * gi);
            let p = store.get_mut(crate::tensor::ParamId(i));
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi = *pi - lr_t * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Serialize moment buffers alongside model parameters.
    pub fn state_arrays(&self, store: &ParamStore<T>) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, (name, _)) in store.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.v[i].clone()));
        }
        out.push((
            "adam.steps".to_string(),
            ArrayD::from_elem(vec![1], T::from_f64(self.steps as f64)),
        ));
        out
    }

    pub fn restore_state(&mut self, store: &ParamStore<T>, arrays: &[(String, ArrayD<T>)]) {
        let map: std::collections::HashMap<&str, &ArrayD<T>> =
            arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for (i, (name, _)) in store.iter().enumerate() {
            if let Some(a) = map.get(format!("adam.m.{name}").as_str()) {
                self.m[i] = (*a).clone();
            }
            if let Some(a) = map.get(format!("adam.v.{name}").as_str()) {
                self.v[i] = (*a).clone();
            }
        }
        if let Some(a) = map.get("adam.steps") {
            self.steps = a[[0]].as_f64() as u64;
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Element>(grads: &mut [Option<ArrayD<T>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        sq += g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
