//! Adaptive-moment optimizer shared by the codec and the forecaster.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::dit::ParamStore;
use crate::tape::Real;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
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

/// Adam with per-parameter moment buffers keyed by name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.step_count += 1;
        let b1 = T::cast_f64(self.config.beta1);
        let b2 = T::cast_f64(self.config.beta2);
        let one = T::one();
        let eps = T::cast_f64(self.config.eps);
        let bc1 = T::cast_f64(1.0 - self.config.beta1.powi(self.step_count as i32));
        let bc2 = T::cast_f64(1.0 - self.config.beta2.powi(self.step_count as i32));
        let lr_t = T::cast_f64(lr);

        for name in params.names() {
            let grad = params.grad(&name).clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.shape().to_vec()));
            m.zip_mut_with(&grad, |m, &g| *m = b1 * *m + (one - b1) * g);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.shape().to_vec()));
            v.zip_mut_with(&grad, |v, &g| *v = b2 * *v + (one - b2) * g * g);

            let m = self.m[&name].clone();
            let v = self.v[&name].clone();
            let value = params.value_mut(&name);
            ndarray::Zip::from(value)
                .and(&m)
                .and(&v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Cosine decay from `lr` to `lr * floor_frac` over `total` steps, with a
/// linear warmup over the first `warmup` steps.
pub fn cosine_lr(step: u64, total: u64, lr: f64, warmup: u64, floor_frac: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    if step < warmup {
        return lr * (step + 1) as f64 / warmup.max(1) as f64;
    }
    let t = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
    lr * (floor_frac + (1.0 - floor_frac) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = ParamStore::<f64>::new();
        params
            .insert("w", ArrayD::from_elem(vec![3], 1.0))
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            params.zero_grads();
            // grad of 0.5 * w^2 is w
            let g = params.value("w").clone();
            params.add_to_grad("w", &g);
            adam.step(&mut params, 0.05);
        }
        assert!(params.value("w").iter().all(|&w| w.abs() < 0.2));
    }

    #[test]
    fn cosine_schedule_shape() {
        let lr = 1e-3;
        assert!(cosine_lr(0, 1000, lr, 100, 0.05) < lr * 0.02);
        assert!((cosine_lr(100, 1000, lr, 100, 0.05) - lr).abs() < 1e-9);
        let end = cosine_lr(999, 1000, lr, 100, 0.05);
        assert!(end > 0.04 * lr && end < 0.06 * lr, "end lr {end}");
    }
}
