//! ADAM with bias correction.

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;

#[derive(Copy, Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One optimizer step over every parameter named in `grads`. The shared step
/// count increments exactly once per call. Keys must name trainable entries
/// of the store with matching shapes.
pub fn adam_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: &AdamConfig,
) -> Result<()> {
    let t = store.bump_step();
    let beta1 = T::from_f64(cfg.beta1);
    let beta2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);

    for (path, grad) in grads {
        let entry = store.entry_mut(path)?;
        if !entry.trainable {
            return Err(NnError::InvalidArgument(format!(
                "gradient supplied for frozen parameter {path:?}"
            )));
        }
        if grad.shape() != entry.value.shape() {
            return Err(NnError::ShapeMismatch {
                context: "adam_step gradient",
                expected: entry.value.shape().to_vec(),
                actual: grad.shape().to_vec(),
            });
        }
        let shape = entry.value.shape().to_vec();
        let m = entry.m.get_or_insert_with(|| Tensor::zeros(&shape));
        let v = entry.v.get_or_insert_with(|| Tensor::zeros(&shape));
        let gd = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        let pd = entry.value.data_mut();
        for i in 0..gd.len() {
            let g = gd[i];
            md[i] = beta1 * md[i] + (one - beta1) * g;
            vd[i] = beta2 * vd[i] + (one - beta2) * g * g;
            let m_hat = md[i] / corr1;
            let v_hat = vd[i] / corr2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(path: &str, vals: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(path, Tensor::from_vec(vals), true);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with("w", vec![1.5, -2.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![0.0, 0.0]));
        for _ in 0..5 {
            adam_step(&mut s, &grads, &AdamConfig::with_lr(0.1)).unwrap();
        }
        assert_eq!(s.value("w").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(s.step(), 5);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut s = store_with("w", vec![0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![1.0]));
        adam_step(&mut s, &grads, &AdamConfig::with_lr(5e-4)).unwrap();
        let w = s.value("w").unwrap().data()[0];
        assert!((w + 5e-4).abs() < 1e-10, "update magnitude {w}");
    }

    #[test]
    fn matches_scalar_adam_oracle_on_quadratic() {
        // f(w) = w^2, grad = 2w, from w=1 with lr=0.1, three steps.
        let cfg = AdamConfig::with_lr(0.1);
        let mut s = store_with("w", vec![1.0]);

        // independent scalar reimplementation
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3u32 {
            let g = 2.0 * w;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);

            let cur = s.value("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::from_vec(vec![2.0 * cur]));
            adam_step(&mut s, &grads, &cfg).unwrap();
        }
        let got = s.value("w").unwrap().data()[0];
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }

    #[test]
    fn deterministic_given_identical_state() {
        let run = || {
            let mut s = store_with("w", vec![0.3, -0.9, 2.2]);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::from_vec(vec![0.1, -0.4, 0.7]));
            for _ in 0..10 {
                adam_step(&mut s, &grads, &AdamConfig::with_lr(0.01)).unwrap();
            }
            s.value("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_frozen_and_missing_parameters() {
        let mut s = ParamStore::new();
        s.insert("frozen", Tensor::from_vec(vec![1.0]), false);
        let mut grads = BTreeMap::new();
        grads.insert("frozen".to_string(), Tensor::from_vec(vec![1.0]));
        assert!(adam_step(&mut s, &grads, &AdamConfig::with_lr(0.1)).is_err());
        let mut grads = BTreeMap::new();
        grads.insert("nope".to_string(), Tensor::from_vec(vec![1.0]));
        assert!(adam_step(&mut s, &grads, &AdamConfig::with_lr(0.1)).is_err());
    }
}
