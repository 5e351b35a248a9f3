//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
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

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub config: AdamConfig,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { step: 0, config, moments: BTreeMap::new() }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }
}

/// One Adam update. Gradients of frozen groups are ignored; a non-finite
/// gradient aborts the step before any parameter is touched.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
) -> Result<()> {
    for (id, g) in grads {
        if g.shape() != store.get(*id).shape() {
            return Err(shape_err(
                "adam_step",
                format!("gradient {:?} for {} {:?}", g.shape(), store.full_name(*id), store.get(*id).shape()),
            ));
        }
        if !g.all_finite() {
            return Err(NnError::NonFinite { context: format!("gradient of {}", store.full_name(*id)) });
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::one() - T::lit(c.beta1.powi(t));
    let bc2 = T::one() - T::lit(c.beta2.powi(t));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

    for (id, g) in grads {
        if store.is_frozen(*id) {
            continue;
        }
        let shape = g.shape().to_vec();
        let (m, v) = state
            .moments
            .entry(*id)
            .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
        let p = store.get_mut(*id).data_mut();
        for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let g = s.add_group("p").unwrap();
        let id = s.add(g, "x", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn hand_evaluated_first_step() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam_step(&mut s, &[(id, Tensor::scalar(1.0))], &mut st).unwrap();
        assert_eq!(st.step, 1);
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((s.get(id).item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st).unwrap();
        assert_eq!(s.get(id).item(), 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = scalar_store(0.5);
        let mut st = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut s, &[(id, Tensor::scalar(f64::NAN))], &mut st).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { .. }));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(id).item(), 0.5);
    }

    #[test]
    fn frozen_group_is_untouched() {
        let (mut s, id) = scalar_store(0.5);
        s.set_frozen("p", true).unwrap();
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &[(id, Tensor::scalar(3.0))], &mut st).unwrap();
        assert_eq!(s.get(id).item(), 0.5);
    }
}
