use std::collections::BTreeMap;

use crate::scalar::Real;

use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// First and second moment accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Number of updates this parameter has received.
    pub t: u64,
}

/// Adam with bias correction over a fixed set of parameters.
///
/// Each parameter keeps its own step count, so a subset can be stepped while
/// the rest stay untouched and their bias correction stays exact.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total number of `step` calls.
    pub steps: u64,
    slots: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(name: impl Into<String>, store: &ParamStore<T>, params: &[ParamId]) -> Self {
        let slots = params
            .iter()
            .map(|&id| {
                let shape = store.value(id).shape();
                (
                    id,
                    Moments {
                        m: Tensor::zeros(shape),
                        v: Tensor::zeros(shape),
                        t: 0,
                    },
                )
            })
            .collect();
        Self {
            name: name.into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            slots,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    pub fn owns(&self, id: ParamId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<T>> {
        self.slots.get(&id)
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, moments: Moments<T>) -> Result<(), AutodiffError> {
        let slot = self.slots.get_mut(&id).ok_or_else(|| {
            AutodiffError::InvalidArgument(format!("optimizer {} does not own parameter {}", self.name, id.0))
        })?;
        if slot.m.shape() != moments.m.shape() || slot.v.shape() != moments.v.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_moments",
                lhs: slot.m.shape().to_vec(),
                rhs: moments.m.shape().to_vec(),
            });
        }
        *slot = moments;
        Ok(())
    }

    /// Applies one Adam update with learning rate `lr` to `params`, which must
    /// all be owned by this optimizer. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore<T>, params: &[ParamId], lr: f64) -> Result<(), AutodiffError> {
        for id in params {
            if !self.slots.contains_key(id) {
                return Err(AutodiffError::InvalidArgument(format!(
                    "optimizer {} does not own parameter {}",
                    self.name,
                    store.name(*id)
                )));
            }
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps, lr) = (T::one(), T::lit(self.eps), T::lit(lr));
        for id in params {
            let slot = self.slots.get_mut(id).expect("checked above");
            slot.t += 1;
            let bc1 = one - b1.powi(slot.t as i32);
            let bc2 = one - b2.powi(slot.t as i32);
            let p = store.get_mut(*id);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for k in 0..value.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamGroup;

    fn single(g: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", ParamGroup::Other, Tensor::vector(&[1.0])).unwrap();
        store.get_mut(id).grad = Tensor::vector(&[g]);
        (store, id)
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let (mut store, id) = single(0.5);
        let mut adam = AdamState::new("field", &store, &[id]);
        adam.step(&mut store, &[id], 0.001).unwrap();
        let delta = store.value(id).item() - 1.0;
        // t = 1: m_hat = g, v_hat = g^2
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
        assert!((delta + 0.000999998).abs() < 1e-8);
        assert_eq!(adam.steps, 1);
        assert_eq!(adam.moments(id).unwrap().t, 1);
    }

    #[test]
    fn zero_grad_is_identity() {
        let (mut store, id) = single(0.0);
        let mut adam = AdamState::new("field", &store, &[id]);
        for _ in 0..5 {
            adam.step(&mut store, &[id], 0.001).unwrap();
        }
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn repeated_grad_does_not_grow_step() {
        let (mut store, id) = single(0.3);
        let mut adam = AdamState::new("field", &store, &[id]);
        adam.step(&mut store, &[id], 0.001).unwrap();
        let d1 = (store.value(id).item() - 1.0).abs();
        let before = store.value(id).item();
        adam.step(&mut store, &[id], 0.001).unwrap();
        let d2 = (store.value(id).item() - before).abs();
        assert!(d2 <= d1 + 1e-12);
    }

    #[test]
    fn foreign_parameter_rejected() {
        let (mut store, id) = single(0.1);
        let other = store.insert("u", ParamGroup::Other, Tensor::vector(&[0.0])).unwrap();
        let mut adam = AdamState::new("pose", &store, &[id]);
        assert!(adam.step(&mut store, &[other], 0.1).is_err());
        assert_eq!(adam.steps, 0);
    }
}
