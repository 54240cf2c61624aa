//! SGD with momentum, weight decay on convolution weights, and the poly schedule.

use crate::error::{Error, Result};
use crate::network::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `base * (1 - iter / total)^power`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> f64 {
    debug_assert!(total > 0 && iter <= total);
    base * (1.0 - iter as f64 / total as f64).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Poly { power: f64 },
    Constant,
}

#[derive(Clone, Debug)]
pub struct OptimState<T> {
    velocities: Vec<Option<Tensor<T>>>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub iter: usize,
    pub total: usize,
}

impl<T: Scalar> OptimState<T> {
    /// Defaults: momentum 0.9, weight decay 1e-4, poly power 0.9.
    pub fn new(base_lr: f64, total: usize) -> Self {
        OptimState {
            velocities: Vec::new(),
            base_lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Poly { power: 0.9 },
            iter: 0,
            total,
        }
    }

    /// Learning rate for the next step.
    pub fn lr(&self) -> f64 {
        match self.schedule {
            Schedule::Poly { power } => poly_lr(self.iter.min(self.total), self.total, self.base_lr, power),
            Schedule::Constant => self.base_lr,
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocities.get(id.index()).and_then(Option::as_ref)
    }
}

/// One update of every trainable parameter:
/// `v <- momentum * v + grad + decay * param`, `param <- param - lr * v`.
/// Parameters without a gradient are treated as having a zero gradient.
/// Returns the learning rate that was used.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], state: &mut OptimState<T>) -> Result<f64> {
    if state.iter >= state.total {
        return Err(Error::Invalid(format!("optimizer already ran {} of {} steps", state.iter, state.total)));
    }
    let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
    for (id, g) in grads {
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {} {:?}",
                g.shape(),
                store.entry(*id).name,
                store.get(*id).shape()
            )));
        }
        by_id[id.index()] = Some(g);
    }
    state.velocities.resize(store.len(), None);
    let lr = state.lr();
    let (lr_t, m, wd) = (T::lit(lr), T::lit(state.momentum), T::lit(state.weight_decay));
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let kind = store.entry(id).kind;
        if !kind.trainable() {
            continue;
        }
        let decay = kind.decays() && state.weight_decay != 0.0;
        let param = store.get_mut(id);
        let v = state.velocities[id.index()].get_or_insert_with(|| Tensor::zeros(param.shape()));
        let grad = by_id[id.index()];
        for (i, (vi, p)) in v.data_mut().iter_mut().zip(param.data_mut()).enumerate() {
            let mut g = grad.map_or(T::zero(), |g| g.data()[i]);
            if decay {
                g = g + wd * *p;
            }
            *vi = m * *vi + g;
            *p = *p - lr_t * *vi;
        }
    }
    state.iter += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::ParamKind;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.push("w", ParamKind::Weight, Tensor::scalar(v));
        (store, id)
    }

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0, 100, 1e-3, 0.9), 1e-3);
        assert_eq!(poly_lr(100, 100, 1e-3, 0.9), 0.0);
        assert!((poly_lr(50, 100, 1e-3, 0.9) - 5.35887e-4).abs() < 1e-9);
    }

    #[test]
    fn hand_iterated_momentum() {
        let (mut store, id) = scalar_store(1.0);
        let mut st = OptimState::new(0.1, 10);
        st.schedule = Schedule::Constant;
        st.weight_decay = 0.0;
        let grad = vec![(id, Tensor::scalar(1.0))];
        sgd_step(&mut store, &grad, &mut st).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-12);
        sgd_step(&mut store, &grad, &mut st).unwrap();
        assert!((store.get(id).data()[0] - 0.71).abs() < 1e-12);
        assert_eq!(st.iter, 2);
    }

    #[test]
    fn stepping_past_total_is_an_error() {
        let (mut store, _) = scalar_store(1.0);
        let mut st = OptimState::new(0.1, 1);
        sgd_step(&mut store, &[], &mut st).unwrap();
        assert!(sgd_step(&mut store, &[], &mut st).is_err());
    }

    #[test]
    fn gradient_shape_is_checked() {
        let (mut store, id) = scalar_store(1.0);
        let mut st = OptimState::new(0.1, 5);
        assert!(sgd_step(&mut store, &[(id, Tensor::zeros(&[2]))], &mut st).is_err());
    }
}
