//! Adaptive-moment optimiser and the step-halving schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: AdamParams) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            params,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; parameters whose gradient is `None` are untouched
    /// (their moments are not decayed either).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for ((p, g), (m, v)) in store
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

/// Step size at `step` of `total`: `base * decay^(floor(3 step / total))`,
/// i.e. multiplied by `decay` at each third of training.
pub fn scheduled_lr(base: f64, decay: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let k = (3 * step / total).min(2);
    base * libm::pow(decay, k as f64)
}

/// Sums per-sample gradient lists element-wise, keeping `None` where no
/// sample produced a gradient.
pub fn accumulate_grads(acc: &mut Vec<Option<Tensor>>, add: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = add;
        return;
    }
    for (a, b) in acc.iter_mut().zip(add) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => a.add_assign(&b),
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

pub fn scale_grads(grads: &mut [Option<Tensor>], s: f64) {
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new(0);
        store.insert("p", Tensor::from_vec(&[3], alloc::vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(&store, AdamParams::default());
        let g = Tensor::from_vec(&[3], alloc::vec![4.0, -0.1, 0.0]).unwrap();
        opt.update(&mut store, &[Some(g)], 0.01).unwrap();
        let p = store.iter().next().unwrap().2.data().to_vec();
        assert!((p[0] - 0.99).abs() < 1e-8);
        assert!((p[1] + 1.99).abs() < 1e-8);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new(0);
        let id = store.insert("p", Tensor::scalar(5.0));
        let mut opt = Adam::new(&store, AdamParams::default());
        for _ in 0..2000 {
            let x = store.get(id).data()[0];
            opt.update(&mut store, &[Some(Tensor::scalar(2.0 * (x - 1.0)))], 0.05).unwrap();
        }
        assert!((store.get(id).data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn schedule_halves_each_third() {
        assert_eq!(scheduled_lr(1e-4, 0.5, 0, 300), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 0.5, 99, 300), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 0.5, 100, 300), 5e-5);
        assert_eq!(scheduled_lr(1e-4, 0.5, 299, 300), 2.5e-5);
        assert_eq!(scheduled_lr(1e-4, 0.5, 300, 300), 2.5e-5);
    }
}
