//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-10,
            weight_decay: 1e-4,
        }
    }
}

/// One Adam update of `param` in place. `t` is the 1-based step count.
pub fn adam_update(
    cfg: &AdamConfig,
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Domain("Adam step count starts at 1".into()));
    }
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(Error::shape("adam_step", param.shape(), other));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    let (p, g) = (param.data_mut(), grad.data());
    let (m, v) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one step to every parameter in `store`. Parameters that did
    /// not take part in the graph are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = match grads.get(bound[id]) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            };
            adam_update(&self.cfg, store.get_mut(id), &grad, &mut self.m[i], &mut self.v[i], self.t, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_uses_raw_gradient() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let (mut m, mut v) = (Tensor::zeros(vec![2]), Tensor::zeros(vec![2]));
        adam_update(&cfg, &mut p, &g, &mut m, &mut v, 1, 0.1).unwrap();
        // m̂ = g, v̂ = g², so each coordinate moves by lr·sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-9);
        assert!((p.data()[1] + 0.9).abs() < 1e-9);
        assert!((m.data()[0] / (1.0 - 0.9) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let (mut m, mut v) = (Tensor::zeros(vec![1]), Tensor::zeros(vec![1]));
        adam_update(&cfg, &mut p, &Tensor::zeros(vec![1]), &mut m, &mut v, 1, 0.01).unwrap();
        assert_eq!(p.data()[0], 2.0 * (1.0 - 0.01 * 1e-4));
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::zeros(vec![1]);
        let g = Tensor::full(vec![1], 3.0);
        let (mut m, mut v) = (Tensor::zeros(vec![1]), Tensor::zeros(vec![1]));
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p.data()[0];
            adam_update(&cfg, &mut p, &g, &mut m, &mut v, t, 1e-3).unwrap();
            last = before - p.data()[0];
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn shape_and_step_checks() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::zeros(vec![2]);
        let (mut m, mut v) = (Tensor::zeros(vec![2]), Tensor::zeros(vec![2]));
        assert!(matches!(
            adam_update(&cfg, &mut p, &Tensor::zeros(vec![3]), &mut m, &mut v, 1, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(adam_update(&cfg, &mut p, &Tensor::zeros(vec![2]), &mut m, &mut v, 0, 0.1).is_err());
    }
}
