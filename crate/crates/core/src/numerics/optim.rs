use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay.
///
/// Only parameters that have a gradient entry and belong to a non-frozen
/// group are touched, so frozen groups and unreached parameters stay
/// bit-identical.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.entry(id).name.clone()));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            let decay = 1.0 - c.lr * c.weight_decay;
            for (((pv, gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                if c.weight_decay != 0.0 {
                    *pv *= decay;
                }
                let upd = c.lr * mhat / (vhat.sqrt() + c.eps);
                if upd != 0.0 {
                    *pv -= upd;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", "p.x", Tensor::scalar(value));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = one_param(0.3);
        let before = s.get(id).clone();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut g = Gradients::new(1);
        g.insert(id, Tensor::scalar(0.0));
        for _ in 0..5 {
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(id).data()[0].to_bits(), before.data()[0].to_bits());
        assert_eq!(opt.steps_taken(), 5);
    }

    #[test]
    fn positive_gradient_descends() {
        let (mut s, id) = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-4, ..Default::default() });
        let mut g = Gradients::new(1);
        g.insert(id, Tensor::scalar(1.0));
        opt.step(&mut s, &g).unwrap();
        assert!(s.get(id).item() < 1.0);
    }

    #[test]
    fn quadratic_trajectory_matches_hand_recurrence() {
        // f(x) = (x - 3)², grad = 2(x - 3); three steps against a scalar oracle.
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let (mut s, id) = one_param(0.5);
        let mut opt = AdamW::new(cfg);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let gx = 2.0 * (s.get(id).item() - 3.0);
            let mut g = Gradients::new(1);
            g.insert(id, Tensor::scalar(gx));
            opt.step(&mut s, &g).unwrap();

            let go = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * go;
            v = 0.999 * v + 0.001 * go * go;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x *= 1.0 - 0.1 * 0.01;
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get(id).item() - x).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let (mut s, id) = one_param(2.0);
        s.set_frozen("p", true).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut g = Gradients::new(1);
        g.insert(id, Tensor::scalar(5.0));
        for _ in 0..10 {
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(id).item().to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (mut s, id) = one_param(2.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut g = Gradients::new(1);
        g.insert(id, Tensor::scalar(f64::NAN));
        let err = opt.step(&mut s, &g).unwrap_err();
        assert!(err.to_string().contains("p.x"), "{err}");
    }
}
