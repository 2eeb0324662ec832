use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.lr.is_finite()
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Array2::zeros(store.get(id).raw_dim()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters are left untouched when a gradient entry is not
    /// finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "gradient layout does not match the parameters",
            ));
        }
        if !grads.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch: None,
                reason: "non-finite gradient".into(),
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.get(id);
            let lower = store.lower_bound(id);
            Zip::from(store.get_mut(id))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p *= decay;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    if let Some(lo) = lower {
                        *p = p.max(lo);
                    }
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", array![[1.0, -2.0], [0.5, 3.0]]);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &s);
        let g = Gradients::zeros(&s);
        for _ in 0..10 {
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn decay_is_geometric() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let g = Gradients::zeros(&s);
        for _ in 0..5 {
            opt.step(&mut s, &g).unwrap();
        }
        let f = (1.0f64 - 1e-3 * 5e-4).powi(5);
        for (a, b) in s
            .get(s.ids().next().unwrap())
            .iter()
            .zip(before.get(before.ids().next().unwrap()))
        {
            assert!((a - b * f).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let mut g = Gradients::zeros(&s);
        let mut bad = Gradients::zeros(&s);
        bad.scale(f64::NAN);
        g.add_assign(&bad);
        assert!(matches!(
            opt.step(&mut s, &g),
            Err(Error::TrainingDiverged { .. })
        ));
        assert_eq!(s, before);
    }
}
