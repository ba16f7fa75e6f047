//! Adam per parameter group, gradient clipping, and Polyak averaging.

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::tensor::{Gradients, ParamGroup, ParamId, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Adam over the parameters of one group. Gradients for parameters of
/// other groups are ignored.
#[derive(Clone, Debug)]
pub struct Adam {
    pub group: ParamGroup,
    pub cfg: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    steps: u64,
}

impl Adam {
    pub fn new(group: ParamGroup, cfg: AdamConfig) -> Self {
        Self {
            group,
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.params() {
            if store.group(id) != self.group {
                continue;
            }
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}

/// Applies each optimizer to its gradients. Every gradient set must have
/// been recorded against the store's current version; nothing is mutated
/// if any is stale.
pub fn apply_updates(
    store: &mut ParamStore,
    updates: &mut [(&mut Adam, &Gradients)],
) -> Result<(), AgentError> {
    let current = store.version();
    for (_, g) in updates.iter() {
        if let Some(recorded) = g.version() {
            if recorded != current {
                return Err(TensorError::StaleGradients { recorded, current }.into());
            }
        }
        for (id, t) in g.params() {
            if !t.is_finite() {
                return Err(AgentError::NonFinite(match store.group(id) {
                    ParamGroup::Generator => "generator gradient",
                    ParamGroup::Critic => "critic gradient",
                    _ => "gradient",
                }));
            }
        }
    }
    for (opt, g) in updates.iter_mut() {
        opt.step(store, g);
    }
    Ok(())
}

/// `target ← (1 − τ)·target + τ·online` for each pair.
pub fn polyak_update(store: &mut ParamStore, pairs: &[(ParamId, ParamId)], tau: f64) {
    for &(online, target) in pairs {
        let src = store.get(online).clone();
        let dst = store.get_mut(target);
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = (1.0 - tau) * *d + tau * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic(store: &ParamStore, id: ParamId) -> (f64, Gradients) {
        let mut tape = Tape::new();
        let x = tape.param(store, id);
        let c = tape.constant(Tensor::from_vec(vec![1.0, -2.0]));
        let d = tape.sub(x, c).unwrap();
        let sq = tape.square(d).unwrap();
        let loss = tape.sum(sq).unwrap();
        let value = tape.value(loss).item();
        (value, tape.backward(loss).unwrap())
    }

    #[test]
    fn adam_step_decreases_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Actor, Tensor::from_vec(vec![3.0, 3.0]));
        let mut opt = Adam::new(ParamGroup::Actor, AdamConfig::with_lr(0.1));
        let (before, g) = quadratic(&store, id);
        apply_updates(&mut store, &mut [(&mut opt, &g)]).unwrap();
        let (after, _) = quadratic(&store, id);
        assert!(after < before);
    }

    #[test]
    fn stale_gradients_are_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Actor, Tensor::from_vec(vec![0.0, 0.0]));
        let mut opt = Adam::new(ParamGroup::Actor, AdamConfig::with_lr(0.1));
        let (_, g) = quadratic(&store, id);
        apply_updates(&mut store, &mut [(&mut opt, &g)]).unwrap();
        let snapshot = store.get(id).clone();
        let err = apply_updates(&mut store, &mut [(&mut opt, &g)]).unwrap_err();
        assert!(matches!(err, AgentError::Tensor(TensorError::StaleGradients { .. })));
        assert_eq!(store.get(id), &snapshot);
    }

    #[test]
    fn other_groups_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Generator, Tensor::from_vec(vec![3.0, 3.0]));
        let mut opt = Adam::new(ParamGroup::Actor, AdamConfig::with_lr(0.1));
        let (_, g) = quadratic(&store, id);
        apply_updates(&mut store, &mut [(&mut opt, &g)]).unwrap();
        assert_eq!(store.get(id).data(), &[3.0, 3.0]);
    }

    #[test]
    fn polyak_exact() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Critic, Tensor::from_vec(vec![1.0, 2.0]));
        let t = store.add("t", ParamGroup::Target, Tensor::from_vec(vec![-1.0, 0.5]));
        polyak_update(&mut store, &[(a, t)], 0.01);
        let want = [0.99 * -1.0 + 0.01 * 1.0, 0.99 * 0.5 + 0.01 * 2.0];
        for (x, w) in store.get(t).data().iter().zip(want) {
            assert!((x - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Actor, Tensor::from_vec(vec![30.0, 30.0]));
        let (_, mut g) = quadratic(&store, id);
        let before = clip_grad_norm(&mut g, 0.5);
        assert!(before > 0.5);
        assert!((g.norm() - 0.5).abs() < 1e-9);
    }
}
