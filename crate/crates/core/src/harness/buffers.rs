//! On-policy rollout storage and the off-policy replay ring.

use rand::Rng;

use crate::agents::{gae, AgentError};
use crate::tensor::Tensor;

/// `n_steps × n_envs` transitions, stored step-major.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub n_steps: usize,
    pub n_envs: usize,
    pub obs_len: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub logp: Vec<f64>,
}

/// Flattened, env-major training targets for one rollout.
#[derive(Clone, Debug)]
pub struct RolloutTargets {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(n_steps: usize, n_envs: usize, obs_len: usize) -> Self {
        let cap = n_steps * n_envs;
        Self {
            n_steps,
            n_envs,
            obs_len,
            obs: Vec::with_capacity(cap * obs_len),
            actions: Vec::with_capacity(cap),
            rewards: Vec::with_capacity(cap),
            dones: Vec::with_capacity(cap),
            values: Vec::with_capacity(cap),
            logp: Vec::with_capacity(cap),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.n_steps * self.n_envs
    }

    /// Appends one step for every environment, in instance order.
    #[allow(clippy::too_many_arguments)]
    pub fn push_step(
        &mut self,
        obs: &[f64],
        actions: &[usize],
        rewards: &[f64],
        dones: &[bool],
        values: &[f64],
        logp: &[f64],
    ) -> Result<(), AgentError> {
        let n = self.n_envs;
        if self.is_full() {
            return Err(AgentError::Invalid("rollout buffer is full".into()));
        }
        if obs.len() != n * self.obs_len
            || [actions.len(), rewards.len(), dones.len(), values.len(), logp.len()]
                .iter()
                .any(|&l| l != n)
        {
            return Err(AgentError::Invalid("rollout step has wrong width".into()));
        }
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(actions);
        self.rewards.extend_from_slice(rewards);
        self.dones.extend_from_slice(dones);
        self.values.extend_from_slice(values);
        self.logp.extend_from_slice(logp);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.rewards.clear();
        self.dones.clear();
        self.values.clear();
        self.logp.clear();
    }

    fn column<T: Copy>(&self, v: &[T], env: usize) -> Vec<T> {
        (0..self.n_steps).map(|t| v[t * self.n_envs + env]).collect()
    }

    /// Index into the step-major arrays of the `i`-th env-major sample.
    pub fn flat_index(&self, i: usize) -> usize {
        let (env, t) = (i / self.n_steps, i % self.n_steps);
        t * self.n_envs + env
    }

    /// GAE per environment with the given bootstrap values. Results are
    /// env-major: sample `i` is step `i % n_steps` of env `i / n_steps`.
    pub fn targets(&self, bootstrap: &[f64], gamma: f64, lam: f64) -> Result<RolloutTargets, AgentError> {
        if self.is_empty() {
            return Err(AgentError::EmptyRollout);
        }
        if !self.is_full() {
            return Err(AgentError::Invalid("rollout buffer is not full".into()));
        }
        let mut advantages = Vec::with_capacity(self.len());
        let mut returns = Vec::with_capacity(self.len());
        for (env, &boot) in bootstrap.iter().enumerate().take(self.n_envs) {
            let (a, r) = gae(
                &self.column(&self.rewards, env),
                &self.column(&self.values, env),
                &self.column(&self.dones, env),
                boot,
                gamma,
                lam,
            )?;
            advantages.extend(a);
            returns.extend(r);
        }
        Ok(RolloutTargets {
            advantages,
            returns,
        })
    }

    /// Observations of the given env-major samples as a batch.
    pub fn gather_obs(&self, samples: &[usize], obs_shape: [usize; 3]) -> Tensor {
        let mut data = Vec::with_capacity(samples.len() * self.obs_len);
        for &i in samples {
            let j = self.flat_index(i);
            data.extend_from_slice(&self.obs[j * self.obs_len..(j + 1) * self.obs_len]);
        }
        let [c, h, w] = obs_shape;
        Tensor::new(&[samples.len(), c, h, w], data).expect("obs shape")
    }
}

/// One off-policy transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True terminal; time-limit truncation is stored as `false`.
    pub done: bool,
}

/// Fixed-capacity ring of transitions; the oldest is overwritten once full.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

pub struct ReplayBatch {
    pub obs: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_obs: Tensor,
    pub dones: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        obs_shape: [usize; 3],
        rng: &mut R,
    ) -> Result<ReplayBatch, AgentError> {
        if self.items.len() < batch {
            return Err(AgentError::BufferTooSmall {
                size: self.items.len(),
                batch,
            });
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.items.len())).collect();
        let [c, h, w] = obs_shape;
        let d = self.items[0].action.len();
        let mut obs = Vec::with_capacity(batch * c * h * w);
        let mut next = Vec::with_capacity(batch * c * h * w);
        let mut actions = Vec::with_capacity(batch * d);
        let mut rewards = Vec::with_capacity(batch);
        let mut dones = Vec::with_capacity(batch);
        for &i in &idx {
            let t = &self.items[i];
            obs.extend_from_slice(&t.obs);
            next.extend_from_slice(&t.next_obs);
            actions.extend_from_slice(&t.action);
            rewards.push(t.reward);
            dones.push(t.done);
        }
        Ok(ReplayBatch {
            obs: Tensor::new(&[batch, c, h, w], obs)?,
            actions: Tensor::new(&[batch, d], actions)?,
            rewards,
            next_obs: Tensor::new(&[batch, c, h, w], next)?,
            dones,
        })
    }
}
