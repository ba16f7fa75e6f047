//! Clipped-ratio policy optimization with a shared-encoder value head.

use rand::Rng;

use super::dist::PolicyDist;
use super::encoder::{Encoder, EncoderConfig};
use super::layers::{init_linear, Linear};
use super::AgentError;
use crate::tensor::{ParamGroup, ParamStore, Tape, Tensor, Var};

/// Actor-critic for discrete actions. Policy and value heads read the
/// same encoder embedding.
#[derive(Clone, Debug)]
pub struct PpoNet {
    pub encoder: Encoder,
    pub policy: Linear,
    pub value: Linear,
    pub n_actions: usize,
}

impl PpoNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        obs_shape: [usize; 3],
        n_actions: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::new(store, "enc", ParamGroup::Actor, obs_shape, cfg, rng);
        let policy = init_linear(store, "pi", ParamGroup::Actor, cfg.embed_dim, n_actions, 0.01, rng);
        let value = init_linear(store, "v", ParamGroup::Critic, cfg.embed_dim, 1, 1.0, rng);
        Self {
            encoder,
            policy,
            value,
            n_actions,
        }
    }

    pub fn encode_to_branch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
    ) -> Result<Var, AgentError> {
        self.encoder.encode_to_branch(tape, store, obs)
    }

    /// Post-branch trunk plus heads: the action distribution and `V`, `B`.
    pub fn heads_from_branch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
    ) -> Result<(PolicyDist, Var), AgentError> {
        let e = self.encoder.embed_from_branch(tape, store, z)?;
        let logits = self.policy.forward(tape, store, e)?;
        if !tape.value(logits).is_finite() {
            return Err(AgentError::NonFinite("policy logits"));
        }
        let dist = PolicyDist::categorical(tape, logits)?;
        let v = self.value.forward(tape, store, e)?;
        let b = tape.shape(v)[0];
        let v = tape.reshape(v, &[b])?;
        Ok((dist, v))
    }

    /// Clean forward pass from observations.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: &Tensor,
    ) -> Result<(PolicyDist, Var), AgentError> {
        let x = tape.constant(obs.clone());
        let z = self.encode_to_branch(tape, store, x)?;
        self.heads_from_branch(tape, store, z)
    }
}

/// Generalized advantage estimation over one environment's trajectory
/// segment. `dones[t]` marks that transition `t` ended its episode, which
/// cuts both the bootstrap and the advantage trace. Returns
/// `(advantages, value_targets)` with `targets = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let n = rewards.len();
    if n == 0 {
        return Err(AgentError::EmptyRollout);
    }
    if values.len() != n || dones.len() != n {
        return Err(AgentError::Invalid(format!(
            "gae: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lam * live * running;
        adv[t] = running;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Shifts and scales to zero mean, unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

pub struct ActorLoss {
    pub loss: Var,
    /// `E[min(r·A, clip(r)·A)]` before the entropy bonus.
    pub objective: Var,
    pub entropy: Var,
    pub clip_fraction: f64,
}

/// `−E[min(r·A, clip(r, 1−ε, 1+ε)·A)] − c_ent · E[H]`, where
/// `r = exp(logp_new − logp_old)`.
pub fn ppo_actor_loss(
    tape: &mut Tape,
    logp_new: Var,
    entropy: Var,
    logp_old: &[f64],
    advantages: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<ActorLoss, AgentError> {
    let b = tape.shape(logp_new)[0];
    if logp_old.len() != b || advantages.len() != b {
        return Err(AgentError::Invalid(format!(
            "ppo_actor_loss: batch {b}, {} old log-probs, {} advantages",
            logp_old.len(),
            advantages.len()
        )));
    }
    let old = tape.constant(Tensor::from_vec(logp_old.to_vec()));
    let diff = tape.sub(logp_new, old)?;
    let ratio = tape.exp(diff)?;
    if !tape.value(ratio).is_finite() {
        return Err(AgentError::NonFinite("probability ratio"));
    }
    let clip_fraction = tape
        .value(ratio)
        .data()
        .iter()
        .filter(|r| (*r - 1.0).abs() > clip_eps)
        .count() as f64
        / b as f64;
    let adv = tape.constant(Tensor::from_vec(advantages.to_vec()));
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let objective = tape.mean(surrogate)?;
    let mean_entropy = tape.mean(entropy)?;
    let bonus = tape.scale(mean_entropy, entropy_coef)?;
    let total = tape.add(objective, bonus)?;
    let loss = tape.neg(total)?;
    Ok(ActorLoss {
        loss,
        objective,
        entropy: mean_entropy,
        clip_fraction,
    })
}

/// Mean squared error toward value targets.
pub fn ppo_critic_loss(tape: &mut Tape, values: Var, targets: &[f64]) -> Result<Var, AgentError> {
    let b = tape.shape(values)[0];
    if targets.len() != b {
        return Err(AgentError::Invalid(format!(
            "ppo_critic_loss: {b} values, {} targets",
            targets.len()
        )));
    }
    let t = tape.constant(Tensor::from_vec(targets.to_vec()));
    let d = tape.sub(values, t)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}
