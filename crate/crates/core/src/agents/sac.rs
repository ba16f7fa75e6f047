//! Soft actor-critic with twin Q heads, target copies, and a learned
//! temperature, plus the adversarial style terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist::{l_div, PolicyDist};
use super::encoder::{Encoder, EncoderConfig};
use super::layers::Mlp;
use super::sar::SarCoefs;
use super::AgentError;
use crate::style::{style_mix_batch, Perturber};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SacNet {
    pub encoder: Encoder,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub target_encoder: Encoder,
    pub target_q1: Mlp,
    pub target_q2: Mlp,
    pub log_alpha: ParamId,
    pub action_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SacHyper {
    pub gamma: f64,
    pub target_entropy: f64,
}

pub struct SacBatch<'a> {
    pub obs: &'a Tensor,
    /// `B×D`, in `[-1, 1]`.
    pub actions: &'a Tensor,
    pub rewards: &'a [f64],
    pub next_obs: &'a Tensor,
    pub dones: &'a [bool],
}

/// Scalar losses of one update. Actor-side entries are `None` when only
/// the critic is updated.
pub struct SacLosses {
    pub critic_loss: Var,
    pub actor_loss: Option<Var>,
    pub alpha_loss: Option<Var>,
    pub gen_loss: Option<Var>,
    pub l_div: Option<Var>,
    pub g_critic: Option<Var>,
    pub entropy: Option<f64>,
}

fn pairs(online: &[ParamId], target: &[ParamId]) -> Vec<(ParamId, ParamId)> {
    online.iter().copied().zip(target.iter().copied()).collect()
}

fn mlp_ids(m: &Mlp) -> [ParamId; 4] {
    [m.hidden.w, m.hidden.b, m.out.w, m.out.b]
}

impl SacNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        obs_shape: [usize; 3],
        action_dim: usize,
        cfg: &EncoderConfig,
        hidden: usize,
        init_temperature: f64,
        rng: &mut R,
    ) -> Self {
        let e = cfg.embed_dim;
        let encoder = Encoder::new(store, "enc", ParamGroup::Critic, obs_shape, cfg, rng);
        let actor = Mlp::new(store, "actor", ParamGroup::Actor, e, hidden, 2 * action_dim, 0.01, rng);
        let q1 = Mlp::new(store, "q1", ParamGroup::Critic, e + action_dim, hidden, 1, 1.0, rng);
        let q2 = Mlp::new(store, "q2", ParamGroup::Critic, e + action_dim, hidden, 1, 1.0, rng);
        let target_encoder = Encoder::new(store, "target.enc", ParamGroup::Target, obs_shape, cfg, rng);
        let target_q1 = Mlp::new(store, "target.q1", ParamGroup::Target, e + action_dim, hidden, 1, 1.0, rng);
        let target_q2 = Mlp::new(store, "target.q2", ParamGroup::Target, e + action_dim, hidden, 1, 1.0, rng);
        let log_alpha = store.add(
            "log_alpha",
            ParamGroup::Temperature,
            Tensor::scalar(init_temperature.ln()),
        );
        let net = Self {
            encoder,
            actor,
            q1,
            q2,
            target_encoder,
            target_q1,
            target_q2,
            log_alpha,
            action_dim,
        };
        for (src, dst) in net.encoder_pairs().into_iter().chain(net.q_pairs()) {
            let v = store.get(src).clone();
            store.set(dst, v).expect("same shape");
        }
        net
    }

    /// `(online, target)` pairs for the encoder.
    pub fn encoder_pairs(&self) -> Vec<(ParamId, ParamId)> {
        pairs(&self.encoder.param_ids(), &self.target_encoder.param_ids())
    }

    /// `(online, target)` pairs for both Q heads.
    pub fn q_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let mut p = pairs(&mlp_ids(&self.q1), &mlp_ids(&self.target_q1));
        p.extend(pairs(&mlp_ids(&self.q2), &mlp_ids(&self.target_q2)));
        p
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        store.get(self.log_alpha).item().exp()
    }

    pub fn policy(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<PolicyDist, AgentError> {
        let out = self.actor.forward(tape, store, h)?;
        if !tape.value(out).is_finite() {
            return Err(AgentError::NonFinite("actor output"));
        }
        let b = tape.shape(out)[0];
        let d = self.action_dim;
        let mean_idx: Vec<usize> = (0..d).collect();
        let std_idx: Vec<usize> = (d..2 * d).collect();
        let flat_t = tape.reshape(out, &[b, 2 * d])?;
        let mean = select_cols(tape, flat_t, &mean_idx)?;
        let raw = select_cols(tape, flat_t, &std_idx)?;
        Ok(PolicyDist::gaussian(tape, mean, raw)?)
    }

    fn q(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        heads: [&Mlp; 2],
        h: Var,
        a: Var,
    ) -> Result<[Var; 2], AgentError> {
        let x = tape.concat_cols(&[h, a])?;
        let b = tape.shape(x)[0];
        let mut out = [x; 2];
        for (o, head) in out.iter_mut().zip(heads) {
            let q = head.forward(tape, store, x)?;
            *o = tape.reshape(q, &[b])?;
        }
        Ok(out)
    }

    /// Embedding of observations through the online encoder.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, obs: &Tensor) -> Result<Var, AgentError> {
        let x = tape.constant(obs.clone());
        let z = self.encoder.encode_to_branch(tape, store, x)?;
        self.encoder.embed_from_branch(tape, store, z)
    }

    /// Squashed actions for acting: sampled, or `tanh(mean)` when
    /// `deterministic`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        obs: &Tensor,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Tensor, AgentError> {
        let mut tape = Tape::new();
        let h = self.embed(&mut tape, store, obs)?;
        let dist = self.policy(&mut tape, store, h)?;
        let a = if deterministic {
            let PolicyDist::Gaussian { mean, .. } = dist else {
                unreachable!()
            };
            tape.value(mean).map(f64::tanh)
        } else {
            let (a, _) = dist.rsample_squashed(&mut tape, rng)?;
            tape.value(a).clone()
        };
        Ok(a)
    }

    fn target_values<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        batch: &SacBatch<'_>,
        hyper: &SacHyper,
        rng: &mut R,
    ) -> Result<Vec<f64>, AgentError> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.next_obs.clone());
        let z = self.target_encoder.encode_to_branch(&mut tape, store, x)?;
        let h = self.target_encoder.embed_from_branch(&mut tape, store, z)?;
        let dist = self.policy(&mut tape, store, h)?;
        let (a, logp) = dist.rsample_squashed(&mut tape, rng)?;
        let [q1, q2] = self.q(&mut tape, store, [&self.target_q1, &self.target_q2], h, a)?;
        let alpha = self.alpha(store);
        let (q1, q2, logp) = (tape.value(q1), tape.value(q2), tape.value(logp));
        Ok((0..batch.rewards.len())
            .map(|i| {
                let v = soft_value(q1.data()[i].min(q2.data()[i]), logp.data()[i], alpha);
                td_target(batch.rewards[i], batch.dones[i], hyper.gamma, v)
            })
            .collect())
    }
}

fn select_cols(tape: &mut Tape, x: Var, cols: &[usize]) -> Result<Var, AgentError> {
    // transpose-free column pick via a selection matrix
    let n = tape.shape(x)[1];
    let mut sel = vec![0.0; n * cols.len()];
    for (j, &c) in cols.iter().enumerate() {
        sel[c * cols.len() + j] = 1.0;
    }
    let s = tape.constant(Tensor::new(&[n, cols.len()], sel)?);
    Ok(tape.matmul(x, s)?)
}

/// `V(s) = Q − α·log π`.
pub fn soft_value(q: f64, logp: f64, alpha: f64) -> f64 {
    q - alpha * logp
}

/// `r + γ·(1 − done)·V(s′)`.
pub fn td_target(reward: f64, done: bool, gamma: f64, next_value: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_value
    }
}

/// Critic loss, and when `update_actor` the actor, temperature, and
/// adversarial losses. Each must be back-propagated into its own group.
#[allow(clippy::too_many_arguments)]
pub fn sac_losses<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    net: &SacNet,
    perturber: Option<&dyn Perturber>,
    batch: &SacBatch<'_>,
    hyper: &SacHyper,
    coefs: &SarCoefs,
    update_actor: bool,
    rng: &mut R,
) -> Result<SacLosses, AgentError> {
    let b = batch.rewards.len();
    if batch.dones.len() != b || tape_rows(batch.obs) != b || tape_rows(batch.actions) != b {
        return Err(AgentError::Invalid(format!(
            "sac_losses: inconsistent batch of {b} rewards"
        )));
    }
    let y = net.target_values(store, batch, hyper, rng)?;
    let x = tape.constant(batch.obs.clone());
    let z = net.encoder.encode_to_branch(tape, store, x)?;
    let z_clean = if coefs.mix {
        style_mix_batch(tape, z, rng)?.0
    } else {
        z
    };
    let h = net.encoder.embed_from_branch(tape, store, z_clean)?;
    let a = tape.constant(batch.actions.clone());
    let [q1, q2] = net.q(tape, store, [&net.q1, &net.q2], h, a)?;
    let yv = tape.constant(Tensor::from_vec(y));
    let mut critic = Vec::with_capacity(2);
    for q in [q1, q2] {
        let d = tape.sub(q, yv)?;
        let d2 = tape.square(d)?;
        critic.push(tape.mean(d2)?);
    }
    let mut critic_loss = tape.add(critic[0], critic[1])?;
    let mut out = SacLosses {
        critic_loss,
        actor_loss: None,
        alpha_loss: None,
        gen_loss: None,
        l_div: None,
        g_critic: None,
        entropy: None,
    };
    let adversarial = coefs.adversarial;
    if !update_actor && !adversarial {
        return Ok(out);
    }
    let dist = net.policy(tape, store, h)?;
    if adversarial {
        let perturber = perturber.ok_or(AgentError::GeneratorMissing)?;
        let z_adv = perturber.perturb(tape, store, z)?;
        let h_adv = net.encoder.embed_from_branch(tape, store, z_adv)?;
        let PolicyDist::Gaussian { mean, .. } = dist else {
            unreachable!()
        };
        let a_star = tape.value(mean).map(f64::tanh);
        let a_star = tape.constant(a_star);
        let [c1, c2] = net.q(tape, store, [&net.q1, &net.q2], h, a_star)?;
        let [p1, p2] = net.q(tape, store, [&net.q1, &net.q2], h_adv, a_star)?;
        let v_clean = tape.minimum(c1, c2)?;
        let v_adv = tape.minimum(p1, p2)?;
        let dv = tape.sub(v_clean, v_adv)?;
        let dv2 = tape.square(dv)?;
        let g = tape.mean(dv2)?;
        let reg = tape.scale(g, coefs.kappa)?;
        critic_loss = tape.add(critic_loss, reg)?;
        out.critic_loss = critic_loss;
        out.g_critic = Some(g);
        if update_actor {
            let dist_adv = net.policy(tape, store, h_adv)?;
            let div = l_div(tape, &dist, &dist_adv)?;
            out.gen_loss = Some(tape.scale(div, -coefs.lambda_gen)?);
            out.l_div = Some(div);
        }
    }
    if !update_actor {
        return Ok(out);
    }
    let alpha = net.alpha(store);
    let (act, logp) = dist.rsample_squashed(tape, rng)?;
    let [a1, a2] = net.q(tape, store, [&net.q1, &net.q2], h, act)?;
    let qmin = tape.minimum(a1, a2)?;
    let scaled = tape.scale(logp, alpha)?;
    let diff = tape.sub(scaled, qmin)?;
    let mut actor_loss = tape.mean(diff)?;
    if let Some(div) = out.l_div {
        let w = tape.scale(div, coefs.lambda)?;
        actor_loss = tape.add(actor_loss, w)?;
    }
    let lp = tape.value(logp).data().to_vec();
    out.entropy = Some(-lp.iter().sum::<f64>() / b as f64);
    let shifted: Vec<f64> = lp.iter().map(|l| -(l + hyper.target_entropy)).collect();
    let la = tape.param(store, net.log_alpha);
    let alpha_v = tape.exp(la)?;
    let s = tape.constant(Tensor::from_vec(shifted));
    let prod = tape.mul(alpha_v, s)?;
    out.alpha_loss = Some(tape.mean(prod)?);
    out.actor_loss = Some(actor_loss);
    for v in [Some(out.critic_loss), out.actor_loss, out.gen_loss].into_iter().flatten() {
        if !tape.value(v).is_finite() {
            return Err(AgentError::NonFinite("SAC loss"));
        }
    }
    Ok(out)
}

fn tape_rows(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style::IdentityPerturbation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_value_hand_case() {
        assert!((soft_value(2.0, -1.0, 0.1) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn td_target_reductions() {
        assert_eq!(td_target(1.0, true, 0.99, 123.0), 1.0);
        assert_eq!(td_target(0.7, false, 0.0, 55.0), 0.7);
    }

    fn small() -> (ParamStore, SacNet, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            channels: [4, 4, 4],
            kernels: [3, 3, 3],
            strides: [2, 2, 2],
            embed_dim: 6,
        };
        let net = SacNet::new(&mut store, [3, 8, 8], 2, &cfg, 8, 0.1, &mut rng);
        let obs = Tensor::new(&[2, 3, 8, 8], (0..384).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let act = Tensor::new(&[2, 2], vec![0.1, -0.3, 0.9, 0.0]).unwrap();
        (store, net, obs, act)
    }

    #[test]
    fn targets_start_equal_to_online() {
        let (store, net, _, _) = small();
        for (o, t) in net.encoder_pairs().into_iter().chain(net.q_pairs()) {
            assert_eq!(store.get(o), store.get(t));
        }
        assert!((net.alpha(&store) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identity_perturbation_gives_zero_terms() {
        let (store, net, obs, act) = small();
        let batch = SacBatch {
            obs: &obs,
            actions: &act,
            rewards: &[1.0, 0.0],
            next_obs: &obs,
            dones: &[false, true],
        };
        let coefs = SarCoefs {
            lambda: 0.1,
            lambda_gen: 0.1,
            kappa: 1.0,
            mix: false,
            adversarial: true,
        };
        let hyper = SacHyper {
            gamma: 0.99,
            target_entropy: -2.0,
        };
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = sac_losses(
            &mut tape,
            &store,
            &net,
            Some(&IdentityPerturbation),
            &batch,
            &hyper,
            &coefs,
            true,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(l.l_div.unwrap()).item(), 0.0);
        assert_eq!(tape.value(l.g_critic.unwrap()).item(), 0.0);
        assert!(tape.value(l.actor_loss.unwrap()).is_finite());
        assert!(tape.value(l.alpha_loss.unwrap()).is_finite());
    }
}
