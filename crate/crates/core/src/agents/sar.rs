//! The style-agnostic min-max objectives layered over PPO.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist::l_div;
use super::ppo::{ppo_actor_loss, ppo_critic_loss, PpoNet};
use super::AgentError;
use crate::style::{style_mix_batch, Perturber};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Coefficients of the adversarial terms. `adversarial` is the warm-up
/// indicator: when false the perturbed branch is not built at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarCoefs {
    pub lambda: f64,
    pub lambda_gen: f64,
    pub kappa: f64,
    pub mix: bool,
    pub adversarial: bool,
}

impl SarCoefs {
    /// Plain base algorithm: no mixing, no adversary.
    pub fn vanilla() -> Self {
        Self {
            lambda: 0.0,
            lambda_gen: 0.0,
            kappa: 0.0,
            mix: false,
            adversarial: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoHyper {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub vf_coef: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            entropy_coef: 0.01,
            vf_coef: 0.5,
        }
    }
}

/// One minibatch of collected experience.
pub struct PpoBatch<'a> {
    pub obs: &'a Tensor,
    pub actions: &'a [usize],
    pub logp_old: &'a [f64],
    pub advantages: &'a [f64],
    pub targets: &'a [f64],
}

/// Scalar losses of one minibatch. The adversarial entries are `None`
/// while the adversarial terms are inactive.
pub struct SarLossBundle {
    pub actor_loss: Var,
    pub critic_loss: Var,
    pub gen_loss: Option<Var>,
    pub l_div: Option<Var>,
    pub g_critic: Option<Var>,
    pub entropy_bonus: Var,
    pub clip_fraction: f64,
}

/// Clean branch: branch features, optionally style-mixed, through the
/// trunk and heads. Adversarial branch: the unmixed features perturbed by
/// `perturber`, through the same trunk and heads.
///
/// `actor = L_actor + λ·L_div`, `gen = −λ′·L_div`,
/// `critic = L_critic + κ·mean((V(z) − V(z_adv))²)`.
pub fn sar_ppo_losses<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    net: &PpoNet,
    perturber: Option<&dyn Perturber>,
    batch: &PpoBatch<'_>,
    hyper: &PpoHyper,
    coefs: &SarCoefs,
    rng: &mut R,
) -> Result<SarLossBundle, AgentError> {
    let x = tape.constant(batch.obs.clone());
    let z = net.encode_to_branch(tape, store, x)?;
    let z_clean = if coefs.mix {
        style_mix_batch(tape, z, rng)?.0
    } else {
        z
    };
    let (dist, values) = net.heads_from_branch(tape, store, z_clean)?;
    let logp = dist.log_prob(tape, batch.actions)?;
    let entropy = dist.entropy(tape)?;
    let base = ppo_actor_loss(
        tape,
        logp,
        entropy,
        batch.logp_old,
        batch.advantages,
        hyper.clip_eps,
        hyper.entropy_coef,
    )?;
    let base_critic = ppo_critic_loss(tape, values, batch.targets)?;
    let entropy_bonus = tape.scale(base.entropy, hyper.entropy_coef)?;
    if !coefs.adversarial {
        return Ok(SarLossBundle {
            actor_loss: base.loss,
            critic_loss: base_critic,
            gen_loss: None,
            l_div: None,
            g_critic: None,
            entropy_bonus,
            clip_fraction: base.clip_fraction,
        });
    }
    let perturber = perturber.ok_or(AgentError::GeneratorMissing)?;
    let z_adv = perturber.perturb(tape, store, z)?;
    let (dist_adv, values_adv) = net.heads_from_branch(tape, store, z_adv)?;
    let div = l_div(tape, &dist, &dist_adv)?;
    let weighted = tape.scale(div, coefs.lambda)?;
    let actor_loss = tape.add(base.loss, weighted)?;
    let gen_loss = tape.scale(div, -coefs.lambda_gen)?;
    let dv = tape.sub(values, values_adv)?;
    let dv2 = tape.square(dv)?;
    let g_critic = tape.mean(dv2)?;
    let reg = tape.scale(g_critic, coefs.kappa)?;
    let critic_loss = tape.add(base_critic, reg)?;
    for (v, what) in [
        (actor_loss, "actor loss"),
        (critic_loss, "critic loss"),
        (gen_loss, "generator loss"),
    ] {
        if !tape.value(v).is_finite() {
            return Err(AgentError::NonFinite(what));
        }
    }
    Ok(SarLossBundle {
        actor_loss,
        critic_loss,
        gen_loss: Some(gen_loss),
        l_div: Some(div),
        g_critic: Some(g_critic),
        entropy_bonus,
        clip_fraction: base.clip_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::EncoderConfig;
    use crate::style::{IdentityPerturbation, PerturbGenerator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, PpoNet, PerturbGenerator, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            channels: [4, 4, 4],
            kernels: [3, 3, 3],
            strides: [2, 2, 2],
            embed_dim: 8,
        };
        let net = PpoNet::new(&mut store, [3, 8, 8], 4, &cfg, &mut rng);
        let gen = PerturbGenerator::new(&mut store, "gen", 4, 8, &mut rng);
        let obs = Tensor::new(
            &[3, 3, 8, 8],
            (0..3 * 3 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        (store, net, gen, obs)
    }

    fn run(perturber: &dyn Perturber, coefs: SarCoefs) -> (f64, f64, f64, f64) {
        let (store, net, _, obs) = setup();
        let mut tape = Tape::new();
        let batch = PpoBatch {
            obs: &obs,
            actions: &[0, 1, 3],
            logp_old: &[-1.4, -1.3, -1.5],
            advantages: &[0.3, -0.2, 1.0],
            targets: &[0.5, 0.1, -0.4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = sar_ppo_losses(
            &mut tape,
            &store,
            &net,
            Some(perturber),
            &batch,
            &PpoHyper::default(),
            &coefs,
            &mut rng,
        )
        .unwrap();
        let v = |x: Option<Var>| tape.value(x.unwrap()).item();
        (
            v(b.l_div),
            v(b.g_critic),
            v(b.gen_loss),
            tape.value(b.actor_loss).item(),
        )
    }

    fn active(lambda: f64) -> SarCoefs {
        SarCoefs {
            lambda,
            lambda_gen: lambda,
            kappa: 0.1,
            mix: true,
            adversarial: true,
        }
    }

    #[test]
    fn identity_perturbation_is_exact_zero() {
        let coefs = SarCoefs {
            mix: false,
            ..active(0.1)
        };
        let (div, gc, gen, _) = run(&IdentityPerturbation, coefs);
        assert_eq!(div, 0.0);
        assert_eq!(gc, 0.0);
        assert_eq!(gen, 0.0);
    }

    #[test]
    fn gen_loss_is_negated_scaled_divergence() {
        let (_, _, g, _) = setup();
        let (div, gc, gen, _) = run(&g, active(0.01));
        assert!(div > 0.0 && gc >= 0.0);
        assert_eq!(gen, -0.01 * div);
    }

    #[test]
    fn missing_generator_is_an_error() {
        let (store, net, _, obs) = setup();
        let mut tape = Tape::new();
        let batch = PpoBatch {
            obs: &obs,
            actions: &[0, 0, 0],
            logp_old: &[0.0; 3],
            advantages: &[0.0; 3],
            targets: &[0.0; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sar_ppo_losses(
            &mut tape,
            &store,
            &net,
            None,
            &batch,
            &PpoHyper::default(),
            &active(0.1),
            &mut rng,
        );
        assert!(matches!(r, Err(AgentError::GeneratorMissing)));
    }
}
