//! Action distributions and the divergence between them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::AgentError;
use crate::tensor::{Result as TResult, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Actions for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Actions {
    Discrete(Vec<usize>),
    /// `B×D`, already squashed into `[-1, 1]`.
    Continuous(Tensor),
}

/// `π(·|z)` for a batch, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum PolicyDist {
    /// Row-normalized log-probabilities, `B×A`.
    Categorical { log_probs: Var },
    /// Pre-squash diagonal Gaussian, `B×D` each.
    Gaussian { mean: Var, log_std: Var },
}

impl PolicyDist {
    pub fn categorical(tape: &mut Tape, logits: Var) -> TResult<Self> {
        Ok(Self::Categorical {
            log_probs: tape.log_softmax(logits)?,
        })
    }

    /// Maps an unconstrained output smoothly onto `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn gaussian(tape: &mut Tape, mean: Var, raw_log_std: Var) -> TResult<Self> {
        let t = tape.tanh(raw_log_std)?;
        let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
        let scaled = tape.scale(t, half)?;
        let log_std = tape.add_scalar(scaled, LOG_STD_MIN + half)?;
        Ok(Self::Gaussian { mean, log_std })
    }

    pub fn batch_size(&self, tape: &Tape) -> usize {
        match self {
            Self::Categorical { log_probs } => tape.shape(*log_probs)[0],
            Self::Gaussian { mean, .. } => tape.shape(*mean)[0],
        }
    }

    /// Probability rows of a categorical distribution.
    pub fn probs(&self, tape: &Tape) -> Option<Vec<Vec<f64>>> {
        match self {
            Self::Categorical { log_probs } => {
                let t = tape.value(*log_probs);
                let a = t.shape()[1];
                Some(
                    t.data()
                        .chunks(a)
                        .map(|r| r.iter().map(|l| l.exp()).collect())
                        .collect(),
                )
            }
            Self::Gaussian { .. } => None,
        }
    }

    /// Log-probability of discrete actions, `B`.
    pub fn log_prob(&self, tape: &mut Tape, actions: &[usize]) -> Result<Var, AgentError> {
        match self {
            Self::Categorical { log_probs } => Ok(tape.gather(*log_probs, actions)?),
            Self::Gaussian { .. } => Err(AgentError::FamilyMismatch),
        }
    }

    /// Per-row entropy, `B`. For the Gaussian this is the pre-squash entropy.
    pub fn entropy(&self, tape: &mut Tape) -> TResult<Var> {
        match *self {
            Self::Categorical { log_probs } => {
                let p = tape.exp(log_probs)?;
                let plp = tape.mul(p, log_probs)?;
                let s = tape.sum_axis(plp, 1)?;
                tape.neg(s)
            }
            Self::Gaussian { log_std, .. } => {
                let d = tape.shape(log_std)[1] as f64;
                let s = tape.sum_axis(log_std, 1)?;
                tape.add_scalar(s, 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln()))
            }
        }
    }

    /// Most likely action: argmax (lowest index on ties) or `tanh(mean)`.
    pub fn mode(&self, tape: &Tape) -> Actions {
        match *self {
            Self::Categorical { log_probs } => {
                let t = tape.value(log_probs);
                let a = t.shape()[1];
                Actions::Discrete(t.data().chunks(a).map(argmax).collect())
            }
            Self::Gaussian { mean, .. } => Actions::Continuous(tape.value(mean).map(f64::tanh)),
        }
    }

    /// Draws actions without recording gradients.
    pub fn sample<R: Rng + ?Sized>(&self, tape: &Tape, rng: &mut R) -> Actions {
        match *self {
            Self::Categorical { log_probs } => {
                let t = tape.value(log_probs);
                let a = t.shape()[1];
                let picks = t
                    .data()
                    .chunks(a)
                    .map(|row| {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        for (i, l) in row.iter().enumerate() {
                            acc += l.exp();
                            if u < acc {
                                return i;
                            }
                        }
                        a - 1
                    })
                    .collect();
                Actions::Discrete(picks)
            }
            Self::Gaussian { mean, log_std } => {
                let (m, s) = (tape.value(mean), tape.value(log_std));
                let data = m
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(mu, ls)| {
                        let e: f64 = StandardNormal.sample(rng);
                        (mu + ls.exp() * e).tanh()
                    })
                    .collect();
                Actions::Continuous(Tensor::new(m.shape(), data).expect("shape"))
            }
        }
    }

    /// Reparameterized squashed sample `a = tanh(μ + σ·ε)` and its
    /// log-probability with the tanh change-of-variables correction.
    pub fn rsample_squashed<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        rng: &mut R,
    ) -> Result<(Var, Var), AgentError> {
        let Self::Gaussian { mean, log_std } = *self else {
            return Err(AgentError::FamilyMismatch);
        };
        let shape = tape.shape(mean).to_vec();
        let noise: Vec<f64> = (0..shape.iter().product())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let eps = tape.constant(Tensor::new(&shape, noise.clone())?);
        let std = tape.exp(log_std)?;
        let scaled = tape.mul(std, eps)?;
        let u = tape.add(mean, scaled)?;
        let action = tape.tanh(u)?;
        // log N(u; μ, σ) = −ε²/2 − log σ − log √(2π)
        let sq = tape.constant(Tensor::new(&shape, noise.iter().map(|e| -0.5 * e * e).collect())?);
        let lp = tape.sub(sq, log_std)?;
        let lp = tape.add_scalar(lp, -0.5 * (2.0 * std::f64::consts::PI).ln())?;
        // log(1 − tanh²u) = 2·(log 2 − u − softplus(−2u))
        let m2u = tape.scale(u, -2.0)?;
        let sp = tape.softplus(m2u)?;
        let c = tape.add(u, sp)?;
        let c = tape.scale(c, -2.0)?;
        let correction = tape.add_scalar(c, 2.0 * std::f64::consts::LN_2)?;
        let lp = tape.sub(lp, correction)?;
        let logp = tape.sum_axis(lp, 1)?;
        Ok((action, logp))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row `KL[p ‖ q]`, `B`.
pub fn kl_divergence(tape: &mut Tape, p: &PolicyDist, q: &PolicyDist) -> Result<Var, AgentError> {
    match (*p, *q) {
        (
            PolicyDist::Categorical { log_probs: lp },
            PolicyDist::Categorical { log_probs: lq },
        ) => {
            if tape.shape(lp) != tape.shape(lq) {
                return Err(AgentError::FamilyMismatch);
            }
            let prob = tape.exp(lp)?;
            let diff = tape.sub(lp, lq)?;
            let terms = tape.mul(prob, diff)?;
            Ok(tape.sum_axis(terms, 1)?)
        }
        (
            PolicyDist::Gaussian {
                mean: m1,
                log_std: s1,
            },
            PolicyDist::Gaussian {
                mean: m2,
                log_std: s2,
            },
        ) => {
            if tape.shape(m1) != tape.shape(m2) {
                return Err(AgentError::FamilyMismatch);
            }
            // log σ₂ − log σ₁ + (σ₁² + (μ₁ − μ₂)²) / (2σ₂²) − ½
            let log_ratio = tape.sub(s2, s1)?;
            let two_s1 = tape.scale(s1, 2.0)?;
            let var1 = tape.exp(two_s1)?;
            let dm = tape.sub(m1, m2)?;
            let dm2 = tape.square(dm)?;
            let num = tape.add(var1, dm2)?;
            let two_s2 = tape.scale(s2, 2.0)?;
            let var2 = tape.exp(two_s2)?;
            let var2x2 = tape.scale(var2, 2.0)?;
            let frac = tape.div(num, var2x2)?;
            let t = tape.add(log_ratio, frac)?;
            let t = tape.add_scalar(t, -0.5)?;
            Ok(tape.sum_axis(t, 1)?)
        }
        _ => Err(AgentError::FamilyMismatch),
    }
}

/// Batch-mean `KL[π(·|z) ‖ π(·|z_adv)]`, clipped below at zero against
/// rounding.
pub fn l_div(tape: &mut Tape, clean: &PolicyDist, adv: &PolicyDist) -> Result<Var, AgentError> {
    let kl = kl_divergence(tape, clean, adv)?;
    let kl = tape.relu(kl)?;
    Ok(tape.mean(kl)?)
}
