//! Feature-statistics layers: instance normalization, AdaIN style mixing,
//! and the learned adversarial style perturbation.
//!
//! All operations take `B×C×H×W` feature maps recorded on a [`Tape`] and
//! stay differentiable end to end, including through the spatial mean and
//! standard deviation of the input.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::agents::layers::{init_linear, Linear};
use crate::tensor::{ParamGroup, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Floor added to the softplus scale so generated `γ` stays positive.
pub const EPS_GAMMA: f64 = 1e-3;

/// Target style for a feature map: per-sample, per-channel shift `beta`
/// and scale `gamma`, both `B×C` (or `C` for a batch-shared affine).
#[derive(Clone, Copy, Debug)]
pub struct StyleStats {
    pub beta: Var,
    pub gamma: Var,
}

fn check_map(tape: &Tape, z: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.try_value(z)?.shape();
    match *s {
        [b, c, h, w] if h * w > 0 => Ok([b, c, h, w]),
        _ => Err(TensorError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Lifts `B×C` or `C` statistics to a broadcastable `·×C×1×1` tensor.
fn as_channel_affine(tape: &mut Tape, s: Var, dims: [usize; 4], op: &'static str) -> Result<Var> {
    let [b, c, _, _] = dims;
    let shape = tape.try_value(s)?.shape().to_vec();
    let target = if shape == [b, c] {
        [b, c, 1, 1]
    } else if shape == [c] {
        [1, c, 1, 1]
    } else {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![b, c],
            rhs: shape,
        });
    };
    tape.reshape(s, &target)
}

/// The style-free content `(z − μ(z)) / σ(z)`.
pub fn normalize_content(tape: &mut Tape, z: Var) -> Result<Var> {
    let [b, c, _, _] = check_map(tape, z, "normalize_content")?;
    let (mu, sigma) = tape.channel_stats(z)?;
    let mu = tape.reshape(mu, &[b, c, 1, 1])?;
    let sigma = tape.reshape(sigma, &[b, c, 1, 1])?;
    let centered = tape.sub(z, mu)?;
    tape.div(centered, sigma)
}

fn restyle(tape: &mut Tape, z: Var, stats: StyleStats, op: &'static str) -> Result<Var> {
    let dims = check_map(tape, z, op)?;
    let gamma = as_channel_affine(tape, stats.gamma, dims, op)?;
    let beta = as_channel_affine(tape, stats.beta, dims, op)?;
    let content = normalize_content(tape, z)?;
    let scaled = tape.mul(content, gamma)?;
    tape.add(scaled, beta)
}

/// `γ · (z − μ(z)) / σ(z) + β`.
pub fn instance_norm(tape: &mut Tape, z: Var, stats: StyleStats) -> Result<Var> {
    restyle(tape, z, stats, "instance_norm")
}

/// Re-expresses the content of `z` with the channel statistics of `z_src`.
pub fn adain(tape: &mut Tape, z: Var, z_src: Var) -> Result<Var> {
    let dims = check_map(tape, z, "adain")?;
    let src = check_map(tape, z_src, "adain")?;
    if dims != src {
        return Err(TensorError::ShapeMismatch {
            op: "adain",
            lhs: dims.to_vec(),
            rhs: src.to_vec(),
        });
    }
    let (mu, sigma) = tape.channel_stats(z_src)?;
    restyle(
        tape,
        z,
        StyleStats {
            beta: mu,
            gamma: sigma,
        },
        "adain",
    )
}

/// AdaIN of each row against a uniformly permuted row of the same batch.
/// Returns the mixed map and the permutation drawn.
pub fn style_mix_batch<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: Var,
    rng: &mut R,
) -> Result<(Var, Vec<usize>)> {
    let [b, ..] = check_map(tape, z, "style_mix_batch")?;
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let src = tape.index_select(z, &perm)?;
    Ok((adain(tape, z, src)?, perm))
}

/// `γ_adv · (z − μ(z)) / σ(z) + β_adv`; gradients reach both `z` and the
/// statistics.
pub fn style_perturb(tape: &mut Tape, z: Var, stats: StyleStats) -> Result<Var> {
    restyle(tape, z, stats, "style_perturb")
}

/// Produces adversarial target statistics for a feature map.
pub trait Perturber {
    fn perturb(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var>;
}

/// Leaves the features untouched.
pub struct IdentityPerturbation;

impl Perturber for IdentityPerturbation {
    fn perturb(&self, _tape: &mut Tape, _store: &ParamStore, z: Var) -> Result<Var> {
        Ok(z)
    }
}

/// Style perturbation generator: global average pool over `H×W`, two
/// `tanh` hidden layers, and linear heads emitting raw `β` and raw `γ`
/// per channel. Every batch row is conditioned only on its own map.
#[derive(Clone, Debug)]
pub struct PerturbGenerator {
    channels: usize,
    hidden: [Linear; 2],
    beta_head: Linear,
    gamma_head: Linear,
}

impl PerturbGenerator {
    /// Output heads start at zero, so the initial perturbation is
    /// `γ = softplus(0) + ε_γ`, `β = 0` for every input.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Generator;
        let h1 = init_linear(store, &format!("{prefix}.h1"), g, channels, hidden, 1.0, rng);
        let h2 = init_linear(store, &format!("{prefix}.h2"), g, hidden, hidden, 1.0, rng);
        let beta_head = init_linear(store, &format!("{prefix}.beta"), g, hidden, channels, 0.0, rng);
        let gamma_head =
            init_linear(store, &format!("{prefix}.gamma"), g, hidden, channels, 0.0, rng);
        Self {
            channels,
            hidden: [h1, h2],
            beta_head,
            gamma_head,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        [&self.hidden[0], &self.hidden[1], &self.beta_head, &self.gamma_head]
            .iter()
            .map(|l| l.param_count(store))
            .sum()
    }

    pub fn generate(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<StyleStats> {
        let [b, c, h, w] = check_map(tape, z, "generate_perturbation")?;
        if c != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "generate_perturbation",
                lhs: vec![b, self.channels, h, w],
                rhs: vec![b, c, h, w],
            });
        }
        let flat = tape.reshape(z, &[b, c, h * w])?;
        let mut x = tape.mean_axis(flat, 2)?;
        for layer in &self.hidden {
            let y = layer.forward(tape, store, x)?;
            x = tape.tanh(y)?;
        }
        if !tape.value(x).is_finite() {
            return Err(TensorError::NonFinite {
                op: "generate_perturbation",
            });
        }
        let beta = self.beta_head.forward(tape, store, x)?;
        let raw_gamma = self.gamma_head.forward(tape, store, x)?;
        let gamma = tape.softplus(raw_gamma)?;
        let gamma = tape.add_scalar(gamma, EPS_GAMMA)?;
        if !tape.value(gamma).is_finite() || !tape.value(beta).is_finite() {
            return Err(TensorError::NonFinite {
                op: "generate_perturbation",
            });
        }
        Ok(StyleStats { beta, gamma })
    }
}

impl Perturber for PerturbGenerator {
    fn perturb(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let stats = self.generate(tape, store, z)?;
        style_perturb(tape, z, stats)
    }
}

/// Identity target statistics `(β, γ) = (μ(z), σ(z))`, detached.
pub fn identity_stats(tape: &mut Tape, z: Var) -> Result<StyleStats> {
    let (mu, sigma) = tape.channel_stats(z)?;
    let beta = tape.detach(mu)?;
    let gamma = tape.detach(sigma)?;
    Ok(StyleStats { beta, gamma })
}

/// Plain-value channel statistics, for checks outside a training graph.
pub fn stats_of(z: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let (mu, sigma) = tape.channel_stats(v)?;
    Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
}
