#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sar_core::agents::{
    l_div, sac_losses, sar_ppo_losses, EncoderConfig, PolicyDist, PpoBatch, PpoHyper, PpoNet, SacBatch, SacHyper,
    SacNet, SarCoefs,
};
use sar_core::style::{self, PerturbGenerator, Perturber, StyleStats};
use sar_core::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-3)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nn).max(1e-3)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = randn(&mut rng, &shape);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

/// Worst relative error over all inputs of `f`, which maps input leaves to
/// any tensor.
pub fn check_fn(inputs: &[Tensor], seed: u64, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let y = f(&mut tape, &vars);
        let s = weighted_sum(&mut tape, y, seed);
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = f(&mut tape, &vars);
    let s = weighted_sum(&mut tape, y, seed);
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for k in 0..inputs[i].numel() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + H;
            let up = eval(&xs);
            xs[i].data_mut()[k] = orig - H;
            let down = eval(&xs);
            xs[i].data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst relative error of a scalar loss over the parameters in `ids`.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Var,
) -> f64 {
    let value = |s: &ParamStore| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l).unwrap();
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + H;
            let up = value(&work);
            work.get_mut(id).data_mut()[k] = orig - H;
            let down = value(&work);
            work.get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

/// One random configuration of every differentiable op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..4usize);
    let c = rng.random_range(1..4usize);
    let k = rng.random_range(1..4usize);
    let b = rng.random_range(1..3usize);
    let ch = rng.random_range(1..4usize);
    let hw = rng.random_range(2..5usize);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($x:expr),*], $f:expr) => {
            cases.push(($name, vec![$($x),*], Box::new($f)));
        };
    }
    case!("add", [randn(&mut rng, &[r, c]), randn(&mut rng, &[r, c])], |t, v| t.add(v[0], v[1]).unwrap());
    case!("add_broadcast", [randn(&mut rng, &[r, c]), randn(&mut rng, &[c])], |t, v| t.add(v[0], v[1]).unwrap());
    case!("sub_broadcast", [randn(&mut rng, &[r, 1]), randn(&mut rng, &[r, c])], |t, v| t.sub(v[0], v[1]).unwrap());
    case!("mul", [randn(&mut rng, &[b, ch, hw, hw]), randn(&mut rng, &[1, ch, 1, 1])], |t, v| t
        .mul(v[0], v[1])
        .unwrap());
    case!("div", [randn(&mut rng, &[r, c]), positive(&mut rng, &[r, c])], |t, v| t.div(v[0], v[1]).unwrap());
    case!("maximum", [randn(&mut rng, &[r, c]), randn(&mut rng, &[r, c])], |t, v| t.maximum(v[0], v[1]).unwrap());
    case!("minimum", [randn(&mut rng, &[r, c]), randn(&mut rng, &[r, c])], |t, v| t.minimum(v[0], v[1]).unwrap());
    case!("neg", [randn(&mut rng, &[r, c])], |t, v| t.neg(v[0]).unwrap());
    let s = rng.random_range(-2.0..2.0);
    case!("scale", [randn(&mut rng, &[r, c])], move |t, v| t.scale(v[0], s).unwrap());
    case!("add_scalar", [randn(&mut rng, &[r, c])], move |t, v| t.add_scalar(v[0], s).unwrap());
    case!("relu", [rand_away(&mut rng, &[r, c], 0.05)], |t, v| t.relu(v[0]).unwrap());
    case!("tanh", [randn(&mut rng, &[r, c])], |t, v| t.tanh(v[0]).unwrap());
    case!("exp", [randn(&mut rng, &[r, c])], |t, v| t.exp(v[0]).unwrap());
    case!("log", [positive(&mut rng, &[r, c])], |t, v| t.log(v[0]).unwrap());
    case!("softplus", [randn(&mut rng, &[r, c])], |t, v| t.softplus(v[0]).unwrap());
    case!("sqrt", [positive(&mut rng, &[r, c])], |t, v| t.sqrt(v[0]).unwrap());
    case!("square", [randn(&mut rng, &[r, c])], |t, v| t.square(v[0]).unwrap());
    case!("clamp", [rand_away(&mut rng, &[r, c], 0.05)], |t, v| {
        let y = t.add_scalar(v[0], 0.0).unwrap();
        t.clamp(y, -1.03, 0.97).unwrap()
    });
    case!("sum", [randn(&mut rng, &[r, c])], |t, v| t.sum(v[0]).unwrap());
    case!("mean", [randn(&mut rng, &[r, c])], |t, v| t.mean(v[0]).unwrap());
    let axis = rng.random_range(0..3usize);
    case!("sum_axis", [randn(&mut rng, &[r, c, k])], move |t, v| t.sum_axis(v[0], axis).unwrap());
    case!("mean_axis", [randn(&mut rng, &[r, c, k])], move |t, v| t.mean_axis(v[0], axis).unwrap());
    case!("reshape", [randn(&mut rng, &[r, c, k])], move |t, v| t.reshape(v[0], &[c * k, r]).unwrap());
    case!("flatten", [randn(&mut rng, &[b, ch, hw, hw])], |t, v| t.flatten(v[0]).unwrap());
    case!("matmul", [randn(&mut rng, &[r, c]), randn(&mut rng, &[c, k])], |t, v| t.matmul(v[0], v[1]).unwrap());
    case!(
        "linear",
        [randn(&mut rng, &[r, c]), randn(&mut rng, &[c, k]), randn(&mut rng, &[k])],
        |t, v| t.linear(v[0], v[1], v[2]).unwrap()
    );
    let stride = rng.random_range(1..3usize);
    let pad = rng.random_range(0..2usize);
    let kk = rng.random_range(1..4usize).min(hw + 2 * pad);
    let oc = rng.random_range(1..4usize);
    case!(
        "conv2d",
        [
            randn(&mut rng, &[b, ch, hw, hw]),
            randn(&mut rng, &[oc, ch, kk, kk]),
            randn(&mut rng, &[oc])
        ],
        move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
    );
    case!(
        "conv2d_nobias",
        [randn(&mut rng, &[b, ch, hw, hw]), randn(&mut rng, &[oc, ch, kk, kk])],
        move |t, v| t.conv2d(v[0], v[1], None, stride, pad).unwrap()
    );
    let idx: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..r)).collect();
    case!("index_select", [randn(&mut rng, &[r, c])], move |t, v| t.index_select(v[0], &idx).unwrap());
    let cols: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    case!("gather", [randn(&mut rng, &[r, c])], move |t, v| t.gather(v[0], &cols).unwrap());
    case!("log_softmax", [randn(&mut rng, &[r, c + 1])], |t, v| t.log_softmax(v[0]).unwrap());
    case!("softmax", [randn(&mut rng, &[r, c + 1])], |t, v| t.softmax(v[0]).unwrap());
    case!("concat_cols", [randn(&mut rng, &[r, c]), randn(&mut rng, &[r, k])], |t, v| t
        .concat_cols(&[v[0], v[1]])
        .unwrap());
    case!("channel_stats", [randn(&mut rng, &[b, ch, hw, hw])], |t, v| {
        let (mu, sigma) = t.channel_stats(v[0]).unwrap();
        let m = t.scale(mu, 0.7).unwrap();
        t.add(m, sigma).unwrap()
    });
    case!("normalize_content", [randn(&mut rng, &[b, ch, hw, hw])], |t, v| style::normalize_content(t, v[0])
        .unwrap());
    case!(
        "instance_norm",
        [randn(&mut rng, &[b, ch, hw, hw]), randn(&mut rng, &[b, ch]), positive(&mut rng, &[b, ch])],
        |t, v| style::instance_norm(t, v[0], StyleStats { beta: v[1], gamma: v[2] }).unwrap()
    );
    case!(
        "style_perturb",
        [randn(&mut rng, &[b, ch, hw, hw]), randn(&mut rng, &[ch]), positive(&mut rng, &[ch])],
        |t, v| style::style_perturb(t, v[0], StyleStats { beta: v[1], gamma: v[2] }).unwrap()
    );
    case!(
        "adain",
        [randn(&mut rng, &[b, ch, hw, hw]), randn(&mut rng, &[b, ch, hw, hw])],
        |t, v| style::adain(t, v[0], v[1]).unwrap()
    );
    let mix_seed = rng.random::<u64>();
    case!("style_mix_batch", [randn(&mut rng, &[b + 1, ch, hw, hw])], move |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(mix_seed);
        style::style_mix_batch(t, v[0], &mut r).unwrap().0
    });
    case!("kl_categorical", [randn(&mut rng, &[r, c + 1]), randn(&mut rng, &[r, c + 1])], |t, v| {
        let p = PolicyDist::categorical(t, v[0]).unwrap();
        let q = PolicyDist::categorical(t, v[1]).unwrap();
        l_div(t, &p, &q).unwrap()
    });
    case!(
        "kl_gaussian",
        [
            randn(&mut rng, &[r, c]),
            randn(&mut rng, &[r, c]),
            randn(&mut rng, &[r, c]),
            randn(&mut rng, &[r, c])
        ],
        |t, v| {
            let p = PolicyDist::gaussian(t, v[0], v[1]).unwrap();
            let q = PolicyDist::gaussian(t, v[2], v[3]).unwrap();
            l_div(t, &p, &q).unwrap()
        }
    );
    case!("categorical_entropy_logp", [randn(&mut rng, &[r, c + 1])], move |t, v| {
        let p = PolicyDist::categorical(t, v[0]).unwrap();
        let e = p.entropy(t).unwrap();
        let acts: Vec<usize> = (0..r).map(|i| i % (c + 1)).collect();
        let lp = p.log_prob(t, &acts).unwrap();
        let lp = t.sum(lp).unwrap();
        let e = t.sum(e).unwrap();
        t.add(e, lp).unwrap()
    });
    let noise_seed = rng.random::<u64>();
    case!("tanh_gaussian_rsample", [randn(&mut rng, &[r, c]), randn(&mut rng, &[r, c])], move |t, v| {
        let p = PolicyDist::gaussian(t, v[0], v[1]).unwrap();
        let mut nr = ChaCha8Rng::seed_from_u64(noise_seed);
        let (a, logp) = p.rsample_squashed(t, &mut nr).unwrap();
        let sa = t.sum(a).unwrap();
        let sl = t.sum(logp).unwrap();
        t.add(sa, sl).unwrap()
    });
    cases
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: [2, 3, 3],
        kernels: [3, 3, 3],
            strides: [2, 2, 2],
        embed_dim: 6,
    }
}

/// The full PPO-based loss graph with mixing and a generator: returns the
/// worst error of `actor + critic` and of `gen_loss` over their groups.
pub fn sar_ppo_graph_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_shape = [3, 8, 8];
    let mut store = ParamStore::new();
    let net = PpoNet::new(&mut store, obs_shape, 4, &tiny_encoder(), &mut rng);
    let gen = PerturbGenerator::new(&mut store, "gen", 3, 4, &mut rng);
    jitter(&mut store, &mut rng, 0.3);
    let b = 3;
    let obs = randn(&mut rng, &[b, 3, 8, 8]);
    let actions: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
    let logp_old: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..-1.0)).collect();
    let adv: Vec<f64> = (0..b).map(|_| rng.sample(StandardNormal)).collect();
    let targets: Vec<f64> = (0..b).map(|_| rng.sample(StandardNormal)).collect();
    let coefs = SarCoefs {
        lambda: rng.random_range(0.01..1.0),
        lambda_gen: rng.random_range(0.01..1.0),
        kappa: rng.random_range(0.01..1.0),
        mix: true,
        adversarial: true,
    };
    // a wide clip range keeps the objective away from its kinks
    let hyper = PpoHyper {
        clip_eps: 10.0,
        entropy_coef: 0.01,
        vf_coef: 0.5,
    };
    let perm_seed = rng.random::<u64>();
    let build = |tape: &mut Tape, s: &ParamStore| {
        let batch = PpoBatch {
            obs: &obs,
            actions: &actions,
            logp_old: &logp_old,
            advantages: &adv,
            targets: &targets,
        };
        let mut r = ChaCha8Rng::seed_from_u64(perm_seed);
        sar_ppo_losses(tape, s, &net, Some(&gen as &dyn Perturber), &batch, &hyper, &coefs, &mut r).unwrap()
    };
    let ac: Vec<ParamId> = store
        .ids()
        .filter(|&i| matches!(store.group(i), ParamGroup::Actor | ParamGroup::Critic))
        .collect();
    let gp: Vec<ParamId> = store.ids_in(ParamGroup::Generator).collect();
    let e1 = check_params(&store, &ac, &|t, s| {
        let l = build(t, s);
        let c = t.scale(l.critic_loss, 0.5).unwrap();
        t.add(l.actor_loss, c).unwrap()
    });
    let e2 = check_params(&store, &gp, &|t, s| build(t, s).gen_loss.unwrap());
    e1.max(e2)
}

/// The SAC loss graph with a generator: critic, actor, temperature, and
/// generator losses over their own groups.
pub fn sar_sac_graph_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_shape = [3, 8, 8];
    let mut store = ParamStore::new();
    let net = SacNet::new(&mut store, obs_shape, 2, &tiny_encoder(), 5, 0.1, &mut rng);
    let gen = PerturbGenerator::new(&mut store, "gen", 3, 4, &mut rng);
    jitter(&mut store, &mut rng, 0.3);
    let b = 3;
    let obs = randn(&mut rng, &[b, 3, 8, 8]);
    let next_obs = randn(&mut rng, &[b, 3, 8, 8]);
    let actions = Tensor::new(&[b, 2], (0..2 * b).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap();
    let rewards: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let dones: Vec<bool> = (0..b).map(|i| i == 0).collect();
    let coefs = SarCoefs {
        lambda: rng.random_range(0.01..1.0),
        lambda_gen: rng.random_range(0.01..1.0),
        kappa: rng.random_range(0.01..1.0),
        mix: true,
        adversarial: true,
    };
    let hyper = SacHyper {
        gamma: 0.99,
        target_entropy: -2.0,
    };
    let noise_seed = rng.random::<u64>();
    let build_with = |tape: &mut Tape, s: &ParamStore, coefs: &SarCoefs| {
        let batch = SacBatch {
            obs: &obs,
            actions: &actions,
            rewards: &rewards,
            next_obs: &next_obs,
            dones: &dones,
        };
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        sac_losses(tape, s, &net, Some(&gen as &dyn Perturber), &batch, &hyper, coefs, true, &mut r).unwrap()
    };
    let build = |tape: &mut Tape, s: &ParamStore| build_with(tape, s, &coefs);
    let group = |g: ParamGroup| -> Vec<ParamId> { store.ids_in(g).collect() };
    // the critic regularizer evaluates Q at a value-copied action, so the
    // encoder is checked without it and the Q heads with it
    let q_heads: Vec<ParamId> = group(ParamGroup::Critic)
        .into_iter()
        .filter(|&i| store.name(i).starts_with('q'))
        .collect();
    let encoder: Vec<ParamId> = group(ParamGroup::Critic)
        .into_iter()
        .filter(|&i| store.name(i).starts_with("enc"))
        .collect();
    let plain = SarCoefs {
        adversarial: false,
        ..coefs
    };
    let mut worst: f64 = 0.0;
    worst = worst.max(check_params(&store, &q_heads, &|t, s| build(t, s).critic_loss));
    worst = worst.max(check_params(&store, &encoder, &|t, s| build_with(t, s, &plain).critic_loss));
    worst = worst.max(check_params(&store, &group(ParamGroup::Actor), &|t, s| build(t, s).actor_loss.unwrap()));
    worst = worst.max(check_params(&store, &group(ParamGroup::Temperature), &|t, s| {
        build(t, s).alpha_loss.unwrap()
    }));
    worst = worst.max(check_params(&store, &group(ParamGroup::Generator), &|t, s| build(t, s).gen_loss.unwrap()));
    worst
}
