//! The training loops: PPO with the style-agnostic terms on a rollout
//! buffer, and SAC with the same terms on a replay buffer.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::buffers::{ReplayBuffer, RolloutBuffer, Transition};
use super::checkpoint::Checkpoint;
use super::config::{Algorithm, RunConfig};
use super::eval::{evaluate, EvalSummary};
use super::metrics::{MetricsRecord, MetricsWriter, UpdateRecord};
use super::model::{Model, Net};
use super::rundir::{checkpoint_path, write_config, write_eval};
use super::seed::seed_everything;
use super::HarnessError;
use crate::agents::{
    apply_updates, clip_grad_norm, normalize_advantages, polyak_update, sac_losses, sar_ppo_losses, Adam,
    AdamConfig, AgentError, PpoBatch, PpoNet, SacBatch, SacHyper, SacNet,
};
use crate::envs::{self, Action, Env, StylePool};
use crate::style::Perturber;
use crate::tensor::{Gradients, ParamGroup, ParamId, Tape, Var};

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub final_step: u64,
    pub eval: Vec<EvalSummary>,
}

/// Running variance of discounted returns, used to scale rewards.
#[derive(Clone, Debug)]
struct RewardScaler {
    gamma: f64,
    returns: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl RewardScaler {
    fn new(n: usize, gamma: f64) -> Self {
        Self {
            gamma,
            returns: vec![0.0; n],
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn scale(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        for (i, &r) in rewards.iter().enumerate() {
            self.returns[i] = self.returns[i] * self.gamma + r;
            // Welford
            self.count += 1.0;
            let d = self.returns[i] - self.mean;
            self.mean += d / self.count;
            self.m2 += d * (self.returns[i] - self.mean);
        }
        let var = if self.count > 1.0 { self.m2 / self.count } else { 1.0 };
        let scale = (var + 1e-8).sqrt();
        for (ret, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *ret = 0.0;
            }
        }
        rewards.iter().map(|r| r / scale).collect()
    }
}

struct Episodes {
    layout_rng: ChaCha8Rng,
    styles: Vec<u64>,
    n_layouts: u64,
}

impl Episodes {
    fn reset(&mut self, env: &mut dyn Env) -> Result<Vec<f64>, HarnessError> {
        let style = self.styles[self.layout_rng.random_range(0..self.styles.len())];
        let layout = self.layout_rng.random_range(0..self.n_layouts);
        Ok(env.reset(layout, style)?)
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    hash: [u8; 32],
    writer: MetricsWriter,
    start: Instant,
    next_eval: u64,
    next_checkpoint: u64,
    updates: u64,
}

impl Run<'_> {
    fn checkpoint(&self, model: &Model, step: u64) -> Result<(), HarnessError> {
        Checkpoint::from_store(&model.store, self.hash, step).save(&checkpoint_path(self.dir, step))?;
        Ok(())
    }

    fn maybe_checkpoint(&mut self, model: &Model, t: u64) -> Result<(), HarnessError> {
        let every = self.cfg.checkpoint_every;
        if every > 0 && t >= self.next_checkpoint && t < self.cfg.total_timesteps {
            self.checkpoint(model, t)?;
            while self.next_checkpoint <= t {
                self.next_checkpoint += every;
            }
        }
        Ok(())
    }

    fn maybe_eval(&mut self, model: &Model, t: u64, rec: &mut MetricsRecord) -> Result<(), HarnessError> {
        let every = self.cfg.eval_every;
        if every > 0 && t >= self.next_eval {
            let cfg = self.cfg;
            let train = evaluate(model, cfg, StylePool::Train, cfg.eval_episodes, cfg.eval_seed)?;
            let test = evaluate(model, cfg, StylePool::Test, cfg.eval_episodes, cfg.eval_seed)?;
            rec.eval_return_train_styles = Some(train.mean);
            rec.eval_return_test_styles = Some(test.mean);
            while self.next_eval <= t {
                self.next_eval += every;
            }
        }
        Ok(())
    }

    fn log(&mut self, rec: &mut MetricsRecord, model: &Model) -> Result<(), HarnessError> {
        rec.wall_time = self.start.elapsed().as_secs_f64();
        if let Some(what) = rec.non_finite() {
            return Err(self.abort(model, rec.timestep, what));
        }
        self.writer.append(rec)?;
        Ok(())
    }

    /// Writes a diagnostic snapshot and builds the abort error.
    fn abort(&self, model: &Model, timestep: u64, what: &str) -> HarnessError {
        let snapshot = self.dir.join("checkpoints").join("nan_snapshot.bin");
        let _ = Checkpoint::from_store(&model.store, self.hash, timestep).save(&snapshot);
        HarnessError::NonFinite {
            timestep,
            what: what.to_string(),
            snapshot,
        }
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    mean(&v)
}

/// Trains per `cfg` into `dir` and returns the final evaluation. `input` is
/// the configuration as supplied, persisted verbatim next to the resolved
/// values.
pub fn train(cfg: &RunConfig, input: &Value, dir: &Path) -> Result<RunOutput, HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    for (_, stale) in super::rundir::list_checkpoints(dir) {
        std::fs::remove_file(stale)?;
    }
    let _ = std::fs::remove_file(dir.join("eval.json"));
    write_config(dir, input, cfg)?;
    let mut model = Model::build(cfg)?;
    let mut run = Run {
        cfg,
        dir,
        hash: cfg.hash_bytes(),
        writer: MetricsWriter::create(dir)?,
        start: Instant::now(),
        next_eval: cfg.eval_every,
        next_checkpoint: cfg.checkpoint_every,
        updates: 0,
    };
    run.checkpoint(&model, 0)?;
    let final_step = match cfg.algorithm {
        Algorithm::Ppo => train_ppo(&mut run, &mut model)?,
        Algorithm::Sac => train_sac(&mut run, &mut model)?,
    };
    run.writer.flush()?;
    run.checkpoint(&model, final_step)?;
    let eval = vec![
        evaluate(&model, cfg, StylePool::Train, cfg.eval_episodes, cfg.eval_seed)?,
        evaluate(&model, cfg, StylePool::Test, cfg.eval_episodes, cfg.eval_seed)?,
    ];
    write_eval(dir, cfg, final_step, &eval)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        final_step,
        eval,
    })
}

fn adam(cfg: &AdamConfig, group: ParamGroup) -> Adam {
    Adam::new(group, *cfg)
}

fn ppo_net(model: &Model) -> &PpoNet {
    match &model.net {
        Net::Ppo(n) => n,
        Net::Sac(_) => unreachable!("config validated"),
    }
}

fn train_ppo(run: &mut Run<'_>, model: &mut Model) -> Result<u64, HarnessError> {
    let cfg = run.cfg;
    let p = &cfg.ppo;
    let seeds = seed_everything(cfg.seed);
    let mut action_rng = seeds.stream("action");
    let mut mb_rng = seeds.stream("minibatch");
    let mut perm_rng = seeds.stream("permutation");
    let mut aug_rng = seeds.stream("augmentation");
    let mut episodes = Episodes {
        layout_rng: seeds.stream("env"),
        styles: StylePool::Train.ids().take(cfg.n_train_styles).collect(),
        n_layouts: cfg.n_layouts,
    };
    let mut envs: Vec<Box<dyn Env>> = (0..p.n_envs).map(|_| envs::make(&cfg.env)).collect::<Result<_, _>>()?;
    let mut obs: Vec<Vec<f64>> = envs
        .iter_mut()
        .map(|e| episodes.reset(e.as_mut()))
        .collect::<Result<_, _>>()?;
    let obs_shape = model.obs_shape;
    let obs_len = obs_shape.iter().product();
    let adam_cfg = AdamConfig {
        lr: p.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: p.adam_eps,
    };
    let mut actor_opt = adam(&adam_cfg, ParamGroup::Actor);
    let mut critic_opt = adam(&adam_cfg, ParamGroup::Critic);
    let mut gen_opt = adam(&adam_cfg, ParamGroup::Generator);
    let mut scaler = RewardScaler::new(p.n_envs, p.gamma);
    let mut ep_returns = vec![0.0; p.n_envs];
    let mut buffer = RolloutBuffer::new(p.n_steps, p.n_envs, obs_len);
    let hyper = p.hyper();
    let mut t: u64 = 0;
    while t < cfg.total_timesteps {
        if p.anneal_lr {
            let lr = p.lr * (1.0 - t as f64 / cfg.total_timesteps as f64);
            for opt in [&mut actor_opt, &mut critic_opt, &mut gen_opt] {
                opt.cfg.lr = lr;
            }
        }
        buffer.clear();
        let mut finished = Vec::new();
        for _ in 0..p.n_steps {
            let batch = model.batch(obs.concat())?;
            let net = ppo_net(model);
            let mut tape = Tape::new();
            let (dist, values) = net.forward(&mut tape, &model.store, &batch)?;
            let crate::agents::Actions::Discrete(actions) = dist.sample(&tape, &mut action_rng) else {
                unreachable!()
            };
            let logp = dist.log_prob(&mut tape, &actions)?;
            let logp = tape.value(logp).data().to_vec();
            let values = tape.value(values).data().to_vec();
            let mut rewards = Vec::with_capacity(p.n_envs);
            let mut dones = Vec::with_capacity(p.n_envs);
            let mut next = Vec::with_capacity(p.n_envs);
            for (i, env) in envs.iter_mut().enumerate() {
                let step = env.step(&Action::Discrete(actions[i]))?;
                ep_returns[i] += step.reward;
                rewards.push(step.reward);
                dones.push(step.done);
                if step.done {
                    finished.push(ep_returns[i]);
                    ep_returns[i] = 0.0;
                    next.push(episodes.reset(env.as_mut())?);
                } else {
                    next.push(step.obs);
                }
            }
            let scaled = if p.reward_norm {
                scaler.scale(&rewards, &dones)
            } else {
                rewards.clone()
            };
            buffer.push_step(&batch.into_data(), &actions, &scaled, &dones, &values, &logp)?;
            obs = next;
            t += p.n_envs as u64;
        }
        let boot = {
            let batch = model.batch(obs.concat())?;
            let mut tape = Tape::new();
            let (_, v) = ppo_net(model).forward(&mut tape, &model.store, &batch)?;
            tape.value(v).data().to_vec()
        };
        let targets = buffer.targets(&boot, p.gamma, p.gae_lambda)?;
        let coefs = cfg.coefs_at(t);
        let n = buffer.len();
        let mb = n / p.minibatches;
        let mut records = Vec::new();
        let mut entropies = Vec::new();
        for _ in 0..p.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut mb_rng);
            for chunk in order.chunks(mb).take(p.minibatches) {
                let x = buffer.gather_obs(chunk, obs_shape);
                let x = cfg.augmentation.apply_batch(&x, &mut aug_rng);
                let actions: Vec<usize> = chunk.iter().map(|&i| buffer.actions[buffer.flat_index(i)]).collect();
                let logp_old: Vec<f64> = chunk.iter().map(|&i| buffer.logp[buffer.flat_index(i)]).collect();
                let mut adv: Vec<f64> = chunk.iter().map(|&i| targets.advantages[i]).collect();
                normalize_advantages(&mut adv);
                let rets: Vec<f64> = chunk.iter().map(|&i| targets.returns[i]).collect();
                let batch = PpoBatch {
                    obs: &x,
                    actions: &actions,
                    logp_old: &logp_old,
                    advantages: &adv,
                    targets: &rets,
                };
                let net = ppo_net(model);
                let perturber = model.generator.as_ref().map(|g| g as &dyn Perturber);
                let mut tape = Tape::new();
                let bundle = match sar_ppo_losses(
                    &mut tape,
                    &model.store,
                    net,
                    perturber,
                    &batch,
                    &hyper,
                    &coefs,
                    &mut perm_rng,
                ) {
                    Ok(b) => b,
                    Err(AgentError::NonFinite(what)) => return Err(run.abort(model, t, what)),
                    Err(e) => return Err(e.into()),
                };
                let scaled_critic = tape.scale(bundle.critic_loss, p.vf_coef)?;
                let total = tape.add(bundle.actor_loss, scaled_critic)?;
                let value = |v: Var| tape.value(v).item();
                let rec = UpdateRecord {
                    update: run.updates,
                    timestep: t,
                    l_div: bundle.l_div.map(value),
                    g_critic: bundle.g_critic.map(value),
                    actor_loss: value(bundle.actor_loss),
                    critic_loss: value(bundle.critic_loss),
                    gen_loss: bundle.gen_loss.map(value),
                };
                entropies.push(value(bundle.entropy_bonus) / p.entropy_coef.max(f64::MIN_POSITIVE));
                let store = &model.store;
                let ac = |id: ParamId| matches!(store.group(id), ParamGroup::Actor | ParamGroup::Critic);
                let gen = |id: ParamId| store.group(id) == ParamGroup::Generator;
                let mut targets_bw: Vec<(Var, &dyn Fn(ParamId) -> bool)> = vec![(total, &ac)];
                if let Some(g) = bundle.gen_loss {
                    targets_bw.push((g, &gen));
                }
                let mut grads = tape.backward_multi(&targets_bw)?;
                let mut gen_grads = if grads.len() > 1 { grads.pop() } else { None };
                let mut ac_grads = grads.pop().expect("actor-critic gradients");
                clip_grad_norm(&mut ac_grads, p.max_grad_norm);
                if let Some(g) = gen_grads.as_mut() {
                    clip_grad_norm(g, p.max_grad_norm);
                }
                let mut updates: Vec<(&mut Adam, &Gradients)> =
                    vec![(&mut actor_opt, &ac_grads), (&mut critic_opt, &ac_grads)];
                if let Some(g) = gen_grads.as_ref() {
                    updates.push((&mut gen_opt, g));
                }
                match apply_updates(&mut model.store, &mut updates) {
                    Ok(()) => {}
                    Err(AgentError::NonFinite(what)) => return Err(run.abort(model, t, what)),
                    Err(e) => return Err(e.into()),
                }
                run.writer.append_update(&rec)?;
                run.updates += 1;
                records.push(rec);
            }
        }
        let mut rec = MetricsRecord {
            timestep: t,
            episode_return: mean(&finished),
            l_div: mean_opt(&records.iter().map(|r| r.l_div).collect::<Vec<_>>()),
            g_critic: mean_opt(&records.iter().map(|r| r.g_critic).collect::<Vec<_>>()),
            actor_loss: mean(&records.iter().map(|r| r.actor_loss).collect::<Vec<_>>()),
            critic_loss: mean(&records.iter().map(|r| r.critic_loss).collect::<Vec<_>>()),
            gen_loss: mean_opt(&records.iter().map(|r| r.gen_loss).collect::<Vec<_>>()),
            entropy: mean(&entropies),
            adversarial_active: coefs.adversarial,
            ..Default::default()
        };
        run.maybe_eval(model, t, &mut rec)?;
        run.log(&mut rec, model)?;
        run.maybe_checkpoint(model, t)?;
    }
    Ok(t)
}

fn sac_net(model: &Model) -> &SacNet {
    match &model.net {
        Net::Sac(n) => n,
        Net::Ppo(_) => unreachable!("config validated"),
    }
}

fn train_sac(run: &mut Run<'_>, model: &mut Model) -> Result<u64, HarnessError> {
    let cfg = run.cfg;
    let s = &cfg.sac;
    let seeds = seed_everything(cfg.seed);
    let mut action_rng = seeds.stream("action");
    let mut mb_rng = seeds.stream("minibatch");
    let mut perm_rng = seeds.stream("permutation");
    let mut aug_rng = seeds.stream("augmentation");
    let mut episodes = Episodes {
        layout_rng: seeds.stream("env"),
        styles: StylePool::Train.ids().take(cfg.n_train_styles).collect(),
        n_layouts: cfg.n_layouts,
    };
    let mut env = envs::make(&cfg.env)?;
    let dim = match env.spec().action {
        envs::ActionSpace::Continuous { dim, .. } => dim,
        envs::ActionSpace::Discrete(_) => unreachable!("config validated"),
    };
    let obs_shape = model.obs_shape;
    let mut obs = episodes.reset(env.as_mut())?;
    let lr = AdamConfig::with_lr(s.lr);
    let mut actor_opt = Adam::new(ParamGroup::Actor, lr);
    let mut critic_opt = Adam::new(ParamGroup::Critic, lr);
    let mut gen_opt = Adam::new(ParamGroup::Generator, lr);
    let mut alpha_opt = Adam::new(
        ParamGroup::Temperature,
        AdamConfig {
            beta1: s.alpha_beta1,
            ..AdamConfig::with_lr(s.alpha_lr)
        },
    );
    let hyper = SacHyper {
        gamma: s.gamma,
        target_entropy: -(dim as f64),
    };
    let mut replay = ReplayBuffer::new(s.buffer_size);
    let mut ep_return = 0.0;
    let mut finished = Vec::new();
    let mut records: Vec<UpdateRecord> = Vec::new();
    let mut entropies = Vec::new();
    let mut next_log = s.log_every;
    let mut t: u64 = 0;
    while t < cfg.total_timesteps {
        let action = if t < s.initial_steps {
            (0..dim).map(|_| action_rng.random_range(-1.0..=1.0)).collect()
        } else {
            let batch = model.batch(obs.clone())?;
            match model.act(&batch, false, &mut action_rng)?.remove(0) {
                Action::Continuous(a) => a,
                Action::Discrete(_) => unreachable!(),
            }
        };
        let step = env.step(&Action::Continuous(action.clone()))?;
        ep_return += step.reward;
        let terminal = step.done && !step.info.truncated;
        replay.push(Transition {
            obs: obs.clone(),
            action,
            reward: step.reward,
            next_obs: step.obs.clone(),
            done: terminal,
        });
        obs = if step.done {
            finished.push(ep_return);
            ep_return = 0.0;
            episodes.reset(env.as_mut())?
        } else {
            step.obs
        };
        t += 1;
        if t >= s.initial_steps && replay.len() >= s.batch_size {
            let coefs = cfg.coefs_at(t);
            let update_actor = t % s.actor_update_every == 0;
            let b = replay.sample(s.batch_size, obs_shape, &mut mb_rng)?;
            let o = cfg.augmentation.apply_batch(&b.obs, &mut aug_rng);
            let no = cfg.augmentation.apply_batch(&b.next_obs, &mut aug_rng);
            let batch = SacBatch {
                obs: &o,
                actions: &b.actions,
                rewards: &b.rewards,
                next_obs: &no,
                dones: &b.dones,
            };
            let net = sac_net(model);
            let perturber = model.generator.as_ref().map(|g| g as &dyn Perturber);
            let mut tape = Tape::new();
            let losses = match sac_losses(
                &mut tape,
                &model.store,
                net,
                perturber,
                &batch,
                &hyper,
                &coefs,
                update_actor,
                &mut perm_rng,
            ) {
                Ok(l) => l,
                Err(AgentError::NonFinite(what)) => return Err(run.abort(model, t, what)),
                Err(e) => return Err(e.into()),
            };
            let value = |v: Var| tape.value(v).item();
            let rec = UpdateRecord {
                update: run.updates,
                timestep: t,
                l_div: losses.l_div.map(value),
                g_critic: losses.g_critic.map(value),
                actor_loss: losses.actor_loss.map(value).unwrap_or(f64::NAN),
                critic_loss: value(losses.critic_loss),
                gen_loss: losses.gen_loss.map(value),
            };
            if let Some(e) = losses.entropy {
                entropies.push(e);
            }
            let store = &model.store;
            let critic = |id: ParamId| store.group(id) == ParamGroup::Critic;
            let actor = |id: ParamId| store.group(id) == ParamGroup::Actor;
            let temp = |id: ParamId| store.group(id) == ParamGroup::Temperature;
            let gen = |id: ParamId| store.group(id) == ParamGroup::Generator;
            let mut targets: Vec<(Var, &dyn Fn(ParamId) -> bool)> = vec![(losses.critic_loss, &critic)];
            let mut opts: Vec<&mut Adam> = vec![&mut critic_opt];
            if let (Some(a), Some(al)) = (losses.actor_loss, losses.alpha_loss) {
                targets.push((a, &actor));
                targets.push((al, &temp));
                opts.push(&mut actor_opt);
                opts.push(&mut alpha_opt);
            }
            if let Some(g) = losses.gen_loss {
                targets.push((g, &gen));
                opts.push(&mut gen_opt);
            }
            let grads = tape.backward_multi(&targets)?;
            let mut updates: Vec<(&mut Adam, &Gradients)> = opts.into_iter().zip(grads.iter()).collect();
            match apply_updates(&mut model.store, &mut updates) {
                Ok(()) => {}
                Err(AgentError::NonFinite(what)) => return Err(run.abort(model, t, what)),
                Err(e) => return Err(e.into()),
            }
            if t % s.target_update_every == 0 {
                let net = sac_net(model);
                let (enc, q) = (net.encoder_pairs(), net.q_pairs());
                polyak_update(&mut model.store, &enc, s.tau_encoder);
                polyak_update(&mut model.store, &q, s.tau_q);
            }
            run.writer.append_update(&rec)?;
            run.updates += 1;
            records.push(rec);
        }
        if t >= next_log || t == cfg.total_timesteps {
            while next_log <= t {
                next_log += s.log_every;
            }
            let actor: Vec<f64> = records.iter().map(|r| r.actor_loss).filter(|v| !v.is_nan()).collect();
            let mut rec = MetricsRecord {
                timestep: t,
                episode_return: mean(&finished),
                l_div: mean_opt(&records.iter().map(|r| r.l_div).collect::<Vec<_>>()),
                g_critic: mean_opt(&records.iter().map(|r| r.g_critic).collect::<Vec<_>>()),
                actor_loss: mean(&actor),
                critic_loss: mean(&records.iter().map(|r| r.critic_loss).collect::<Vec<_>>()),
                gen_loss: mean_opt(&records.iter().map(|r| r.gen_loss).collect::<Vec<_>>()),
                entropy: mean(&entropies),
                adversarial_active: cfg.coefs_at(t).adversarial,
                ..Default::default()
            };
            run.maybe_eval(model, t, &mut rec)?;
            run.log(&mut rec, model)?;
            run.maybe_checkpoint(model, t)?;
            finished.clear();
            records.clear();
            entropies.clear();
        }
    }
    Ok(t)
}
