//! Run configuration, defaults, and validation.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agents::{EncoderConfig, PpoHyper, SarCoefs};
use crate::envs::{self, ActionSpace, Augmentation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ppo,
    Sac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub n_steps: usize,
    pub n_envs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub reward_norm: bool,
    /// Decay the learning rate linearly to 0 over the run.
    pub anneal_lr: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            gae_lambda: 0.95,
            n_steps: 256,
            n_envs: 8,
            epochs: 3,
            minibatches: 8,
            lr: 5e-4,
            adam_eps: 1e-5,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            reward_norm: true,
            anneal_lr: false,
        }
    }
}

impl PpoConfig {
    pub fn hyper(&self) -> PpoHyper {
        PpoHyper {
            clip_eps: self.clip_eps,
            entropy_coef: self.entropy_coef,
            vf_coef: self.vf_coef,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub lr: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub init_temperature: f64,
    pub tau_q: f64,
    pub tau_encoder: f64,
    pub actor_update_every: u64,
    pub target_update_every: u64,
    pub initial_steps: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Metrics row every this many timesteps.
    pub log_every: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 128,
            buffer_size: 100_000,
            lr: 1e-3,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            init_temperature: 0.1,
            tau_q: 0.01,
            tau_encoder: 0.05,
            actor_update_every: 2,
            target_update_every: 2,
            initial_steps: 1000,
            hidden: 64,
            embed_dim: 50,
            log_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub env: String,
    /// Label used to group runs in comparisons.
    pub variant: String,
    pub seed: u64,
    pub total_timesteps: u64,
    pub lambda: f64,
    /// Generator coefficient; `null` means equal to `lambda`.
    pub lambda_gen: Option<f64>,
    pub kappa: f64,
    /// In-batch style mixing on the clean branch.
    pub mix: bool,
    pub warmup_timesteps: u64,
    /// Evaluate every this many timesteps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Checkpoint every this many timesteps; 0 saves only the first and
    /// last.
    pub checkpoint_every: u64,
    pub augmentation: Augmentation,
    /// Training styles are the first this many ids of the train pool.
    pub n_train_styles: usize,
    /// Episode layouts are drawn from seeds `0..n_layouts`.
    pub n_layouts: u64,
    pub encoder: EncoderConfig,
    pub generator_hidden: usize,
    pub ppo: PpoConfig,
    pub sac: SacConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ppo,
            env: "gridworld-v0".into(),
            variant: "sar".into(),
            seed: 0,
            total_timesteps: 300_000,
            lambda: 0.01,
            lambda_gen: None,
            kappa: 0.1,
            mix: true,
            warmup_timesteps: 0,
            eval_every: 0,
            eval_episodes: 10,
            eval_seed: 12345,
            checkpoint_every: 0,
            augmentation: Augmentation::None,
            n_train_styles: 200,
            n_layouts: 16,
            encoder: EncoderConfig::default(),
            generator_hidden: 64,
            ppo: PpoConfig::default(),
            sac: SacConfig::default(),
        }
    }
}

/// One rejected field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn field(errors: &mut Vec<FieldError>, name: &str, ok: bool, message: &str) {
    if !ok {
        errors.push(FieldError {
            field: name.into(),
            message: message.into(),
        });
    }
}

impl RunConfig {
    /// Parses a JSON object, filling omitted fields with defaults.
    pub fn from_value(v: &Value) -> Result<Self, Vec<FieldError>> {
        let cfg: Self = serde_json::from_value(v.clone()).map_err(|e| {
            vec![FieldError {
                field: "<config>".into(),
                message: e.to_string(),
            }]
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambda_gen(&self) -> f64 {
        self.lambda_gen.unwrap_or(self.lambda)
    }

    /// Whether any adversarial coefficient is non-zero.
    pub fn uses_adversary(&self) -> bool {
        self.lambda != 0.0 || self.lambda_gen() != 0.0 || self.kappa != 0.0
    }

    /// Coefficients at timestep `t`, with the warm-up indicator applied.
    pub fn coefs_at(&self, t: u64) -> SarCoefs {
        SarCoefs {
            lambda: self.lambda,
            lambda_gen: self.lambda_gen(),
            kappa: self.kappa,
            mix: self.mix,
            adversarial: self.uses_adversary() && t >= self.warmup_timesteps,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut e = Vec::new();
        let spec = envs::obs_spec(&self.env);
        field(&mut e, "env", spec.is_ok(), "unknown environment id; known: gridworld-v0, pointmass-v0");
        if let Ok(spec) = &spec {
            let ok = matches!(
                (self.algorithm, &spec.action),
                (Algorithm::Ppo, ActionSpace::Discrete(_)) | (Algorithm::Sac, ActionSpace::Continuous { .. })
            );
            field(&mut e, "algorithm", ok, "ppo needs a discrete-action env, sac a continuous one");
        }
        field(&mut e, "variant", !self.variant.is_empty(), "must be non-empty");
        field(&mut e, "total_timesteps", self.total_timesteps > 0, "must be positive");
        for (name, v) in [("lambda", self.lambda), ("kappa", self.kappa), ("lambda_gen", self.lambda_gen())] {
            field(&mut e, name, v.is_finite() && v >= 0.0, "must be finite and non-negative");
        }
        field(&mut e, "eval_episodes", self.eval_episodes > 0, "must be positive");
        field(
            &mut e,
            "n_train_styles",
            (1..=200).contains(&self.n_train_styles),
            "must be in 1..=200",
        );
        field(&mut e, "n_layouts", self.n_layouts > 0, "must be positive");
        let enc = &self.encoder;
        field(&mut e, "encoder.channels", enc.channels.iter().all(|&c| c > 0), "must be positive");
        field(&mut e, "encoder.kernels", enc.kernels.iter().all(|&k| (1..=8).contains(&k)), "must be in 1..=8");
        field(
            &mut e,
            "encoder.strides",
            enc.strides.iter().zip(&enc.kernels).all(|(&s, &k)| s >= 1 && s <= k),
            "must be in 1..=kernel",
        );
        if let Ok(spec) = envs::obs_spec(&self.env) {
            let mut n = spec.shape[1].min(spec.shape[2]);
            let mut sizes = [0; 3];
            for i in 0..3 {
                let (k, s) = (enc.kernels[i], enc.strides[i].max(1));
                let pad = if s == k { 0 } else { k / 2 };
                n = if n + 2 * pad >= k { (n + 2 * pad - k) / s + 1 } else { 0 };
                sizes[i] = n;
            }
            field(
                &mut e,
                "encoder",
                sizes[1] >= 2 && sizes[2] >= 1,
                "branch feature map must be at least 2×2 and the last block non-empty",
            );
        }
        field(&mut e, "encoder.embed_dim", enc.embed_dim > 0, "must be positive");
        field(&mut e, "generator_hidden", self.generator_hidden > 0, "must be positive");
        let p = &self.ppo;
        field(&mut e, "ppo.gamma", (0.0..=1.0).contains(&p.gamma), "must be in [0, 1]");
        field(&mut e, "ppo.gae_lambda", (0.0..=1.0).contains(&p.gae_lambda), "must be in [0, 1]");
        field(&mut e, "ppo.n_steps", p.n_steps > 0, "must be positive");
        field(&mut e, "ppo.n_envs", p.n_envs > 0, "must be positive");
        field(&mut e, "ppo.epochs", p.epochs > 0, "must be positive");
        field(
            &mut e,
            "ppo.minibatches",
            p.minibatches > 0 && p.minibatches <= p.n_steps * p.n_envs,
            "must be in 1..=n_steps*n_envs",
        );
        field(&mut e, "ppo.lr", p.lr > 0.0 && p.lr.is_finite(), "must be positive");
        field(&mut e, "ppo.adam_eps", p.adam_eps > 0.0, "must be positive");
        field(&mut e, "ppo.clip_eps", p.clip_eps > 0.0 && p.clip_eps < 1.0, "must be in (0, 1)");
        field(&mut e, "ppo.entropy_coef", p.entropy_coef >= 0.0, "must be non-negative");
        field(&mut e, "ppo.vf_coef", p.vf_coef >= 0.0, "must be non-negative");
        field(&mut e, "ppo.max_grad_norm", p.max_grad_norm > 0.0, "must be positive");
        let s = &self.sac;
        field(&mut e, "sac.gamma", (0.0..=1.0).contains(&s.gamma), "must be in [0, 1]");
        field(&mut e, "sac.batch_size", s.batch_size > 0, "must be positive");
        field(&mut e, "sac.buffer_size", s.buffer_size >= s.batch_size, "must be at least batch_size");
        field(&mut e, "sac.lr", s.lr > 0.0, "must be positive");
        field(&mut e, "sac.alpha_lr", s.alpha_lr > 0.0, "must be positive");
        field(&mut e, "sac.alpha_beta1", (0.0..1.0).contains(&s.alpha_beta1), "must be in [0, 1)");
        field(&mut e, "sac.init_temperature", s.init_temperature > 0.0, "must be positive");
        field(&mut e, "sac.tau_q", (0.0..=1.0).contains(&s.tau_q), "must be in [0, 1]");
        field(&mut e, "sac.tau_encoder", (0.0..=1.0).contains(&s.tau_encoder), "must be in [0, 1]");
        field(&mut e, "sac.actor_update_every", s.actor_update_every > 0, "must be positive");
        field(&mut e, "sac.target_update_every", s.target_update_every > 0, "must be positive");
        field(&mut e, "sac.hidden", s.hidden > 0, "must be positive");
        field(&mut e, "sac.embed_dim", s.embed_dim > 0, "must be positive");
        field(&mut e, "sac.log_every", s.log_every > 0, "must be positive");
        if e.is_empty() {
            Ok(())
        } else {
            Err(e)
        }
    }

    /// Encoder settings in effect for this algorithm.
    pub fn encoder_config(&self) -> EncoderConfig {
        match self.algorithm {
            Algorithm::Ppo => self.encoder.clone(),
            Algorithm::Sac => EncoderConfig {
                embed_dim: self.sac.embed_dim,
                ..self.encoder.clone()
            },
        }
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("serializable");
        Sha256::digest(json.as_bytes()).into()
    }
}
