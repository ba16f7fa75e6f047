//! Networks assembled from a run config.

use rand::Rng;

use super::config::{Algorithm, RunConfig};
use super::seed::seed_everything;
use super::HarnessError;
use crate::agents::{Actions, PpoNet, SacNet};
use crate::envs::{self, Action, ActionSpace};
use crate::style::PerturbGenerator;
use crate::tensor::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug)]
pub enum Net {
    Ppo(PpoNet),
    Sac(SacNet),
}

/// Parameters plus the network structure that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub net: Net,
    /// Present iff the config has a non-zero adversarial coefficient.
    pub generator: Option<PerturbGenerator>,
    pub obs_shape: [usize; 3],
}

impl Model {
    /// Initializes from the `policy-init` and `generator-init` streams of
    /// the config seed.
    pub fn build(cfg: &RunConfig) -> Result<Self, HarnessError> {
        let spec = envs::obs_spec(&cfg.env)?;
        let seeds = seed_everything(cfg.seed);
        let mut rng = seeds.stream("policy-init");
        let mut store = ParamStore::new();
        let enc = cfg.encoder_config();
        let net = match (cfg.algorithm, &spec.action) {
            (Algorithm::Ppo, ActionSpace::Discrete(n)) => {
                Net::Ppo(PpoNet::new(&mut store, spec.shape, *n, &enc, &mut rng))
            }
            (Algorithm::Sac, ActionSpace::Continuous { dim, .. }) => Net::Sac(SacNet::new(
                &mut store,
                spec.shape,
                *dim,
                &enc,
                cfg.sac.hidden,
                cfg.sac.init_temperature,
                &mut rng,
            )),
            _ => {
                return Err(HarnessError::Invalid(
                    "algorithm does not match the environment's action space".into(),
                ))
            }
        };
        let generator = if cfg.uses_adversary() {
            let mut grng = seeds.stream("generator-init");
            let channels = match &net {
                Net::Ppo(n) => n.encoder.branch_shape()[0],
                Net::Sac(n) => n.encoder.branch_shape()[0],
            };
            Some(PerturbGenerator::new(
                &mut store,
                "gen",
                channels,
                cfg.generator_hidden,
                &mut grng,
            ))
        } else {
            None
        };
        Ok(Self {
            store,
            net,
            generator,
            obs_shape: spec.shape,
        })
    }

    pub fn batch(&self, obs: Vec<f64>) -> Result<Tensor, HarnessError> {
        let [c, h, w] = self.obs_shape;
        let b = obs.len() / (c * h * w);
        Ok(Tensor::new(&[b, c, h, w], obs)?)
    }

    /// Actions for a batch of observations. Deterministic actions are the
    /// most probable action (lowest index on ties) or `tanh(mean)`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Tensor,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Vec<Action>, HarnessError> {
        match &self.net {
            Net::Ppo(net) => {
                let mut tape = Tape::new();
                let (dist, _) = net.forward(&mut tape, &self.store, obs)?;
                let acts = if deterministic {
                    dist.mode(&tape)
                } else {
                    dist.sample(&tape, rng)
                };
                let Actions::Discrete(a) = acts else {
                    unreachable!()
                };
                Ok(a.into_iter().map(Action::Discrete).collect())
            }
            Net::Sac(net) => {
                let a = net.act(&self.store, obs, deterministic, rng)?;
                let d = a.shape()[1];
                Ok(a.data().chunks(d).map(|r| Action::Continuous(r.to_vec())).collect())
            }
        }
    }

    /// Branch-point feature maps, one flattened row per observation.
    pub fn branch_features(&self, obs: &Tensor) -> Result<Vec<Vec<f64>>, HarnessError> {
        let mut tape = Tape::new();
        let x = tape.constant(obs.clone());
        let z = match &self.net {
            Net::Ppo(n) => n.encode_to_branch(&mut tape, &self.store, x)?,
            Net::Sac(n) => n.encoder.encode_to_branch(&mut tape, &self.store, x)?,
        };
        let t = tape.value(z);
        let per = t.numel() / t.shape()[0];
        Ok(t.data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}
