use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{init_linear, ConvBlock, Linear};
use super::AgentError;
use crate::tensor::{conv_output_size, ParamGroup, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the three conv blocks.
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    /// A block whose stride equals its kernel is unpadded; others pad by
    /// `kernel / 2`.
    pub strides: [usize; 3],
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 16, 16],
            kernels: [4, 3, 3],
            strides: [4, 1, 2],
            embed_dim: 64,
        }
    }
}

/// Three conv blocks and an affine embedding. The default stem is one
/// unpadded 4×4 stride-4 conv, one output position per grid cell. The branch point
/// sits after the second block; the third block and the affine head form
/// the post-branch trunk shared by every branch.
#[derive(Clone, Debug)]
pub struct Encoder {
    obs_shape: [usize; 3],
    branch_shape: [usize; 3],
    b1: ConvBlock,
    b2: ConvBlock,
    b3: ConvBlock,
    fc: Linear,
    embed_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        obs_shape: [usize; 3],
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let [k1, k2, k3] = cfg.kernels;
        let [s1, s2, s3] = cfg.strides;
        let block = |store: &mut ParamStore, rng: &mut R, i: usize, cin, cout, k, s| {
            ConvBlock::new(store, &format!("{prefix}.b{i}"), group, cin, cout, k, s, rng)
        };
        let b1 = block(store, rng, 1, obs_shape[0], c1, k1, s1);
        let b2 = block(store, rng, 2, c1, c2, k2, s2);
        let b3 = block(store, rng, 3, c2, c3, k3, s3);
        let size = |b: &ConvBlock, n: usize| conv_output_size(n, b.kernel, b.stride, b.pad);
        let (h2, w2) = (size(&b2, size(&b1, obs_shape[1])), size(&b2, size(&b1, obs_shape[2])));
        let (h3, w3) = (size(&b3, h2), size(&b3, w2));
        let fc = init_linear(
            store,
            &format!("{prefix}.fc"),
            group,
            c3 * h3 * w3,
            cfg.embed_dim,
            2f64.sqrt(),
            rng,
        );
        Self {
            obs_shape,
            branch_shape: [c2, h2, w2],
            b1,
            b2,
            b3,
            fc,
            embed_dim: cfg.embed_dim,
        }
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.obs_shape
    }

    /// `C×H×W` of the feature map at the branch point.
    pub fn branch_shape(&self) -> [usize; 3] {
        self.branch_shape
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Blocks one and two: observation to branch-point feature map.
    pub fn encode_to_branch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: Var,
    ) -> Result<Var, AgentError> {
        let shape = tape.try_value(obs)?.shape();
        if shape.len() != 4 || shape[1..] != self.obs_shape {
            return Err(AgentError::ObsShape {
                expected: self.obs_shape.to_vec(),
                got: shape.to_vec(),
            });
        }
        let h = self.b1.forward(tape, store, obs)?;
        Ok(self.b2.forward(tape, store, h)?)
    }

    /// Block three, flatten, and the affine embedding with ReLU.
    pub fn embed_from_branch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
    ) -> Result<Var, AgentError> {
        let h = self.b3.forward(tape, store, z)?;
        let flat = tape.flatten(h)?;
        let e = self.fc.forward(tape, store, flat)?;
        Ok(tape.relu(e)?)
    }

    /// Parameter names in registration order, paired with their ids.
    pub fn param_ids(&self) -> Vec<crate::tensor::ParamId> {
        [&self.b1, &self.b2, &self.b3]
            .iter()
            .flat_map(|b| [b.w, b.b])
            .chain([self.fc.w, self.fc.b])
            .collect()
    }
}
