use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ACT_DIM, STATE_DIM};

/// Architecture and training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtConfig {
    /// Context window in (return-to-go, state, action) triplets.
    pub context: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub state_dim: usize,
    pub act_dim: usize,
    pub max_timestep: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub init_std: f64,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            context: 20,
            embed_dim: 128,
            layers: 3,
            heads: 1,
            dropout: 0.1,
            state_dim: STATE_DIM,
            act_dim: ACT_DIM,
            max_timestep: 200,
            steps: 10_000,
            batch: 64,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            init_std: 0.02,
        }
    }
}

impl DtConfig {
    /// Width of the feed-forward hidden layer before any structured pruning.
    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn tokens(&self) -> usize {
        3 * self.context
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.context == 0 {
            return fail("context window must be at least 1".into());
        }
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 {
            return fail("embed_dim, layers and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.state_dim != STATE_DIM || self.act_dim != ACT_DIM {
            return fail(format!(
                "state/action dims must be {STATE_DIM}/{ACT_DIM}, got {}/{}",
                self.state_dim, self.act_dim
            ));
        }
        if self.max_timestep == 0 || self.batch == 0 {
            return fail("max_timestep and batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) || !(self.init_std > 0.0) {
            return fail("lr and init_std must be positive, weight_decay and grad_clip non-negative".into());
        }
        Ok(())
    }

    /// Checks that every trajectory fits the timestep embedding table.
    pub fn check_horizon(&self, horizon: usize) -> Result<()> {
        if horizon > self.max_timestep {
            return Err(Error::Config(format!(
                "episode length {horizon} exceeds max_timestep {}",
                self.max_timestep
            )));
        }
        Ok(())
    }
}
