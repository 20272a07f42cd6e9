//! Minimal dense-network substrate: batched forward and reverse passes,
//! RMSProp, parameter transport, and a finite-difference checker.

mod gradcheck;
mod net;
mod rmsprop;

pub use gradcheck::{central_difference, max_relative_error, relative_error, RELATIVE_ERROR_FLOOR};
pub use net::{Activation, ForwardCache, LayerSpec, NetGrads, NetParams, NetSpec};
pub use rmsprop::{RmsProp, RmsPropConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network: spec, flat parameters in layer order (weights
/// row-major as `input x output`, then biases), optional optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub spec: NetSpec,
    pub params: Vec<f64>,
    pub optimizer: Option<RmsProp>,
}

impl NetCheckpoint {
    pub fn capture(params: &NetParams, optimizer: Option<&RmsProp>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec: params.spec().clone(),
            params: params.to_flat(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn restore(&self) -> Result<(NetParams, Option<RmsProp>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported network checkpoint version {}",
                self.version
            )));
        }
        let params = NetParams::from_flat(&self.spec, &self.params)?;
        if let Some(opt) = &self.optimizer {
            if opt.accumulator().len() != params.param_count() {
                return Err(Error::Shape("optimizer state does not match parameters".into()));
            }
        }
        Ok((params, self.optimizer.clone()))
    }
}
