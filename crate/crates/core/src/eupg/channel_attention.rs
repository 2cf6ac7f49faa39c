//! Per-channel gating from pooled spatial statistics.

use candle_core::Tensor;

use crate::encoder::FeatureMap;
use crate::error::{shape_err, Result};
use crate::nn::{sigmoid, Linear, ParamStore};

/// Two 1×1 convolutions (`c → c/r → c`) with ReLU between them, shared by
/// the max-pooled and average-pooled branches.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub expand: Linear,
    /// When false the gate is fixed at 1 and the map passes through.
    pub enabled: bool,
}

impl ChannelAttention {
    pub fn new(ps: &ParamStore, channels: usize, reduction: usize, enabled: bool) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            squeeze: Linear::new(&ps.pp("squeeze"), channels, hidden)?,
            expand: Linear::new(&ps.pp("expand"), hidden, channels)?,
            enabled,
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.weight.dims()[1]
    }

    fn branch(&self, pooled: &Tensor) -> Result<Tensor> {
        self.expand.forward(&self.squeeze.forward(pooled)?.relu()?)
    }

    /// Gate values `(b, c)`, each in (0, 1).
    pub fn gate(&self, feature: &FeatureMap) -> Result<Tensor> {
        if feature.channels() != self.channels() {
            return shape_err(format!(
                "channel attention built for {} channels, got {}",
                self.channels(),
                feature.channels()
            ));
        }
        let max = feature.tokens.max(1)?;
        let avg = feature.tokens.mean(1)?;
        sigmoid(&(self.branch(&max)? + self.branch(&avg)?)?)
    }

    pub fn forward(&self, feature: &FeatureMap) -> Result<FeatureMap> {
        if !self.enabled {
            if feature.channels() != self.channels() {
                return shape_err("channel width mismatch");
            }
            return Ok(feature.clone());
        }
        let gate = self.gate(feature)?;
        let tokens = feature.tokens.broadcast_mul(&gate.unsqueeze(1)?)?;
        FeatureMap::new(tokens, feature.h, feature.w)
    }
}
