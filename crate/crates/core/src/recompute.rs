//! Per-layer activation recomputation: the checkpointed forward keeps only
//! the layer input; backward re-runs the layer forward before its backward.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// A layer with a hand-written backward.
pub trait Layer {
    type Saved;
    type Grads;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Self::Saved)>;
    fn backward(&self, dout: &Tensor, saved: Self::Saved) -> Result<(Tensor, Self::Grads)>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    #[default]
    #[serde(rename = "per-layer")]
    PerLayer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckpointPolicy {
    pub enabled: bool,
    pub granularity: Granularity,
}

impl CheckpointPolicy {
    pub fn new(enabled: bool) -> Self {
        CheckpointPolicy {
            enabled,
            granularity: Granularity::PerLayer,
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub x: Tensor,
}

pub fn checkpointed_forward<L: Layer>(layer: &L, x: &Tensor) -> Result<(Tensor, Checkpoint)> {
    let (out, saved) = layer.forward(x)?;
    drop(saved);
    Ok((out, Checkpoint { x: x.clone() }))
}

pub fn checkpointed_backward<L: Layer>(layer: &L, saved: Checkpoint, dout: &Tensor) -> Result<(Tensor, L::Grads)> {
    let (out, inner) = layer.forward(&saved.x)?;
    drop(out);
    drop(saved);
    layer.backward(dout, inner)
}

/// Saved state under either policy.
#[derive(Debug)]
pub enum LayerSaved<S> {
    Full(S),
    Checkpointed(Checkpoint),
}

pub fn policy_forward<L: Layer>(
    layer: &L,
    x: &Tensor,
    policy: CheckpointPolicy,
) -> Result<(Tensor, LayerSaved<L::Saved>)> {
    if policy.enabled {
        let (o, c) = checkpointed_forward(layer, x)?;
        Ok((o, LayerSaved::Checkpointed(c)))
    } else {
        let (o, s) = layer.forward(x)?;
        Ok((o, LayerSaved::Full(s)))
    }
}

pub fn policy_backward<L: Layer>(layer: &L, saved: LayerSaved<L::Saved>, dout: &Tensor) -> Result<(Tensor, L::Grads)> {
    match saved {
        LayerSaved::Full(s) => layer.backward(dout, s),
        LayerSaved::Checkpointed(c) => checkpointed_backward(layer, c, dout),
    }
}
