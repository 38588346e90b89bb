use serde::{Deserialize, Serialize};

use super::weights::FlatWeights;
use crate::error::Result;

/// Hyperparameters of SGD with classical momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.5,
        }
    }
}

/// SGD state owned by exactly one training context.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: FlatWeights,
}

impl OptimizerState {
    /// Fresh state with zero velocity shaped like `model`.
    pub fn new(config: SgdConfig, model: &FlatWeights) -> Self {
        Self {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            velocity: model.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &FlatWeights {
        &self.velocity
    }
}

/// One momentum step, in place:
///
/// ```text
/// velocity <- momentum * velocity + grad
/// model    <- model - learning_rate * velocity
/// ```
pub fn sgd_step(
    model: &mut FlatWeights,
    grad: &FlatWeights,
    opt: &mut OptimizerState,
) -> Result<()> {
    model.check_layout(grad)?;
    model.check_layout(&opt.velocity)?;
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for ((w, v), g) in model
        .values_mut()
        .iter_mut()
        .zip(opt.velocity.values_mut())
        .zip(grad.values())
    {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}
