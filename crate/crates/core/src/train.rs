//! Pretraining of the toy encoder: plain full-batch gradient descent on the
//! contrastive retain loss over the whole train pool, fixed step, fixed epoch
//! count. Unlearning only means something against a trained model; this
//! manufactures one reproducibly.

use crate::error::Result;
use crate::model::DualEncoderModel;
use crate::objectives::{grad, retain_loss, LossKind, PairBatch};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        // Stops while the forget-loss gradients are still a usable fraction
        // of the layer norms; accuracy saturates long before the loss floor.
        PretrainConfig {
            learning_rate: 0.05,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
}

pub fn pretrain(
    model: &DualEncoderModel,
    pool: &PairBatch,
    config: &PretrainConfig,
) -> Result<(DualEncoderModel, PretrainHistory)> {
    let mut current = model.clone();
    let initial_loss = retain_loss(&current, pool)?;
    for _ in 0..config.epochs {
        let g = grad(&current, pool, LossKind::Retain)?;
        let vision_layers = current.vision.layers.len();
        for (ordinal, layer) in current
            .vision
            .layers
            .iter_mut()
            .chain(current.text.layers.iter_mut())
            .enumerate()
        {
            debug_assert!(ordinal < vision_layers + g.per_layer.len());
            let lg = &g.per_layer[ordinal];
            layer.weight.axpy(-config.learning_rate, &lg.weight);
            layer.bias.axpy(-config.learning_rate, &lg.bias);
        }
    }
    let final_loss = retain_loss(&current, pool)?;
    Ok((
        current,
        PretrainHistory {
            initial_loss,
            final_loss,
            epochs: config.epochs,
        },
    ))
}
