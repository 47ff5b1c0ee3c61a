//! Supervised source pretraining and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seg_loss, BnMode, MiniSegNet};
use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::metrics::{dsc_per_class, sigmoid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Running-statistics momentum.
    pub bn_momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            lr: 0.01,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

/// Trains `net` in place on image/mask pairs; returns the loss per step.
pub fn pretrain(
    net: &mut MiniSegNet,
    images: &[Tensor],
    masks: &[Tensor],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::Data("need equally many non-zero images and masks".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size > 4 {
        return Err(Error::Config("batch size must be in 1..=4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut states: Vec<AdamState> = net
        .trainable_mut()
        .iter()
        .map(|t| AdamState::new(t.len(), cfg.lr))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let xs: Vec<&Tensor> = batch.iter().map(|&i| &images[i]).collect();
        let ys: Vec<&Tensor> = batch.iter().map(|&i| &masks[i]).collect();
        let x = Tensor::stack(&xs)?;
        let y = Tensor::stack(&ys)?;
        let (logits, tape) = net.forward(&x, BnMode::Batch)?;
        let (loss, grad) = seg_loss(&logits, &y)?;
        let grads = net.backward_params(&tape, &grad)?;
        for ((param, g), st) in net.trainable_mut().into_iter().zip(grads.tensors()).zip(&mut states) {
            st.step(param.data_mut(), g.data(), None);
        }
        net.update_running_stats(&tape, cfg.bn_momentum);
        losses.push(loss);
    }
    Ok(losses)
}

/// Sigmoid probabilities for a single `[3, H, W]` image.
pub fn predict(net: &MiniSegNet, image: &Tensor, mode: BnMode) -> Result<(Tensor, Tensor)> {
    let (logits, _) = net.forward(&image.clone().batched()?, mode)?;
    let logits = logits.item(0)?;
    Ok((logits.map(sigmoid), logits))
}

/// Mean over samples of the class-averaged DSC.
pub fn evaluate(net: &MiniSegNet, images: &[Tensor], masks: &[Tensor], mode: BnMode) -> Result<f64> {
    let scores = crate::par::map_range(images.len(), |i| -> Result<f64> {
        let (p, _) = predict(net, &images[i], mode)?;
        let d = dsc_per_class(&p, &masks[i])?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
