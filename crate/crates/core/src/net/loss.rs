//! Batch-norm statistic alignment loss and the supervised segmentation loss.

use serde::{Deserialize, Serialize};

use super::{ForwardTape, MiniSegNet, ENCODER_BN_LAYERS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which batch-norm layers contribute to the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnLossScope {
    #[default]
    All,
    Encoder,
}

impl BnLossScope {
    fn layers(self, total: usize) -> usize {
        match self {
            BnLossScope::All => total,
            BnLossScope::Encoder => ENCODER_BN_LAYERS.min(total),
        }
    }
}

/// Partial derivatives of a scalar with respect to one layer's observed
/// per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct StatGrad {
    pub d_mean: Vec<f64>,
    pub d_std: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Source and observed statistics of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerStats<'a> {
    pub source_mean: &'a [f64],
    pub source_std: &'a [f64],
    pub mean: &'a [f64],
    pub std: &'a [f64],
}

/// L1 distance between source and observed statistics, averaged over
/// channels within a layer and then over layers. Also returns the gradient
/// with respect to the observed statistics of each layer.
pub fn align_loss_from_stats(layers: &[LayerStats<'_>]) -> (f64, Vec<StatGrad>) {
    let count = layers.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for l in layers {
        let c = l.mean.len();
        let w = 1.0 / (count * c as f64);
        let mut layer = 0.0;
        let mut g = StatGrad {
            d_mean: vec![0.0; c],
            d_std: vec![0.0; c],
        };
        for ch in 0..c {
            let dm = l.mean[ch] - l.source_mean[ch];
            let ds = l.std[ch] - l.source_std[ch];
            layer += dm.abs() + ds.abs();
            g.d_mean[ch] = w * sign(dm);
            g.d_std[ch] = w * sign(ds);
        }
        loss += layer / c as f64;
        grads.push(g);
    }
    (loss / count, grads)
}

/// Alignment loss of a forward pass against the network's stored source
/// statistics.
///
/// The second value holds, per BN layer, the gradient with respect to the
/// observed statistics (`None` outside `scope`); pass it to
/// [`MiniSegNet::backward_stats`] to reach the input.
pub fn bn_align_loss(
    tape: &ForwardTape,
    net: &MiniSegNet,
    scope: BnLossScope,
) -> (f64, Vec<Option<StatGrad>>) {
    let total = net.bns.len().min(tape.stats.len());
    let used = scope.layers(total);
    let layers: Vec<LayerStats<'_>> = (0..used)
        .map(|j| LayerStats {
            source_mean: net.bns[j].running_mean.data(),
            source_std: net.bns[j].running_std.data(),
            mean: &tape.stats[j].mean,
            std: &tape.stats[j].std,
        })
        .collect();
    let (loss, grads) = align_loss_from_stats(&layers);
    let mut out = vec![None; net.bns.len()];
    for (slot, g) in out.iter_mut().zip(grads) {
        *slot = Some(g);
    }
    (loss, out)
}

/// Forward pass, alignment loss and its gradient with respect to `x`.
pub fn align_loss_and_grad(
    net: &MiniSegNet,
    x: &Tensor,
    mode: super::BnMode,
    scope: BnLossScope,
) -> Result<(f64, Tensor, Tensor)> {
    let (logits, tape) = net.forward(x, mode)?;
    let (loss, grads) = bn_align_loss(&tape, net, scope);
    let gx = net.backward_stats(&tape, &grads)?;
    Ok((loss, gx, logits))
}

const DICE_SMOOTH: f64 = 1.0;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Soft Dice plus binary cross-entropy per channel, averaged over channels.
/// Returns the loss and its gradient with respect to the logits.
pub fn seg_loss(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_same_shape(targets)?;
    let (n, c, h, w) = logits.nchw()?;
    if !logits.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let (ld, td) = (logits.data(), targets.data());
    let mut grad = vec![0.0; ld.len()];
    let mut total = 0.0;
    let planes = |ch: usize| (0..n).map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
    for ch in 0..c {
        let (mut sp, mut st, mut inter, mut bce) = (0.0, 0.0, 0.0, 0.0);
        for r in planes(ch) {
            for k in r {
                let p = sigmoid(ld[k]);
                sp += p;
                st += td[k];
                inter += p * td[k];
                bce += softplus(ld[k]) - td[k] * ld[k];
            }
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sp + st + DICE_SMOOTH;
        total += (1.0 - num / den) + bce / m;
        for r in planes(ch) {
            for k in r {
                let p = sigmoid(ld[k]);
                let d_dice_dp = -(2.0 * td[k] * den - num) / (den * den);
                let d_l = d_dice_dp * p * (1.0 - p) + (p - td[k]) / m;
                grad[k] = d_l / c as f64;
            }
        }
    }
    Ok((total / c as f64, Tensor::new(logits.shape(), grad)?))
}
