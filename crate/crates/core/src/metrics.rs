//! Segmentation metrics, prediction confidence and the confidence-weighted
//! branch ensemble.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Dice similarity of two binary masks. Two empty masks score 1.
pub fn dsc(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mask sizes differ");
    let (mut a, mut b, mut inter) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Per-class DSC of `[C, H, W]` probability maps thresholded at 0.5 against
/// `{0, 1}` masks.
pub fn dsc_per_class(probs: &Tensor, masks: &Tensor) -> Result<Vec<f64>> {
    probs.expect_same_shape(masks)?;
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    Ok((0..c)
        .map(|ch| {
            let r = ch * plane..(ch + 1) * plane;
            let p: Vec<bool> = probs.data()[r.clone()].iter().map(|&v| v > 0.5).collect();
            let t: Vec<bool> = masks.data()[r].iter().map(|&v| v > 0.5).collect();
            dsc(&p, &t)
        })
        .collect())
}

/// Spatial reduction of the per-pixel confidence map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceReduce {
    #[default]
    Mean,
    Min,
}

/// Confidence of sigmoid logits: per-pixel `max(q, 1 - q)` reduced over
/// pixels and channels.
pub fn confidence(logits: &Tensor, reduce: ConfidenceReduce) -> f64 {
    let per_pixel = logits.data().iter().map(|&l| {
        let q = sigmoid(l);
        q.max(1.0 - q)
    });
    match reduce {
        ConfidenceReduce::Mean => per_pixel.sum::<f64>() / logits.len() as f64,
        ConfidenceReduce::Min => per_pixel.fold(1.0, f64::min),
    }
}

/// Normalizes confidences into convex weights; all-zero input yields
/// uniform weights.
pub fn ensemble_weights(confidences: &[f64]) -> Vec<f64> {
    let total: f64 = confidences.iter().sum();
    if total > 0.0 && total.is_finite() {
        confidences.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / confidences.len() as f64; confidences.len()]
    }
}

/// Confidence-weighted average of probability maps.
pub fn ensemble(probs: &[&Tensor], confidences: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    if probs.is_empty() || probs.len() != confidences.len() {
        return Err(Error::Shape(format!(
            "{} predictions with {} confidences",
            probs.len(),
            confidences.len()
        )));
    }
    if confidences.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Numeric("confidences must be finite and non-negative".into()));
    }
    let weights = ensemble_weights(confidences);
    let mut out = Tensor::zeros(probs[0].shape());
    for (p, &w) in probs.iter().zip(&weights) {
        p.expect_same_shape(&out)?;
        for (o, v) in out.data_mut().iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    Ok((out, weights))
}
