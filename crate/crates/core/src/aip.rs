//! Adaptive-scale instance prompts: ring-by-ring prompt growth with the
//! inner rings frozen, and early stopping on augmentation consistency.

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::metrics::sigmoid;
use crate::net::{BnLossScope, BnMode, MiniSegNet};
use crate::prompt::{adam_step, PromptGrid, SpectralImage};
use crate::tensor::Tensor;

/// Which loss the prompt optimizers minimise: the BN alignment loss under a
/// given normalization mode, over a given set of layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignObjective {
    pub mode: BnMode,
    pub scope: BnLossScope,
}

impl Default for AlignObjective {
    fn default() -> Self {
        Self {
            mode: BnMode::Source,
            scope: BnLossScope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipConfig {
    pub epochs_per_scale: usize,
    pub max_scale_steps: usize,
    pub lr: f64,
    /// (brightness, contrast) factor pairs, one augmented view each.
    pub jitter: Vec<(f64, f64)>,
    pub patience: usize,
}

impl Default for AipConfig {
    fn default() -> Self {
        Self {
            epochs_per_scale: 7,
            max_scale_steps: 6,
            lr: 0.05,
            jitter: vec![(1.2, 0.8), (0.8, 1.2)],
            patience: 1,
        }
    }
}

impl AipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_scale == 0 || self.max_scale_steps == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs_per_scale, max_scale_steps and patience must be at least 1".into(),
            ));
        }
        if self.jitter.is_empty() || self.jitter.iter().any(|&(b, c)| !(b > 0.0 && c > 0.0)) {
            return Err(Error::Config("jitter factors must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("instance prompt learning rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AipResult {
    pub best_prompt: PromptGrid,
    /// Side length of `best_prompt`.
    pub best_scale: usize,
    /// Consistency score after each scale, in growth order.
    pub consistency_trace: Vec<f64>,
    pub steps_taken: usize,
    /// Prompt as it stood when each scale finished.
    pub scale_prompts: Vec<PromptGrid>,
    /// Logits of the best prompt's adapted image under the evaluation mode.
    pub best_logits: Option<Tensor>,
    /// Set when a numeric failure cut the search short.
    pub aborted: bool,
}

/// Pads a square prompt with a ring of ones and freezes the old cells.
pub fn grow_prompt(prompt: &PromptGrid) -> PromptGrid {
    let (h, w, c) = (prompt.height(), prompt.width(), prompt.channels());
    let mut next = PromptGrid::ones(h + 2, w + 2, c);
    let mut frozen = vec![false; next.values().len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = next.index(ch, y + 1, x + 1);
                next.values_mut()[i] = prompt.get(ch, y, x);
                frozen[i] = true;
            }
        }
    }
    next.set_frozen(frozen).expect("mask size");
    next
}

/// Colour jitter: contrast `c` about the image mean `m`, then the mean is
/// shifted to `b*m`, i.e. `clamp(c*x + (b - c)*m, 0, 1)`. `(1, 1)` is the
/// identity exactly.
pub fn augment(x: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let m = x.mean();
    x.map(|v| (contrast * v + (brightness - contrast) * m).clamp(0.0, 1.0))
}

const DICE_SMOOTH: f64 = 1.0;

/// Dice loss between the 0.5-thresholded sigmoid masks of two `[C, H, W]`
/// logit maps, averaged over channels.
pub fn consistency(pred: &Tensor, pred_aug: &Tensor) -> Result<f64> {
    pred.expect_same_shape(pred_aug)?;
    let (c, h, w) = pred.chw()?;
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let (mut a, mut b, mut inter) = (0.0, 0.0, 0.0);
        for k in ch * plane..(ch + 1) * plane {
            let pa = (sigmoid(pred.data()[k]) > 0.5) as u8 as f64;
            let pb = (sigmoid(pred_aug.data()[k]) > 0.5) as u8 as f64;
            a += pa;
            b += pb;
            inter += pa * pb;
        }
        total += 1.0 - (2.0 * inter + DICE_SMOOTH) / (a + b + DICE_SMOOTH);
    }
    Ok(total / c as f64)
}

fn logits_of(net: &MiniSegNet, image: &Tensor, mode: BnMode) -> Result<Tensor> {
    let (l, _) = net.forward(&image.clone().batched()?, mode)?;
    l.item(0)
}

/// Consistency of the adapted image's prediction with the averaged logits
/// of its jittered views. Returns the score and the unaugmented logits.
pub fn consistency_of(
    net: &MiniSegNet,
    adapted: &Tensor,
    jitter: &[(f64, f64)],
    mode: BnMode,
) -> Result<(f64, Tensor)> {
    let pred = logits_of(net, adapted, mode)?;
    let mut avg = Tensor::zeros(pred.shape());
    for &(b, c) in jitter {
        let p = logits_of(net, &augment(adapted, b, c), mode)?;
        avg = avg.add(&p)?;
    }
    let avg = avg.scale(1.0 / jitter.len() as f64);
    Ok((consistency(&pred, &avg)?, pred))
}

/// Grows and tunes an instance prompt for one image, keeping the scale whose
/// adapted prediction is most consistent under colour jitter.
pub fn tune_instance_prompt(
    x: &Tensor,
    net: &MiniSegNet,
    cfg: &AipConfig,
    objective: AlignObjective,
    eval_mode: BnMode,
) -> Result<AipResult> {
    cfg.validate()?;
    let (c, h, w) = x.chw()?;
    let spectral = SpectralImage::new(x)?;
    let mut result = AipResult {
        best_prompt: PromptGrid::square(1, c),
        best_scale: 1,
        consistency_trace: Vec::new(),
        steps_taken: 0,
        scale_prompts: Vec::new(),
        best_logits: None,
        aborted: false,
    };
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut prompt = PromptGrid::square(1, c);
    for k in 0..cfg.max_scale_steps {
        if k > 0 {
            if prompt.height() + 2 > h || prompt.width() + 2 > w {
                break;
            }
            prompt = grow_prompt(&prompt);
        }
        let outcome = (|| -> Result<(f64, Tensor)> {
            let mut opt = AdamState::new(prompt.values().len(), cfg.lr);
            for _ in 0..cfg.epochs_per_scale {
                let (_, grad) = spectral.align_grad(&prompt, net, objective.mode, objective.scope)?;
                adam_step(&mut prompt, &grad, &mut opt)?;
            }
            let adapted = spectral.apply(&prompt)?;
            consistency_of(net, &adapted, &cfg.jitter, eval_mode)
        })();
        let (score, logits) = match outcome {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                result.aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        result.consistency_trace.push(score);
        result.scale_prompts.push(prompt.clone());
        result.steps_taken += 1;
        if score < best {
            best = score;
            since_best = 0;
            result.best_prompt = prompt.clone();
            result.best_scale = 1 + 2 * k;
            result.best_logits = Some(logits);
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grow_from_single_cell() {
        let mut p = PromptGrid::square(1, 3);
        p.values_mut().fill(0.7);
        let g = grow_prompt(&p);
        assert_eq!((g.height(), g.width()), (3, 3));
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let i = g.index(c, y, x);
                    if (y, x) == (1, 1) {
                        assert_eq!(g.values()[i], 0.7);
                        assert!(g.frozen()[i]);
                    } else {
                        assert_eq!(g.values()[i], 1.0);
                        assert!(!g.frozen()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn two_growths_leave_outer_ring_trainable() {
        let g = grow_prompt(&grow_prompt(&PromptGrid::square(1, 3)));
        assert_eq!((g.height(), g.width()), (5, 5));
        assert_eq!(g.trainable_count(), 48);
        assert_eq!(g.trainable_count() / 3, 16);
        assert_eq!(g.values().len() - g.trainable_count(), 27);
    }

    #[test]
    fn augment_examples() {
        let x = Tensor::new(&[1, 2, 2], vec![0.1, 0.4, 0.6, 0.3]).unwrap();
        assert_eq!(augment(&x, 1.0, 1.0).data(), x.data());
        let flat = augment(&x, 1.2, 0.0);
        let m = x.mean();
        assert!(flat.data().iter().all(|&v| (v - 1.2 * m).abs() < 1e-15));
        let j = augment(&x, 1.2, 0.8);
        for (o, &v) in j.data().iter().zip(x.data()) {
            let want = (0.8 * (v - m) + m + 0.2 * m).clamp(0.0, 1.0);
            assert!((o - want).abs() < 1e-15);
        }
    }

    #[test]
    fn consistency_examples() {
        let pos = Tensor::full(&[2, 4, 4], 5.0);
        let neg = Tensor::full(&[2, 4, 4], -5.0);
        assert_eq!(consistency(&pos, &pos).unwrap(), 0.0);
        assert_eq!(consistency(&neg, &neg).unwrap(), 0.0);
        let full_vs_empty = consistency(&pos, &neg).unwrap();
        assert!((full_vs_empty - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
        assert!((full_vs_empty - 0.9412).abs() < 1e-4);
        // Disjoint halves of area 8.
        let top: Vec<f64> = (0..32).map(|k| if (k % 16) < 8 { 5.0 } else { -5.0 }).collect();
        let bottom: Vec<f64> = top.iter().map(|v| -v).collect();
        let a = Tensor::new(&[2, 4, 4], top).unwrap();
        let b = Tensor::new(&[2, 4, 4], bottom).unwrap();
        assert!((consistency(&a, &b).unwrap() - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AipConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.epochs_per_scale = 0;
        assert!(cfg.validate().is_err());
        let cfg = AipConfig {
            jitter: vec![(0.0, 1.0)],
            ..AipConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_scale_step() {
        let net = MiniSegNet::init(2);
        let x = Tensor::full(&[3, 16, 16], 0.4).map(|v| v + 0.0);
        let cfg = AipConfig {
            max_scale_steps: 1,
            epochs_per_scale: 2,
            ..AipConfig::default()
        };
        let r = tune_instance_prompt(&x, &net, &cfg, AlignObjective::default(), BnMode::Calibrated(0.8)).unwrap();
        assert_eq!(r.consistency_trace.len(), 1);
        assert_eq!(r.steps_taken, 1);
        assert_eq!(r.best_scale, 1);
        assert_eq!(r.best_prompt.height(), 1);
    }

    #[test]
    fn black_image_stops_after_patience() {
        // Jitter leaves an all-zero image unchanged and prompts cannot act on
        // an all-zero spectrum, so the score never improves.
        let net = MiniSegNet::init(4);
        let x = Tensor::zeros(&[3, 16, 16]);
        for patience in [1, 2] {
            let cfg = AipConfig {
                patience,
                epochs_per_scale: 1,
                ..AipConfig::default()
            };
            let r = tune_instance_prompt(&x, &net, &cfg, AlignObjective::default(), BnMode::Calibrated(0.8)).unwrap();
            assert_eq!(r.consistency_trace.len(), patience + 1);
            assert!(r.consistency_trace.windows(2).all(|w| w[0] == w[1]));
            assert_eq!(r.best_scale, 1);
        }
    }
}
