//! Low-frequency amplitude prompts.
//!
//! A prompt is a small real block that multiplies the centered magnitude
//! spectrum of an image. Outside the block the multiplier is one, and the
//! prompt's own center cell `(H_P/2, W_P/2)` sits on the DC bin.

use std::path::Path;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::fft::{self, ComplexSpectrum};
use crate::io;
use crate::net::loss::align_loss_and_grad;
use crate::net::{BnLossScope, BnMode, MiniSegNet};
use crate::tensor::Tensor;

pub const PROMPT_MAGIC: &[u8; 4] = b"PRMT";

/// Trainable amplitude multiplier of `height x width` cells per channel,
/// stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
    frozen: Vec<bool>,
}

impl PromptGrid {
    /// All-ones prompt with nothing frozen.
    pub fn ones(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty prompt");
        let n = height * width * channels;
        Self {
            height,
            width,
            channels,
            values: vec![1.0; n],
            frozen: vec![false; n],
        }
    }

    pub fn square(side: usize, channels: usize) -> Self {
        Self::ones(side, side, channels)
    }

    pub fn from_values(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels || values.is_empty() {
            return Err(Error::Shape(format!(
                "prompt {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let n = values.len();
        Ok(Self {
            height,
            width,
            channels,
            values,
            frozen: vec![false; n],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, frozen: Vec<bool>) -> Result<()> {
        if frozen.len() != self.values.len() {
            return Err(Error::Shape("frozen mask size".into()));
        }
        self.frozen = frozen;
        Ok(())
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(c, y, x)]
    }

    pub fn trainable_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| !f).count()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &PromptGrid) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.values.clone()).expect("prompt shape")
    }

    /// Snapshot file: `PRMT`, rank, `[C, H_P, W_P]`, values.
    pub fn to_bytes(&self) -> Vec<u8> {
        io::encode_tagged(PROMPT_MAGIC, &self.as_tensor())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let t = io::decode_tagged(PROMPT_MAGIC, bytes)?;
        let (c, h, w) = t.chw().map_err(|_| Error::Format("prompt must be rank 3".into()))?;
        Self::from_values(h, w, c, t.into_data())
            .map_err(|e| Error::Format(format!("prompt snapshot: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Values min-max scaled to [0, 1] as a `[C, H_P, W_P]` image.
    pub fn normalized_image(&self) -> Tensor {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.as_tensor()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.5 })
    }

    /// Top-left spectrum coordinate covered by the block, after checking it
    /// fits inside an `h x w` plane.
    fn origin(&self, channels: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        if channels != self.channels {
            return Err(Error::Shape(format!(
                "prompt has {} channels, image {channels}",
                self.channels
            )));
        }
        if self.height > h || self.width > w {
            return Err(Error::Shape(format!(
                "prompt {}x{} larger than spectrum {h}x{w}",
                self.height, self.width
            )));
        }
        Ok((h / 2 - self.height / 2, w / 2 - self.width / 2))
    }
}

/// The magnitude/phase decomposition of one image, reused across every
/// prompt applied to it.
#[derive(Debug, Clone)]
pub struct SpectralImage {
    magnitude: Tensor,
    phase: Tensor,
    shape: [usize; 3],
}

impl SpectralImage {
    pub fn new(image: &Tensor) -> Result<Self> {
        let spec = fft::fft2(image)?;
        let (magnitude, phase) = fft::split_mag_phase(&spec);
        Ok(Self {
            magnitude,
            phase,
            shape: spec.shape(),
        })
    }

    pub fn magnitude(&self) -> &Tensor {
        &self.magnitude
    }

    pub fn phase(&self) -> &Tensor {
        &self.phase
    }

    /// Prompt-adapted image: inverse transform of the prompted magnitude
    /// recombined with the original phase.
    pub fn apply(&self, prompt: &PromptGrid) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        let (oy, ox) = prompt.origin(c, h, w)?;
        let mut mag = self.magnitude.clone();
        let md = mag.data_mut();
        for ch in 0..c {
            for py in 0..prompt.height {
                for px in 0..prompt.width {
                    md[(ch * h + oy + py) * w + ox + px] *= prompt.get(ch, py, px);
                }
            }
        }
        let spec = ComplexSpectrum::from_polar(&mag, &self.phase)?;
        fft::ifft2(&spec)
    }

    /// Chains a gradient with respect to the adapted image back to the
    /// prompt cells. Frozen cells receive zero.
    ///
    /// The adapted image is `Re(IFFT(M * X))` with `M` the padded prompt, so
    /// `dL/dM_k = Re(X_k * conj(G_k)) / (H*W)` where `G = FFT(dL/dx_hat)`.
    pub fn prompt_grad_from_image_grad(&self, prompt: &PromptGrid, grad_image: &Tensor) -> Result<Vec<f64>> {
        let [c, h, w] = self.shape;
        if grad_image.shape() != [c, h, w] {
            return Err(Error::Shape(format!(
                "image gradient {:?} vs image {:?}",
                grad_image.shape(),
                self.shape
            )));
        }
        let (oy, ox) = prompt.origin(c, h, w)?;
        let g = fft::fft2(grad_image)?;
        let norm = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; prompt.values.len()];
        for ch in 0..c {
            for py in 0..prompt.height {
                for px in 0..prompt.width {
                    let i = prompt.index(ch, py, px);
                    if prompt.frozen[i] {
                        continue;
                    }
                    let k = (ch * h + oy + py) * w + ox + px;
                    let (m, p) = (self.magnitude.data()[k], self.phase.data()[k]);
                    out[i] = norm * m * (p.cos() * g.re()[k] + p.sin() * g.im()[k]);
                }
            }
        }
        Ok(out)
    }

    /// Alignment loss of the prompt-adapted image and its gradient with
    /// respect to the prompt.
    pub fn align_grad(
        &self,
        prompt: &PromptGrid,
        net: &MiniSegNet,
        mode: BnMode,
        scope: BnLossScope,
    ) -> Result<(f64, Vec<f64>)> {
        let adapted = self.apply(prompt)?;
        let (loss, gx, _) = align_loss_and_grad(net, &adapted.batched()?, mode, scope)?;
        let grad = self.prompt_grad_from_image_grad(prompt, &gx.item(0)?)?;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prompt gradient".into()));
        }
        Ok((loss, grad))
    }
}

/// Applies `prompt` to a `[C, H, W]` image.
pub fn apply_prompt(prompt: &PromptGrid, image: &Tensor) -> Result<Tensor> {
    SpectralImage::new(image)?.apply(prompt)
}

/// Gradient of the alignment loss of the adapted image with respect to the
/// prompt, plus the loss itself.
pub fn prompt_grad(
    prompt: &PromptGrid,
    image: &Tensor,
    net: &MiniSegNet,
    mode: BnMode,
    scope: BnLossScope,
) -> Result<(f64, Vec<f64>)> {
    SpectralImage::new(image)?.align_grad(prompt, net, mode, scope)
}

/// One Adam update of the unfrozen prompt cells.
pub fn adam_step(prompt: &mut PromptGrid, grad: &[f64], state: &mut AdamState) -> Result<()> {
    if grad.len() != prompt.values.len() || state.len() != prompt.values.len() {
        return Err(Error::Shape("prompt, gradient and optimizer sizes differ".into()));
    }
    state.step(&mut prompt.values, grad, Some(&prompt.frozen));
    if !prompt.is_finite() {
        return Err(Error::Numeric("prompt left the finite range".into()));
    }
    Ok(())
}
