//! Centered 2-D Fourier transforms of `[C, H, W]` images.
//!
//! The forward transform is unnormalized and the inverse carries the
//! `1/(H*W)` factor. Spectra are stored shifted so the zero-frequency bin of
//! every channel sits at `(H/2, W/2)` (integer division).

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 4;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

/// A per-channel complex spectrum with the DC bin at the plane center.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    channels: usize,
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn new(shape: [usize; 3], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let [c, h, w] = shape;
        let n = c * h * w;
        if re.len() != n || im.len() != n {
            return Err(Error::Shape(format!(
                "spectrum {:?} needs {} values per plane, got {}/{}",
                shape,
                n,
                re.len(),
                im.len()
            )));
        }
        if h < MIN_SIDE || w < MIN_SIDE || c == 0 {
            return Err(Error::Shape(format!("spectrum {:?} too small", shape)));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            re,
            im,
        })
    }

    /// Rebuilds a spectrum from magnitude and phase planes.
    pub fn from_polar(magnitude: &Tensor, phase: &Tensor) -> Result<Self> {
        magnitude.expect_same_shape(phase)?;
        let (c, h, w) = magnitude.chw()?;
        let (re, im) = magnitude
            .data()
            .iter()
            .zip(phase.data())
            .map(|(&m, &p)| (m * p.cos(), m * p.sin()))
            .unzip();
        Self::new([c, h, w], re, im)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    /// Index of the DC bin within one channel plane.
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Largest deviation from `S(-f) = conj(S(f))` over all bins.
    pub fn hermitian_error(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let (cy, cx) = self.center();
        let mut worst: f64 = 0.0;
        for ch in 0..self.channels {
            let base = ch * h * w;
            for y in 0..h {
                let my = (2 * cy + h - y) % h;
                for x in 0..w {
                    let mx = (2 * cx + w - x) % w;
                    let a = base + y * w + x;
                    let b = base + my * w + mx;
                    worst = worst
                        .max((self.re[a] - self.re[b]).abs())
                        .max((self.im[a] + self.im[b]).abs());
                }
            }
        }
        worst
    }
}

/// In-place 2-D transform of one `h x w` plane (rows, then columns).
fn transform_plane(buf: &mut [Complex<f64>], h: usize, w: usize, dir: FftDirection) {
    plan(w, dir).process(buf);
    let mut cols = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            cols[x * h + y] = buf[y * w + x];
        }
    }
    plan(h, dir).process(&mut cols);
    for x in 0..w {
        for y in 0..h {
            buf[y * w + x] = cols[x * h + y];
        }
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.chw()?;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    if !image.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    Ok((c, h, w))
}

/// Centered forward transform of every channel of a `[C, H, W]` image.
pub fn fft2(image: &Tensor) -> Result<ComplexSpectrum> {
    let (c, h, w) = check_image(image)?;
    let plane = h * w;
    let (cy, cx) = (h / 2, w / 2);
    let planes = par::map_range(c, |ch| {
        let src = &image.data()[ch * plane..(ch + 1) * plane];
        let mut buf: Vec<Complex<f64>> = src.iter().map(|&v| Complex::new(v, 0.0)).collect();
        transform_plane(&mut buf, h, w, FftDirection::Forward);
        let mut re = vec![0.0; plane];
        let mut im = vec![0.0; plane];
        for y in 0..h {
            let sy = (y + cy) % h;
            for x in 0..w {
                let sx = (x + cx) % w;
                let v = buf[y * w + x];
                re[sy * w + sx] = v.re;
                im[sy * w + sx] = v.im;
            }
        }
        (re, im)
    });
    let mut re = Vec::with_capacity(c * plane);
    let mut im = Vec::with_capacity(c * plane);
    for (r, i) in planes {
        re.extend(r);
        im.extend(i);
    }
    ComplexSpectrum::new([c, h, w], re, im)
}

/// Inverse transform returning the real part and the largest discarded
/// imaginary magnitude.
pub fn ifft2_with_residual(spec: &ComplexSpectrum) -> Result<(Tensor, f64)> {
    let [c, h, w] = spec.shape();
    let plane = h * w;
    let (cy, cx) = spec.center();
    let norm = 1.0 / plane as f64;
    let planes = par::map_range(c, |ch| {
        let base = ch * plane;
        let mut buf = vec![Complex::new(0.0, 0.0); plane];
        for sy in 0..h {
            let y = (sy + h - cy) % h;
            for sx in 0..w {
                let x = (sx + w - cx) % w;
                let k = base + sy * w + sx;
                buf[y * w + x] = Complex::new(spec.re[k], spec.im[k]);
            }
        }
        transform_plane(&mut buf, h, w, FftDirection::Inverse);
        let residual = buf.iter().map(|v| (v.im * norm).abs()).fold(0.0, f64::max);
        let real: Vec<f64> = buf.iter().map(|v| v.re * norm).collect();
        (real, residual)
    });
    let mut data = Vec::with_capacity(c * plane);
    let mut residual: f64 = 0.0;
    for (r, res) in planes {
        data.extend(r);
        residual = residual.max(res);
    }
    let out = Tensor::new(&[c, h, w], data)?;
    if !out.is_finite() {
        return Err(Error::Numeric("inverse transform produced non-finite values".into()));
    }
    Ok((out, residual))
}

pub fn ifft2(spec: &ComplexSpectrum) -> Result<Tensor> {
    ifft2_with_residual(spec).map(|(t, _)| t)
}

/// Magnitude and phase planes; the phase of a zero bin is 0.
pub fn split_mag_phase(spec: &ComplexSpectrum) -> (Tensor, Tensor) {
    let [c, h, w] = spec.shape();
    let mag = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| r.hypot(i))
        .collect();
    let phase = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| if r == 0.0 && i == 0.0 { 0.0 } else { i.atan2(r) })
        .collect();
    (
        Tensor::new(&[c, h, w], mag).expect("spectrum shape"),
        Tensor::new(&[c, h, w], phase).expect("spectrum shape"),
    )
}
