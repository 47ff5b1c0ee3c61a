//! Synthetic two-region segmentation benchmark with style-shifted domains.
//!
//! Each scene holds an outer ellipse with a strictly contained inner ellipse
//! on a textured background. Domains `B`..`E` restyle the same kind of scene
//! with increasing strength; domain `A` is the unstyled source domain.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2};
use crate::io::{read_tagged, write_tagged};
use crate::par;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"IMGT";
pub const MASK_MAGIC: &[u8; 4] = b"MSKT";
pub const INDEX_FILE: &str = "index.txt";
pub const DEFAULT_SIZE: usize = 64;
/// Range of the outer semi-axes at the default size. The wide spread makes
/// single-image feature statistics depend strongly on content.
const OUTER_AXES: (f64, f64) = (7.0, 23.0);
/// Side of the centred spectrum block rescaled by a domain style.
pub const LOW_FREQ_BLOCK: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    C,
    D,
    E,
}

impl Domain {
    pub const ALL: [Domain; 5] = [Domain::A, Domain::B, Domain::C, Domain::D, Domain::E];
    pub const TARGETS: [Domain; 4] = [Domain::B, Domain::C, Domain::D, Domain::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["A", "B", "C", "D", "E"][self.index()]
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown domain {s:?} (expected A..E)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    weight: f64,
}

/// Geometry and texture of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub outer: Ellipse,
    pub inner: Ellipse,
    pub brightness: f64,
    texture: Vec<Wave>,
}

impl SceneSpec {
    /// Draws a scene. The inner ellipse lies in a disc around the outer
    /// centre of radius `max(a_in, b_in) + |d|`, which never exceeds the
    /// outer minor semi-axis, so containment holds by construction.
    pub fn sample(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64 / DEFAULT_SIZE as f64;
        let mid = size as f64 / 2.0;
        let outer = Ellipse {
            cx: mid + rng.random_range(-6.0..6.0) * s,
            cy: mid + rng.random_range(-6.0..6.0) * s,
            a: rng.random_range(OUTER_AXES.0..OUTER_AXES.1) * s,
            b: rng.random_range(OUTER_AXES.0..OUTER_AXES.1) * s,
            theta: rng.random_range(0.0..PI),
        };
        let r = outer.a.min(outer.b);
        let a_in = rng.random_range(0.35..0.6) * r;
        let b_in = rng.random_range(0.35..0.6) * r;
        let slack = r - a_in.max(b_in);
        let dist = rng.random_range(0.0..0.5) * slack;
        let dir = rng.random_range(0.0..2.0 * PI);
        let inner = Ellipse {
            cx: outer.cx + dist * dir.cos(),
            cy: outer.cy + dist * dir.sin(),
            a: a_in,
            b: b_in,
            theta: rng.random_range(0.0..PI),
        };
        let texture = (0..4)
            .map(|_| Wave {
                fx: rng.random_range(1.0..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                fy: rng.random_range(1.0..6.0),
                phase: rng.random_range(0.0..2.0 * PI),
                weight: rng.random_range(0.01..0.03),
            })
            .collect();
        Self {
            size,
            outer,
            inner,
            brightness: rng.random_range(-0.04..0.04),
            texture,
        }
    }

    /// `[2, H, W]` masks (outer, inner) evaluated at pixel centres.
    pub fn masks(&self) -> Tensor {
        let n = self.size;
        let mut data = vec![0.0; 2 * n * n];
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                data[y * n + x] = self.outer.contains(px, py) as u8 as f64;
                data[n * n + y * n + x] = self.inner.contains(px, py) as u8 as f64;
            }
        }
        Tensor::new(&[2, n, n], data).expect("mask shape")
    }

    /// `[3, H, W]` unstyled image in `[0, 1]`.
    pub fn render(&self) -> Tensor {
        const BACKGROUND: [f64; 3] = [0.42, 0.22, 0.12];
        const OUTER: [f64; 3] = [0.26, 0.24, 0.14];
        const INNER: [f64; 3] = [0.22, 0.26, 0.22];
        const TEXTURE_GAIN: [f64; 3] = [1.0, 0.7, 0.5];
        let n = self.size;
        let mut data = vec![0.0; 3 * n * n];
        let mid = n as f64 / 2.0;
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (u, v) = (px / n as f64, py / n as f64);
                let tex: f64 = self
                    .texture
                    .iter()
                    .map(|w| w.weight * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).sin())
                    .sum();
                let r2 = ((px - mid).powi(2) + (py - mid).powi(2)) / (mid * mid);
                let vignette = -0.08 * r2;
                let in_outer = self.outer.contains(px, py);
                let in_inner = self.inner.contains(px, py);
                for c in 0..3 {
                    let mut v = BACKGROUND[c] + self.brightness + vignette + TEXTURE_GAIN[c] * tex;
                    if in_outer {
                        v += OUTER[c];
                    }
                    if in_inner {
                        v += INNER[c];
                    }
                    data[(c * n + y) * n + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(&[3, n, n], data).expect("image shape")
    }
}

/// Intensity-only restyling of a rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain: Domain,
    pub gamma: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Multiplier on the magnitudes of the centred low-frequency block.
    pub low_freq_scale: f64,
    pub channel_offsets: [f64; 3],
}

impl DomainStyle {
    /// Default style of a domain; shift strength grows from `A` to `E`.
    pub fn preset(domain: Domain) -> Self {
        let (gamma, blur_sigma, noise_sigma, low_freq_scale, channel_offsets) = match domain {
            Domain::A => (1.0, 0.0, 0.0, 1.0, [0.0, 0.0, 0.0]),
            Domain::B => (1.025, 0.075, 0.002, 0.9375, [0.0, 0.0, -0.005]),
            Domain::C => (1.05, 0.15, 0.004, 0.875, [0.0, 0.0, -0.01]),
            Domain::D => (1.075, 0.225, 0.006, 0.8125, [0.0, 0.0, -0.015]),
            Domain::E => (1.1, 0.3, 0.008, 0.75, [0.0, 0.0, -0.02]),
        };
        Self {
            domain,
            gamma,
            blur_sigma,
            noise_sigma,
            low_freq_scale,
            channel_offsets,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0
            && self.blur_sigma == 0.0
            && self.noise_sigma == 0.0
            && self.low_freq_scale == 1.0
            && self.channel_offsets == [0.0; 3]
    }

    /// Gamma, blur, low-frequency rescaling, channel offsets, then noise;
    /// the result is clamped to `[0, 1]`.
    pub fn apply(&self, image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(image.clone());
        }
        let (c, h, w) = image.chw()?;
        let mut out = image.map(|v| v.max(0.0).powf(self.gamma));
        if self.blur_sigma > 0.0 {
            out = gaussian_blur(&out, self.blur_sigma)?;
        }
        if self.low_freq_scale != 1.0 {
            out = scale_low_frequencies(&out, LOW_FREQ_BLOCK, self.low_freq_scale)?;
        }
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let plane = h * w;
        let data = out.data_mut();
        for ch in 0..c {
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                let n = if self.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                *v = (*v + self.channel_offsets[ch % 3] + n).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * src[base + y * w + reflect(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[base + reflect(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Multiplies the magnitudes of the centred `block x block` frequencies by
/// `factor`, keeping phases.
pub fn scale_low_frequencies(image: &Tensor, block: usize, factor: f64) -> Result<Tensor> {
    let mut spec = fft2(image)?;
    let [c, h, w] = spec.shape();
    let (cy, cx) = spec.center();
    let (y0, x0) = (cy.saturating_sub(block / 2), cx.saturating_sub(block / 2));
    for ch in 0..c {
        for y in y0..(y0 + block).min(h) {
            for x in x0..(x0 + block).min(w) {
                let k = (ch * h + y) * w + x;
                spec.re_mut()[k] *= factor;
                spec.im_mut()[k] *= factor;
            }
        }
    }
    ifft2(&spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn masks(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.mask.clone()).collect()
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders `n` scenes and applies `style`. Scene `i` depends only on
/// `(seed, i)`, so every domain generated with the same seed shares its
/// masks; styling noise additionally depends on the domain.
pub fn generate_domain(style: &DomainStyle, n: usize, seed: u64) -> Result<Dataset> {
    generate_sized(style, n, seed, DEFAULT_SIZE)
}

pub fn generate_sized(style: &DomainStyle, n: usize, seed: u64, size: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if size < 16 || size % 4 != 0 {
        return Err(Error::Config(format!("image size {size} must be a multiple of 4 and at least 16")));
    }
    let samples = par::map_range(n, |i| -> Result<Sample> {
        let scene = SceneSpec::sample(size, &mut sample_rng(seed, 2 * i as u64));
        let mut noise_rng = sample_rng(seed ^ (0x5eed_0000 + style.domain.index() as u64), 2 * i as u64 + 1);
        Ok(Sample {
            id: format!("{:06}", i + 1),
            image: style.apply(&scene.render(), &mut noise_rng)?,
            mask: scene.masks(),
        })
    });
    Ok(Dataset {
        domain: style.domain,
        samples: samples.into_iter().collect::<Result<_>>()?,
    })
}

/// Writes `<root>/<domain>/{index.txt, NNNNNN.imgt, NNNNNN.mskt}`.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    let dir = root.join(data.domain.name());
    fs::create_dir_all(&dir)?;
    let mut index = String::new();
    for s in &data.samples {
        write_tagged(&dir.join(format!("{}.imgt", s.id)), IMAGE_MAGIC, &s.image)?;
        write_tagged(&dir.join(format!("{}.mskt", s.id)), MASK_MAGIC, &s.mask)?;
        index.push_str(&s.id);
        index.push('\n');
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

/// Reads a domain back in index order.
pub fn read_dataset(root: &Path, domain: Domain) -> Result<Dataset> {
    let dir = root.join(domain.name());
    let index = fs::read_to_string(dir.join(INDEX_FILE))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join(INDEX_FILE).display())))?;
    let mut samples = Vec::new();
    for id in index.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Data(format!("invalid sample id {id:?}")));
        }
        let image = read_tagged(&dir.join(format!("{id}.imgt")), IMAGE_MAGIC)?;
        let mask = read_tagged(&dir.join(format!("{id}.mskt")), MASK_MAGIC)?;
        let (ic, ih, iw) = image.chw()?;
        let (mc, mh, mw) = mask.chw()?;
        if ic != 3 || mc != 2 || (ih, iw) != (mh, mw) {
            return Err(Error::Data(format!(
                "sample {id}: image {:?} and mask {:?} do not match",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample {id}: mask is not binary")));
        }
        samples.push(Sample {
            id: id.to_string(),
            image,
            mask,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: empty index", dir.display())));
    }
    Ok(Dataset { domain, samples })
}
