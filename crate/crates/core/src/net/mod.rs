//! `MiniSegNet`: a fixed conv/BN/ReLU encoder-decoder with a hand-written
//! backward pass and per-layer batch-norm statistics capture.

pub mod checkpoint;
pub mod kernels;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

pub use loss::{bn_align_loss, seg_loss, BnLossScope, StatGrad};

/// Floor applied to every batch-norm standard deviation.
pub const STD_FLOOR: f64 = 1e-5;
pub const IN_CHANNELS: usize = 3;
pub const OUT_CHANNELS: usize = 2;
pub const BN_LAYERS: usize = 6;
/// Batch-norm layers that belong to the encoder (`Enc1`, `Enc2`).
pub const ENCODER_BN_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Bn(usize),
    Relu,
    MaxPool,
    Upsample,
}

const ARCH: [Op; 23] = [
    // Enc1
    Op::Conv(0),
    Op::Bn(0),
    Op::Relu,
    Op::Conv(1),
    Op::Bn(1),
    Op::Relu,
    Op::MaxPool,
    // Enc2
    Op::Conv(2),
    Op::Bn(2),
    Op::Relu,
    Op::MaxPool,
    // Bottleneck
    Op::Conv(3),
    Op::Bn(3),
    Op::Relu,
    // Dec1
    Op::Upsample,
    Op::Conv(4),
    Op::Bn(4),
    Op::Relu,
    // Dec2
    Op::Upsample,
    Op::Conv(5),
    Op::Bn(5),
    Op::Relu,
    // Head
    Op::Conv(6),
];

/// (in, out, kernel) for each convolution.
const CONVS: [(usize, usize, usize); 7] = [
    (3, 8, 3),
    (8, 8, 3),
    (8, 16, 3),
    (16, 16, 3),
    (16, 8, 3),
    (8, 8, 3),
    (8, 2, 1),
];

const BN_CHANNELS: [usize; BN_LAYERS] = [8, 8, 16, 16, 8, 8];

pub(crate) fn arch_descriptor() -> String {
    let mut s = String::from("MiniSegNet/v1:");
    for op in ARCH {
        match op {
            Op::Conv(i) => {
                let (ci, co, k) = CONVS[i];
                s.push_str(&format!("conv{k}x{k}({ci}->{co}),"));
            }
            Op::Bn(i) => s.push_str(&format!("bn({}),", BN_CHANNELS[i])),
            Op::Relu => s.push_str("relu,"),
            Op::MaxPool => s.push_str("maxpool2,"),
            Op::Upsample => s.push_str("nearest2,"),
        }
    }
    s
}

/// How each batch-norm layer picks its normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Stored source running statistics.
    Source,
    /// `mu = l*mu_s + (1-l)*mu_t`, `var = l*var_s + (1-l)*var_t`.
    Calibrated(f64),
    /// Statistics of the current batch, differentiated through (training).
    Batch,
}

impl BnMode {
    fn source_weight(self) -> f64 {
        match self {
            BnMode::Source => 1.0,
            BnMode::Calibrated(l) => l,
            BnMode::Batch => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_std: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniSegNet {
    pub convs: Vec<ConvParams>,
    pub bns: Vec<BnParams>,
}

/// Statistics observed at one batch-norm input, plus the constants used to
/// normalize it.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub used_mean: Vec<f64>,
    pub used_std: Vec<f64>,
    floored: Vec<bool>,
}

#[derive(Debug, Clone)]
enum TapeEntry {
    Conv { input: Tensor },
    Bn { input: Tensor, xhat: Tensor },
    Relu { input: Tensor },
    MaxPool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Upsample { in_shape: Vec<usize> },
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    mode: BnMode,
    entries: Vec<TapeEntry>,
    stats: Vec<BnStats>,
    logits_shape: Vec<usize>,
}

impl ForwardTape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Observed and used statistics of each batch-norm layer, in order.
    pub fn bn_stats(&self) -> &[BnStats] {
        &self.stats
    }
}

/// Gradients laid out like [`MiniSegNet`]'s trainable parameters.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub convs: Vec<(Tensor, Tensor)>,
    pub bns: Vec<(Tensor, Tensor)>,
}

impl NetGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for (w, b) in &self.convs {
            v.push(w);
            v.push(b);
        }
        for (g, b) in &self.bns {
            v.push(g);
            v.push(b);
        }
        v
    }
}

impl MiniSegNet {
    /// He-normal convolution weights, zero biases, identity BN affine.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = CONVS
            .iter()
            .map(|&(ci, co, k)| {
                let std = (2.0 / (ci * k * k) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let w = (0..co * ci * k * k).map(|_| normal.sample(&mut rng)).collect();
                ConvParams {
                    weight: Tensor::new(&[co, ci, k, k], w).expect("conv shape"),
                    bias: Tensor::zeros(&[co]),
                }
            })
            .collect();
        let bns = BN_CHANNELS
            .iter()
            .map(|&c| BnParams {
                gamma: Tensor::full(&[c], 1.0),
                beta: Tensor::zeros(&[c]),
                running_mean: Tensor::zeros(&[c]),
                running_std: Tensor::full(&[c], 1.0),
            })
            .collect();
        Self { convs, bns }
    }

    /// Trainable tensors in a fixed order (conv weight/bias, then BN gamma/beta).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        for b in &mut self.bns {
            v.push(&mut b.gamma);
            v.push(&mut b.beta);
        }
        v
    }

    /// Every stored tensor with its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("conv{i}.weight"), &c.weight));
            v.push((format!("conv{i}.bias"), &c.bias));
        }
        for (i, b) in self.bns.iter().enumerate() {
            v.push((format!("bn{i}.gamma"), &b.gamma));
            v.push((format!("bn{i}.beta"), &b.beta));
            v.push((format!("bn{i}.running_mean"), &b.running_mean));
            v.push((format!("bn{i}.running_std"), &b.running_std));
        }
        v
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bns.len()
    }

    /// Blends source running stats into the tape's observed stats with
    /// momentum `m`.
    pub fn update_running_stats(&mut self, tape: &ForwardTape, m: f64) {
        for (bn, st) in self.bns.iter_mut().zip(&tape.stats) {
            for c in 0..st.mean.len() {
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = (1.0 - m) * *rm + m * st.mean[c];
                let rs = &mut bn.running_std.data_mut()[c];
                let var = (1.0 - m) * *rs * *rs + m * st.std[c] * st.std[c];
                *rs = var.sqrt().max(STD_FLOOR);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.nchw()?;
        if c != IN_CHANNELS {
            return Err(Error::Shape(format!("expected {IN_CHANNELS} input channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} not divisible by 4")));
        }
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok((n, h, w))
    }

    /// Runs the network on an `[N, 3, H, W]` batch.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, ForwardTape)> {
        self.check_input(x)?;
        if let BnMode::Calibrated(l) = mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("calibration weight {l} outside [0,1]")));
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(ARCH.len());
        let mut stats = Vec::with_capacity(BN_LAYERS);
        for (li, op) in ARCH.iter().enumerate() {
            let (n, c, h, w) = cur.nchw()?;
            let next = match *op {
                Op::Conv(i) => {
                    let (ci, co, k) = CONVS[i];
                    debug_assert_eq!(ci, c);
                    let g = ConvGeom { batch: n, cin: ci, cout: co, h, w, k };
                    let p = &self.convs[i];
                    let out = kernels::conv_forward(g, cur.data(), p.weight.data(), p.bias.data());
                    entries.push(TapeEntry::Conv { input: cur });
                    Tensor::new(&[n, co, h, w], out)?
                }
                Op::Bn(i) => {
                    let (out, xhat, st) = self.bn_forward(i, &cur, mode)?;
                    stats.push(st);
                    entries.push(TapeEntry::Bn { input: cur, xhat });
                    out
                }
                Op::Relu => {
                    let out = cur.map(|v| v.max(0.0));
                    entries.push(TapeEntry::Relu { input: cur });
                    out
                }
                Op::MaxPool => {
                    let (out, argmax) = kernels::maxpool_forward(cur.data(), n * c, h, w);
                    entries.push(TapeEntry::MaxPool {
                        argmax,
                        in_shape: cur.shape().to_vec(),
                    });
                    Tensor::new(&[n, c, h / 2, w / 2], out)?
                }
                Op::Upsample => {
                    let out = kernels::upsample_forward(cur.data(), n * c, h, w);
                    entries.push(TapeEntry::Upsample {
                        in_shape: cur.shape().to_vec(),
                    });
                    Tensor::new(&[n, c, 2 * h, 2 * w], out)?
                }
            };
            if !next.is_finite() {
                return Err(Error::NonFiniteActivation(format!("{li} ({op:?})")));
            }
            cur = next;
        }
        let tape = ForwardTape {
            mode,
            entries,
            stats,
            logits_shape: cur.shape().to_vec(),
        };
        Ok((cur, tape))
    }

    fn bn_forward(&self, i: usize, z: &Tensor, mode: BnMode) -> Result<(Tensor, Tensor, BnStats)> {
        let (n, c, h, w) = z.nchw()?;
        let hw = h * w;
        let count = (n * hw) as f64;
        let p = &self.bns[i];
        let lam = mode.source_weight();
        let mut st = BnStats {
            mean: vec![0.0; c],
            std: vec![0.0; c],
            used_mean: vec![0.0; c],
            used_std: vec![0.0; c],
            floored: vec![false; c],
        };
        let zd = z.data();
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += zd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let mu = s / count;
            let mut v = 0.0;
            for b in 0..n {
                v += zd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|x| (x - mu) * (x - mu))
                    .sum::<f64>();
            }
            let sd = (v / count).sqrt();
            st.mean[ch] = mu;
            st.floored[ch] = !(sd > STD_FLOOR);
            st.std[ch] = sd.max(STD_FLOOR);
            let ms = p.running_mean.data()[ch];
            let ss = p.running_std.data()[ch];
            st.used_mean[ch] = lam * ms + (1.0 - lam) * mu;
            let var = lam * ss * ss + (1.0 - lam) * st.std[ch] * st.std[ch];
            st.used_std[ch] = var.sqrt();
        }
        let mut xhat = vec![0.0; zd.len()];
        let mut out = vec![0.0; zd.len()];
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (st.used_mean[ch], st.used_std[ch]);
                let (g, be) = (p.gamma.data()[ch], p.beta.data()[ch]);
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for k in r {
                    let xh = (zd[k] - m) / s;
                    xhat[k] = xh;
                    out[k] = g * xh + be;
                }
            }
        }
        let shape = z.shape();
        Ok((Tensor::new(shape, out)?, Tensor::new(shape, xhat)?, st))
    }

    fn check_tape(&self, tape: &ForwardTape, grad_logits: Option<&Tensor>) -> Result<()> {
        if tape.entries.len() != ARCH.len() || tape.stats.len() != self.bns.len() {
            return Err(Error::Shape("tape does not match network".into()));
        }
        if let Some(g) = grad_logits {
            if g.shape() != tape.logits_shape.as_slice() {
                return Err(Error::Shape(format!(
                    "logit gradient {:?} vs logits {:?}",
                    g.shape(),
                    tape.logits_shape
                )));
            }
        }
        Ok(())
    }

    /// Gradient of a scalar loss with respect to the network input, given
    /// the loss gradient at the logits.
    pub fn backward_input(&self, tape: &ForwardTape, grad_logits: &Tensor) -> Result<Tensor> {
        self.check_tape(tape, Some(grad_logits))?;
        Ok(self.backward(tape, Some(grad_logits), None, false).0)
    }

    /// Gradients of a scalar loss with respect to every trainable parameter.
    pub fn backward_params(&self, tape: &ForwardTape, grad_logits: &Tensor) -> Result<NetGrads> {
        self.check_tape(tape, Some(grad_logits))?;
        Ok(self
            .backward(tape, Some(grad_logits), None, true)
            .1
            .expect("parameter grads requested"))
    }

    /// Input gradient of a loss that depends only on the observed BN
    /// statistics, whose partial derivatives are `stat_grads`.
    pub fn backward_stats(&self, tape: &ForwardTape, stat_grads: &[Option<StatGrad>]) -> Result<Tensor> {
        self.check_tape(tape, None)?;
        if stat_grads.len() != self.bns.len() {
            return Err(Error::Shape("one statistic gradient slot per BN layer".into()));
        }
        Ok(self.backward(tape, None, Some(stat_grads), false).0)
    }

    fn backward(
        &self,
        tape: &ForwardTape,
        grad_logits: Option<&Tensor>,
        stat_grads: Option<&[Option<StatGrad>]>,
        want_params: bool,
    ) -> (Tensor, Option<NetGrads>) {
        let mut g = match grad_logits {
            Some(t) => t.clone(),
            None => Tensor::zeros(&tape.logits_shape),
        };
        let mut conv_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; CONVS.len()];
        let mut bn_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; BN_LAYERS];
        for (op, entry) in ARCH.iter().zip(&tape.entries).rev() {
            g = match (*op, entry) {
                (Op::Conv(i), TapeEntry::Conv { input }) => {
                    let (n, _, h, w) = input.nchw().expect("tape shape");
                    let (ci, co, k) = CONVS[i];
                    let geom = ConvGeom { batch: n, cin: ci, cout: co, h, w, k };
                    if want_params {
                        let (gw, gb) = kernels::conv_backward_params(geom, input.data(), g.data());
                        conv_grads[i] = Some((
                            Tensor::new(&[co, ci, k, k], gw).expect("shape"),
                            Tensor::new(&[co], gb).expect("shape"),
                        ));
                    }
                    let gin = kernels::conv_backward_input(geom, g.data(), self.convs[i].weight.data());
                    Tensor::new(input.shape(), gin).expect("shape")
                }
                (Op::Bn(i), TapeEntry::Bn { input, xhat }) => {
                    let (dz, dgamma, dbeta) = self.bn_backward(
                        i,
                        input,
                        xhat,
                        &tape.stats[i],
                        &g,
                        tape.mode,
                        stat_grads.and_then(|s| s[i].as_ref()),
                    );
                    if want_params {
                        bn_grads[i] = Some((dgamma, dbeta));
                    }
                    dz
                }
                (Op::Relu, TapeEntry::Relu { input }) => {
                    input.zip_map(&g, |x, d| if x > 0.0 { d } else { 0.0 }).expect("shape")
                }
                (Op::MaxPool, TapeEntry::MaxPool { argmax, in_shape }) => {
                    let n: usize = in_shape.iter().product();
                    Tensor::new(in_shape, kernels::maxpool_backward(g.data(), argmax, n)).expect("shape")
                }
                (Op::Upsample, TapeEntry::Upsample { in_shape }) => {
                    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                    Tensor::new(in_shape, kernels::upsample_backward(g.data(), n * c, h, w)).expect("shape")
                }
                _ => unreachable!("tape entry does not match architecture"),
            };
        }
        let params = want_params.then(|| NetGrads {
            convs: conv_grads.into_iter().map(|x| x.expect("conv grad")).collect(),
            bns: bn_grads.into_iter().map(|x| x.expect("bn grad")).collect(),
        });
        (g, params)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        i: usize,
        z: &Tensor,
        xhat: &Tensor,
        st: &BnStats,
        dy: &Tensor,
        mode: BnMode,
        inject: Option<&StatGrad>,
    ) -> (Tensor, Tensor, Tensor) {
        let (n, c, h, w) = z.nchw().expect("tape shape");
        let hw = h * w;
        let count = (n * hw) as f64;
        let p = &self.bns[i];
        let (zd, xd, dyd) = (z.data(), xhat.data(), dy.data());
        let mut dz = vec![0.0; zd.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let planes = |ch: usize| (0..n).map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
        for ch in 0..c {
            let gam = p.gamma.data()[ch];
            let (mut sg, mut sb) = (0.0, 0.0);
            for r in planes(ch) {
                for k in r {
                    sg += dyd[k] * xd[k];
                    sb += dyd[k];
                }
            }
            dgamma[ch] = sg;
            dbeta[ch] = sb;
            let sd = st.used_std[ch];
            match mode {
                BnMode::Batch => {
                    // dxhat = dy * gamma; mean(dxhat) = gamma*sb/M, mean(dxhat*xhat) = gamma*sg/M.
                    let mean_dx = gam * sb / count;
                    let mean_dxx = gam * sg / count;
                    for r in planes(ch) {
                        for k in r {
                            let dxh = dyd[k] * gam;
                            dz[k] = if st.floored[ch] {
                                (dxh - mean_dx) / sd
                            } else {
                                (dxh - mean_dx - xd[k] * mean_dxx) / sd
                            };
                        }
                    }
                }
                BnMode::Source | BnMode::Calibrated(_) => {
                    let scale = gam / sd;
                    for r in planes(ch) {
                        for k in r {
                            dz[k] = dyd[k] * scale;
                        }
                    }
                }
            }
            if let Some(sgr) = inject {
                let mu = st.mean[ch];
                let dm = sgr.d_mean[ch] / count;
                let ds = if st.floored[ch] {
                    0.0
                } else {
                    sgr.d_std[ch] / (count * st.std[ch])
                };
                for r in planes(ch) {
                    for k in r {
                        dz[k] += dm + ds * (zd[k] - mu);
                    }
                }
            }
        }
        (
            Tensor::new(z.shape(), dz).expect("shape"),
            Tensor::new(&[c], dgamma).expect("shape"),
            Tensor::new(&[c], dbeta).expect("shape"),
        )
    }
}
