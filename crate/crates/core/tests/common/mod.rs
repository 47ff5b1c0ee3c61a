//! Shared fixtures: a pretrained source model and finite-difference probes.

#![allow(dead_code)]

use std::sync::OnceLock;

use mgipt::benchgen::{generate_domain, Dataset, Domain, DomainStyle};
use mgipt::net::train::{evaluate, pretrain, PretrainConfig};
use mgipt::net::{bn_align_loss, BnLossScope, BnMode, ForwardTape, MiniSegNet};
use mgipt::prompt::{PromptGrid, SpectralImage};
use mgipt::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRAIN_SEED: u64 = 1;
pub const HELD_OUT_SEED: u64 = 99;
pub const TRAIN_SAMPLES: usize = 200;

/// Source network trained once per test binary on domain A.
pub fn source_model() -> &'static MiniSegNet {
    static MODEL: OnceLock<MiniSegNet> = OnceLock::new();
    MODEL.get_or_init(|| {
        let train = generate_domain(&DomainStyle::preset(Domain::A), TRAIN_SAMPLES, TRAIN_SEED).unwrap();
        let mut net = MiniSegNet::init(0);
        pretrain(&mut net, &train.images(), &train.masks(), &PretrainConfig::default()).unwrap();
        net
    })
}

pub fn held_out(domain: Domain, n: usize) -> Dataset {
    generate_domain(&DomainStyle::preset(domain), n, HELD_OUT_SEED).unwrap()
}

/// Class-averaged DSC of the source model on held-out data, in [0, 1].
pub fn held_out_dsc(net: &MiniSegNet, domain: Domain, n: usize, mode: BnMode) -> f64 {
    let data = held_out(domain, n);
    evaluate(net, &data.images(), &data.masks(), mode).unwrap()
}

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    fn new() -> Self {
        Self { probes: 0, max_rel_err: 0.0 }
    }

    fn push(&mut self, analytic: f64, numeric: f64, value: f64) {
        self.probes += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, numeric, value));
    }
}

// Small enough that batch-statistics probes rarely cross a ReLU or max-pool
// switch, large enough to stay clear of rounding.
const FD_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`. The floor sits 10^5 times above the
/// rounding error of the difference quotient of a function of size
/// `value`, so gradients that are exactly zero (and whose numeric estimate
/// is pure rounding noise) are not judged relative to that noise.
pub fn rel_err(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = 1e5 * f64::EPSILON * value.abs().max(1.0) / FD_STEP;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + FD_STEP) - f(at - FD_STEP)) / (2.0 * FD_STEP)
}

fn test_image(seed: u64) -> Tensor {
    let data = generate_domain(&DomainStyle::preset(Domain::E), 1, seed).unwrap();
    data.samples[0].image.clone()
}

fn projection(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn projected(net: &MiniSegNet, x: &Tensor, mode: BnMode, r: &Tensor) -> f64 {
    let (logits, _) = net.forward(x, mode).unwrap();
    logits.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Gradient of the alignment loss with respect to prompt cells, through
/// the spectral prompt application and the network.
pub fn prompt_fd(net: &MiniSegNet, probes: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectral = SpectralImage::new(&test_image(seed)).unwrap();
    let side = 5;
    let values = (0..side * side * 3).map(|_| 1.0 + rng.random_range(-0.2..0.2)).collect();
    let prompt = PromptGrid::from_values(side, side, 3, values).unwrap();
    let (_, grad) = spectral.align_grad(&prompt, net, BnMode::Source, BnLossScope::All).unwrap();
    let loss_at = |i: usize, v: f64| {
        let mut p = prompt.clone();
        p.values_mut()[i] = v;
        let adapted = spectral.apply(&p).unwrap().batched().unwrap();
        let (_, tape) = net.forward(&adapted, BnMode::Source).unwrap();
        bn_align_loss(&tape, net, BnLossScope::All).0
    };
    let base = loss_at(0, prompt.values()[0]);
    let mut report = FdReport::new();
    for _ in 0..probes {
        let i = rng.random_range(0..grad.len());
        report.push(grad[i], central(|v| loss_at(i, v), prompt.values()[i]), base);
    }
    report
}

/// A copy of `net` whose stored statistics are the constants `tape`
/// normalized with, so that its source-mode forward reproduces the taped
/// pass while holding those constants fixed.
pub fn frozen_stats(net: &MiniSegNet, tape: &ForwardTape) -> MiniSegNet {
    let mut frozen = net.clone();
    for (bn, st) in frozen.bns.iter_mut().zip(tape.bn_stats()) {
        bn.running_mean.data_mut().copy_from_slice(&st.used_mean);
        bn.running_std.data_mut().copy_from_slice(&st.used_std);
    }
    frozen
}

/// Input gradient of a random projection of the logits, under the given
/// normalization mode and batch size. Calibrated statistics are constants
/// of the backward pass, so that mode is differenced with them frozen.
pub fn input_fd(net: &MiniSegNet, mode: BnMode, batch: usize, probes: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..batch as u64).map(|i| test_image(seed + i)).collect();
    let x = Tensor::stack(&images.iter().collect::<Vec<_>>()).unwrap();
    let (logits, tape) = net.forward(&x, mode).unwrap();
    let r = projection(logits.shape(), &mut rng);
    let grad = net.backward_input(&tape, &r).unwrap();
    let (reference, fd_mode) = match mode {
        BnMode::Calibrated(_) => (frozen_stats(net, &tape), BnMode::Source),
        _ => (net.clone(), mode),
    };
    let base = projected(&reference, &x, fd_mode, &r);
    let mut report = FdReport::new();
    for _ in 0..probes {
        let i = rng.random_range(0..x.len());
        let f = |v: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] = v;
            projected(&reference, &xp, fd_mode, &r)
        };
        report.push(grad.data()[i], central(f, x.data()[i]), base);
    }
    report
}

/// Parameter gradients of a random projection of training-mode logits.
pub fn param_fd(net: &MiniSegNet, batch: usize, probes: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..batch as u64).map(|i| test_image(seed + i)).collect();
    let x = Tensor::stack(&images.iter().collect::<Vec<_>>()).unwrap();
    let (logits, tape) = net.forward(&x, BnMode::Batch).unwrap();
    let r = projection(logits.shape(), &mut rng);
    let grads = net.backward_params(&tape, &r).unwrap();
    let grads: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
    let base = projected(net, &x, BnMode::Batch, &r);
    let mut report = FdReport::new();
    for _ in 0..probes {
        let t = rng.random_range(0..grads.len());
        let i = rng.random_range(0..grads[t].len());
        let f = |v: f64| {
            let mut moved = net.clone();
            moved.trainable_mut()[t].data_mut()[i] = v;
            projected(&moved, &x, BnMode::Batch, &r)
        };
        let mut probe = net.clone();
        let at = probe.trainable_mut()[t].data()[i];
        report.push(grads[t].data()[i], central(f, at), base);
    }
    report
}
