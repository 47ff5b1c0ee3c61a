//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use common::{input_fd, param_fd, prompt_fd, source_model};
use mgipt::adam::AdamState;
use mgipt::aip::{grow_prompt, AlignObjective};
use mgipt::benchgen::{generate_domain, Dataset, Domain, DomainStyle};
use mgipt::metrics::{ensemble, ensemble_weights};
use mgipt::mgp::{GlobalPromptBank, MgpConfig};
use mgipt::net::loss::{align_loss_from_stats, LayerStats};
use mgipt::net::{BnMode, MiniSegNet};
use mgipt::prompt::{adam_step, apply_prompt, PromptGrid, SpectralImage};
use mgipt::runtime::{run_stream, Method, RunConfig, StreamResult, Summary};
use mgipt::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

/// Samples per target domain in the protocol runs.
const ABLATION_SAMPLES: usize = 8;
const STREAM_SAMPLES: usize = 16;
const ABLATION_SEEDS: [u64; 5] = [101, 102, 103, 104, 105];
const STREAM_SEED: u64 = 77;

fn stream_data(seed: u64, n: usize) -> impl FnMut(Domain) -> mgipt::Result<Dataset> {
    move |d| generate_domain(&DomainStyle::preset(d), n, seed)
}

fn run(net: &MiniSegNet, cfg: &RunConfig, seed: u64, n: usize) -> StreamResult {
    let r = run_stream(net, cfg, &mut stream_data(seed, n), &mut |_| Ok(())).unwrap();
    assert!(r.error.is_none(), "stream stopped: {:?}", r.error);
    r
}

fn mean_dsc(net: &MiniSegNet, cfg: &RunConfig, seed: u64, n: usize) -> f64 {
    run(net, cfg, seed, n).summary.mean_dsc()
}

fn criterion_1_gradients() -> Outcome {
    let started = Instant::now();
    let probes = 24;
    let reports = [
        ("prompt", prompt_fd(&MiniSegNet::init(21), probes, 1)),
        ("input/source", input_fd(&MiniSegNet::init(22), BnMode::Source, 1, probes, 2)),
        ("input/calibrated", input_fd(&MiniSegNet::init(22), BnMode::Calibrated(0.8), 1, probes, 3)),
        ("input/batch", input_fd(&MiniSegNet::init(22), BnMode::Batch, 2, probes, 4)),
        ("params/batch", param_fd(&MiniSegNet::init(23), 2, probes, 5)),
    ];
    let secs = started.elapsed().as_secs_f64();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let ok = reports.iter().all(|(_, r)| r.probes >= 20 && r.max_rel_err < 1e-3) && secs < 30.0;
    let detail = reports
        .iter()
        .map(|(n, r)| format!("{n} {}x {:.1e}", r.probes, r.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, format!("max rel err {worst:.2e} < 1e-3 in {secs:.1}s < 30s ({detail})"))
}

fn criterion_2_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_identity: f64 = 0.0;
    for &(h, w) in &[(4, 4), (7, 5), (16, 9), (64, 64)] {
        let x = Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for side in [1, 3] {
            let y = apply_prompt(&PromptGrid::square(side, 3), &x).unwrap();
            worst_identity = worst_identity.max(y.max_abs_diff(&x).unwrap());
        }
    }

    let net = source_model();
    let x = generate_domain(&DomainStyle::preset(Domain::D), 2, 3).unwrap();
    let batch = Tensor::stack(&[&x.samples[0].image, &x.samples[1].image]).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let fwd = |m| net.forward(&batch, m).unwrap().0;
    let lambda_one = bits(&fwd(BnMode::Calibrated(1.0))) == bits(&fwd(BnMode::Source));
    let lambda_zero = bits(&fwd(BnMode::Calibrated(0.0))) == bits(&fwd(BnMode::Batch));

    let image = &x.samples[0].image;
    let bank_with = |e: f64| {
        let cfg = MgpConfig {
            ema_decay: e,
            ..Default::default()
        };
        GlobalPromptBank::new(cfg, 3).unwrap()
    };
    let mut b0 = bank_with(0.0);
    let students = b0.adapt(image, net, AlignObjective::default()).unwrap();
    let e_zero = b0.teachers().iter().zip(&students).all(|(t, s)| bits(&t.as_tensor()) == bits(&s.as_tensor()));
    let mut b1 = bank_with(1.0);
    let before = b1.teachers().to_vec();
    let students = b1.adapt(image, net, AlignObjective::default()).unwrap();
    let moved = students.iter().zip(&before).any(|(s, t)| s != t);
    let e_one = moved && b1.teachers() == before.as_slice();

    let uniform = ensemble_weights(&[0.0; 4]) == vec![0.25; 4];
    let p: Vec<Tensor> = (0..4).map(|i| Tensor::full(&[2, 2, 2], 0.1 * i as f64)).collect();
    let (fused, _) = ensemble(&p.iter().collect::<Vec<_>>(), &[0.0; 4]).unwrap();
    let uniform_fused = fused.data().iter().all(|&v| (v - 0.15).abs() < 1e-15);

    let ok = worst_identity <= 1e-9 && lambda_one && lambda_zero && e_zero && e_one && uniform && uniform_fused;
    (
        ok,
        format!(
            "ones prompt max diff {worst_identity:.1e} <= 1e-9; lambda=1 bitwise {lambda_one}; lambda=0 bitwise \
             {lambda_zero}; e=0 teacher=student {e_zero}; e=1 teacher unchanged {e_one}; zero confidences uniform {}",
            uniform && uniform_fused
        ),
    )
}

fn criterion_3_arithmetic() -> Outcome {
    let (loss, _) = align_loss_from_stats(&[LayerStats {
        source_mean: &[0.0],
        source_std: &[1.0],
        mean: &[0.5],
        std: &[1.25],
    }]);

    let cfg = MgpConfig {
        ema_decay: 0.1,
        ..Default::default()
    };
    let mut bank = GlobalPromptBank::new(cfg, 3).unwrap();
    let students: Vec<PromptGrid> = bank
        .scales()
        .iter()
        .map(|&s| PromptGrid::from_values(s, s, 3, vec![0.5; s * s * 3]).unwrap())
        .collect();
    bank.teacher_update(&students).unwrap();
    let ema = bank.teachers()[0].values()[0];
    let ema_ok = bank.teachers().iter().flat_map(|t| t.values()).all(|&v| (v - 0.55).abs() < 1e-4);

    let w = ensemble_weights(&[0.9, 0.8, 0.7, 0.6]);
    let expected = [0.3, 0.2667, 0.2333, 0.2];
    let w_ok = w.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-4);

    let ok = (loss - 0.75).abs() < 1e-4 && ema_ok && w_ok;
    (
        ok,
        format!(
            "align loss {loss:.4} (0.75); EMA {ema:.4} (0.55); weights [{}] (0.3, 0.2667, 0.2333, 0.2); tol 1e-4",
            w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_4_growth() -> Outcome {
    let one = PromptGrid::square(1, 3);
    let three = grow_prompt(&one);
    let five = grow_prompt(&three);
    let ring1 = three.trainable_count() / 3;
    let ring2 = five.trainable_count() / 3;
    let interior_frozen = (0..3).all(|c| {
        (1..4).all(|y| (1..4).all(|x| five.frozen()[five.index(c, y, x)]))
            && (0..5).all(|i| {
                let edge = [(0, i), (4, i), (i, 0), (i, 4)];
                edge.iter().all(|&(y, x)| !five.frozen()[five.index(c, y, x)])
            })
    });

    // Tune the 5x5 prompt on real alignment gradients and then on random ones.
    let net = source_model();
    let image = generate_domain(&DomainStyle::preset(Domain::E), 1, 4).unwrap().samples[0].image.clone();
    let spectral = SpectralImage::new(&image).unwrap();
    let mut seeded = five.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut values = seeded.values().to_vec();
    for (v, &f) in values.iter_mut().zip(five.frozen()) {
        if f {
            *v = rng.random_range(0.5..1.5);
        }
    }
    seeded.values_mut().copy_from_slice(&values);
    let mut p = seeded.clone();
    let mut opt = AdamState::new(p.values().len(), 0.05);
    for step in 0..30 {
        let grad = if step < 10 {
            spectral.align_grad(&p, net, BnMode::Source, Default::default()).unwrap().1
        } else {
            (0..p.values().len()).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        adam_step(&mut p, &grad, &mut opt).unwrap();
    }
    let frozen_bitwise = p
        .values()
        .iter()
        .zip(seeded.values())
        .zip(p.frozen())
        .all(|((a, b), &f)| !f || a.to_bits() == b.to_bits());
    let ring_moved = p.values().iter().zip(seeded.values()).zip(p.frozen()).all(|((a, b), &f)| f || a != b);

    let ok = (five.height(), five.width()) == (5, 5)
        && ring1 == 8
        && ring2 == 16
        && ring1 + ring2 == 24
        && interior_frozen
        && frozen_bitwise
        && ring_moved;
    (
        ok,
        format!(
            "1x1 -> {}x{}; trainable rings {ring1} + {ring2} = {} per channel (24); 3x3 interior frozen {interior_frozen}; \
             interior bitwise unchanged over 30 steps {frozen_bitwise}; outer ring updated {ring_moved}",
            five.height(),
            five.width(),
            ring1 + ring2
        ),
    )
}

fn criterion_5_ablation() -> Outcome {
    let started = Instant::now();
    let net = source_model();
    let methods = [Method::SourceOnly, Method::BnCalibOnly, Method::Mgipt];
    let mut means = [0.0; 3];
    for &seed in &ABLATION_SEEDS {
        for (m, &method) in means.iter_mut().zip(&methods) {
            let cfg = RunConfig {
                method,
                seed,
                ..Default::default()
            };
            *m += mean_dsc(net, &cfg, seed, ABLATION_SAMPLES) / ABLATION_SEEDS.len() as f64;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let [src, bn, full] = means;
    let ok = full - bn >= 1.0 && bn - src >= 1.0 && secs < 600.0;
    (
        ok,
        format!(
            "mgipt {full:.2} > bn_calib_only {bn:.2} > source_only {src:.2}; gaps {:.2}, {:.2} >= 1; \
             5 seeds x 4 domains x {ABLATION_SAMPLES} samples in {secs:.0}s < 600s",
            full - bn,
            bn - src
        ),
    )
}

fn criterion_6_long_term() -> Outcome {
    let net = source_model();
    let digest = net.digest();
    let cfg = RunConfig {
        rounds: 3,
        ..Default::default()
    };
    let s = run(net, &cfg, STREAM_SEED, STREAM_SAMPLES).summary;
    let r = &s.per_round_avg;
    let mut spread: f64 = 0.0;
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            spread = spread.max((r[i] - r[j]).abs());
        }
    }
    let unchanged = net.digest() == digest && s.model_digest == digest;
    let ok = r.len() == 3 && s.pd.abs() <= 0.5 && spread <= 0.5 && unchanged;
    (
        ok,
        format!(
            "rounds [{}]; |PD| {:.3} <= 0.5; max pairwise gap {spread:.3} <= 0.5; weights digest unchanged {unchanged}",
            r.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", "),
            s.pd.abs()
        ),
    )
}

fn criterion_7_sensitivity() -> Outcome {
    let net = source_model();
    let sweep = |key: &str, values: &[f64]| -> Vec<f64> {
        values
            .iter()
            .map(|&v| {
                let mut cfg = RunConfig::default();
                cfg.set_numeric(key, v).unwrap();
                mean_dsc(net, &cfg, STREAM_SEED, STREAM_SAMPLES)
            })
            .collect()
    };
    let es: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let e_dsc = sweep("ema_decay", &es);
    let e_spread = e_dsc.iter().copied().fold(f64::MIN, f64::max) - e_dsc.iter().copied().fold(f64::MAX, f64::min);

    let lambdas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let l_dsc = sweep("lambda", &lambdas);
    let at = |l: f64| l_dsc[lambdas.iter().position(|&x| x == l).unwrap()];
    let best = l_dsc.iter().copied().fold(f64::MIN, f64::max);
    let low_decline = lambdas.iter().zip(&l_dsc).filter(|(&l, _)| l < 0.3).all(|(_, &d)| d < at(0.8));

    let ok = e_spread < 1.5 && low_decline && best - at(0.8) <= 0.5;
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join(" ");
    (
        ok,
        format!(
            "e 0.0..0.9 spread {e_spread:.2} < 1.5 [{}]; lambda {{0,.2,.4,.6,.8,1}} [{}]: lambda<0.3 below \
             lambda=0.8 {low_decline}, lambda=0.8 {:.2} within {:.2} <= 0.5 of max",
            fmt(&e_dsc),
            fmt(&l_dsc),
            at(0.8),
            best - at(0.8)
        ),
    )
}

fn criterion_8_determinism() -> Outcome {
    let net = source_model();
    let cfg = RunConfig {
        rounds: 2,
        seed: 8,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let r = run(net, &cfg, 8, 3);
        let out = dir.path().join(format!("run{i}"));
        mgipt::runtime::report::write_run(&out, &r.summary, &r.records).unwrap();
        files.push(std::fs::read(out.join(mgipt::runtime::SUMMARY_FILE)).unwrap());
    }
    let same = files[0] == files[1];
    let parsed = Summary::from_json(std::str::from_utf8(&files[0]).unwrap()).unwrap();
    (
        same && parsed.samples == 24,
        format!("two identical runs -> summary.json byte-identical {same} ({} bytes)", files[0].len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", criterion_1_gradients),
        ("identity and degenerate cases", criterion_2_identities),
        ("arithmetic oracles", criterion_3_arithmetic),
        ("progressive growth contract", criterion_4_growth),
        ("ablation ordering", criterion_5_ablation),
        ("long-term rounds", criterion_6_long_term),
        ("sensitivity sweeps", criterion_7_sensitivity),
        ("determinism", criterion_8_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (ok, detail) = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let tag = if ok { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {} {name}: {detail} [{:.1}s]",
            i + 1,
            started.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
