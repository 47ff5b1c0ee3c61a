//! Command-line front end: generate the benchmark, pretrain the source
//! network, adapt along a domain stream and tabulate the reports.
//!
//! ```text
//! mgipt gen --out data --seed 7
//! mgipt pretrain --data data --out model.mseg --seed 7
//! mgipt adapt --model model.mseg --data data --out runs/mgipt --rounds 3
//! mgipt report --in runs/mgipt runs/source --format md
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (including a failed pretraining gate).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mgipt::benchgen::{generate_domain, read_dataset, write_dataset, Dataset, Domain, DomainStyle};
use mgipt::io::encode_ppm;
use mgipt::net::train::{evaluate, pretrain, PretrainConfig};
use mgipt::net::{BnMode, MiniSegNet};
use mgipt::runtime::report::{read_summary, render_csv, render_md, write_run};
use mgipt::runtime::{run_stream, Method, RunConfig, StreamEvent, Summary, Sweep};
use mgipt::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "mgipt", version)]
#[command(about = "Test-time adaptation of a segmentation network with spectral input prompts")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the five-domain synthetic benchmark.
    Gen(GenArgs),
    /// Train the source network on domain A and report held-out DSC.
    Pretrain(PretrainArgs),
    /// Adapt the source network along the target-domain stream.
    Adapt(AdaptArgs),
    /// Render one or more run reports as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory; one subdirectory per domain.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples written for each domain.
    #[arg(long, default_value_t = 100)]
    n_per_domain: usize,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Seed for weight initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimizer steps; 0 stores the initialization.
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    steps: usize,
    /// Held-out DSC below which training counts as failed (ignored with --steps 0).
    #[arg(long, default_value_t = 0.90)]
    min_dsc: f64,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (flat TOML); unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Adaptation variant: mgipt, source_only, bn_calib_only, single_scale_gp, gp_only or ip_only.
    #[arg(long)]
    method: Option<Method>,
    /// Passes over the target domains.
    #[arg(long)]
    rounds: Option<usize>,
    /// Run seed, recorded with the report.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a numeric setting, e.g. `--set lambda=0.6`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write original / prompt / adapted PPM images for every prompted sample.
    #[arg(long)]
    dump_images: bool,
    /// Run one child process per value, e.g. `e=0.0:0.9:0.1`, each into `OUT/KEY=VALUE/`.
    #[arg(long, value_name = "KEY=START:STOP:STEP")]
    sweep: Option<Sweep>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report directories written by `adapt`.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Md,
}


/// The trained network missed the held-out DSC threshold.
#[derive(Debug)]
struct GateFailed {
    dsc: f64,
    min: f64,
}

impl std::fmt::Display for GateFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "held-out DSC {:.4} is below the gate {:.2}", self.dsc, self.min)
    }
}

impl std::error::Error for GateFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mgipt::Error>() {
            return match e {
                mgipt::Error::Config(_) => 2,
                e if e.is_numeric() => 4,
                _ => 3,
            };
        }
        if cause.is::<GateFailed>() {
            return 4;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Gen(args) => gen(&args),
        Cmd::Pretrain(args) => pretrain_cmd(&args),
        Cmd::Adapt(args) => adapt(&args),
        Cmd::Report(args) => report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

// ============================================================================
// gen
// ============================================================================

/// Each domain gets its own scenes so that no target image shares a mask
/// with the training data.
fn domain_seed(seed: u64, domain: Domain) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(domain.index() as u64 + 1)
}

fn gen(args: &GenArgs) -> Result<()> {
    for domain in Domain::ALL {
        let style = DomainStyle::preset(domain);
        let data = generate_domain(&style, args.n_per_domain, domain_seed(args.seed, domain))?;
        write_dataset(&args.out, &data)?;
        println!("{domain}: {} samples", data.len());
    }
    Ok(())
}

// ============================================================================
// pretrain
// ============================================================================

/// Splits off the last fifth (at least one sample) for validation. A
/// single-sample dataset is used for both.
fn split(data: &Dataset) -> (Dataset, Dataset) {
    let n = data.len();
    let held = (n / 5).max(1);
    let cut = if n > 1 { n - held } else { n };
    let part = |range: std::ops::Range<usize>| Dataset {
        domain: data.domain,
        samples: data.samples[range].to_vec(),
    };
    (part(0..cut), part(n - held..n))
}

fn pretrain_cmd(args: &PretrainArgs) -> Result<()> {
    let data = read_dataset(&args.data, Domain::A).context("reading domain A")?;
    let (train, held) = split(&data);
    let cfg = PretrainConfig {
        steps: args.steps,
        seed: args.seed,
        ..PretrainConfig::default()
    };
    let mut net = MiniSegNet::init(args.seed);
    let losses = pretrain(&mut net, &train.images(), &train.masks(), &cfg)?;
    if let Some(last) = losses.last() {
        println!("steps {}  final loss {last:.4}", losses.len());
    }
    net.save(&args.out)?;
    let dsc = evaluate(&net, &held.images(), &held.masks(), BnMode::Source)?;
    println!("held-out domain-A DSC {dsc:.4} ({} samples)", held.len());
    println!("checkpoint {} sha256 {}", args.out.display(), net.digest());
    if args.steps > 0 && !(dsc >= args.min_dsc) {
        return Err(GateFailed { dsc, min: args.min_dsc }.into());
    }
    Ok(())
}

// ============================================================================
// adapt
// ============================================================================

fn run_config(args: &AdaptArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| mgipt::Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(method) = args.method {
        cfg.method = method;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for item in &args.overrides {
        let bad = || mgipt::Error::Config(format!("--set {item:?} is not KEY=VALUE"));
        let (key, value) = item.split_once('=').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        cfg.set_numeric(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn adapt(args: &AdaptArgs) -> Result<()> {
    if let Some(sweep) = &args.sweep {
        return run_sweep(args, sweep);
    }
    let cfg = run_config(args)?;
    let net = MiniSegNet::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let image_dir = args.out.join("images");
    if args.dump_images {
        fs::create_dir_all(&image_dir)?;
    }
    let mut load = |domain| read_dataset(&args.data, domain);
    let mut hook = |event: &StreamEvent<'_>| -> mgipt::Result<()> {
        if args.dump_images {
            dump_images(&image_dir, event)?;
        }
        Ok(())
    };
    let result = run_stream(&net, &cfg, &mut load, &mut hook)?;
    write_run(&args.out, &result.summary, &result.records)?;
    if let Some(err) = result.error {
        return Err(err).context(format!("stream stopped after {} samples", result.records.len()));
    }
    let s = &result.summary;
    println!("{} samples  overall {:.4}  pd {:.4}", s.samples, s.overall_avg, s.pd);
    Ok(())
}

/// Nearest-neighbour upscale of a prompt image so it sits next to the
/// full-size panels.
fn upscale(t: &Tensor, h: usize, w: usize) -> mgipt::Result<Tensor> {
    let (c, ph, pw) = t.chw()?;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(t.data()[ch * ph * pw + (y * ph / h) * pw + x * pw / w]);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Writes `<round>_<domain>_<id>_{original,prompt,adapted}.ppm` for samples
/// that were adapted by an instance prompt.
fn dump_images(dir: &Path, event: &StreamEvent<'_>) -> mgipt::Result<()> {
    let a = event.adaptation;
    let (Some(prompt), Some(adapted)) = (&a.instance_prompt, &a.adapted) else {
        return Ok(());
    };
    let r = event.record;
    let stem = format!("r{}_{}_{}", r.round, r.domain, r.sample_id);
    let (_, h, w) = event.image.chw()?;
    let panels = [
        ("original", event.image.clone()),
        ("prompt", upscale(&prompt.normalized_image(), h, w)?),
        ("adapted", adapted.clone()),
    ];
    for (name, image) in panels {
        fs::write(dir.join(format!("{stem}_{name}.ppm")), encode_ppm(&image)?)?;
    }
    Ok(())
}

fn sweep_label(key: &str, value: f64) -> String {
    format!("{key}={value}")
}

/// Re-invokes this binary once per sweep value with `--set KEY=VALUE`,
/// running as many children at a time as there are cores.
fn run_sweep(args: &AdaptArgs, sweep: &Sweep) -> Result<()> {
    // Rejects bad keys and values before any child starts.
    for &v in &sweep.values {
        run_config(args)?.set_numeric(&sweep.key, v)?;
    }
    let exe = std::env::current_exe().context("locating the executable")?;
    let width = std::thread::available_parallelism().map_or(1, |n| n.get());
    let labels: Vec<String> = sweep.values.iter().map(|&v| sweep_label(&sweep.key, v)).collect();
    for batch in labels.chunks(width) {
        let mut children = Vec::new();
        for label in batch {
            let mut cmd = Command::new(&exe);
            cmd.arg("adapt")
                .arg("--model")
                .arg(&args.model)
                .arg("--data")
                .arg(&args.data)
                .arg("--out")
                .arg(args.out.join(label));
            if let Some(config) = &args.config {
                cmd.arg("--config").arg(config);
            }
            if let Some(method) = args.method {
                cmd.arg("--method").arg(method.name());
            }
            if let Some(rounds) = args.rounds {
                cmd.arg("--rounds").arg(rounds.to_string());
            }
            if let Some(seed) = args.seed {
                cmd.arg("--seed").arg(seed.to_string());
            }
            for item in &args.overrides {
                cmd.arg("--set").arg(item);
            }
            cmd.arg("--set").arg(label);
            if args.dump_images {
                cmd.arg("--dump-images");
            }
            let child = cmd
                .stdout(Stdio::null())
                .spawn().with_context(|| format!("starting sweep run {label}"))?;
            children.push((label, child));
        }
        for (label, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("sweep run {label} failed with {status}");
            }
        }
    }
    let reports = labels
        .iter()
        .map(|l| Ok((l.clone(), read_summary(&args.out.join(l))?)))
        .collect::<Result<Vec<(String, Summary)>>>()?;
    fs::write(args.out.join("sweep.csv"), render_csv(&reports))?;
    print!("{}", render_md(&reports));
    Ok(())
}

// ============================================================================
// report
// ============================================================================

fn report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for dir in &args.inputs {
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        reports.push((name, read_summary(dir)?));
    }
    let table = match args.format {
        Format::Csv => render_csv(&reports),
        Format::Md => render_md(&reports),
    };
    print!("{table}");
    Ok(())
}
