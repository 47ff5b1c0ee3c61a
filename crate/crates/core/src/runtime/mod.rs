//! Continual adaptation over a stream of target-domain samples.
//!
//! Each sample gets an instance prompt tuned from scratch, a student step
//! for every global prompt followed by the teacher EMA, and a
//! confidence-weighted ensemble of the prompted predictions under calibrated
//! batch-norm statistics. The network is only ever borrowed immutably.

pub mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aip::{tune_instance_prompt, AipConfig, AlignObjective};
use crate::benchgen::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::metrics::{confidence, dsc_per_class, ensemble, sigmoid, ConfidenceReduce};
use crate::mgp::{GlobalPromptBank, MgpConfig, StudentInit};
use crate::net::{BnLossScope, BnMode, MiniSegNet, IN_CHANNELS};
use crate::prompt::{PromptGrid, SpectralImage};
use crate::tensor::Tensor;

pub use report::{Summary, SUMMARY_FILE};

/// Adaptation variant: the full method or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Instance prompt plus three global prompts, calibrated statistics.
    #[default]
    Mgipt,
    /// Plain forward with the stored source statistics.
    SourceOnly,
    /// Plain forward with calibrated statistics.
    BnCalibOnly,
    /// Instance prompt plus one global prompt at the base size.
    SingleScaleGp,
    /// The three global prompts without an instance prompt.
    GpOnly,
    /// The instance prompt alone.
    IpOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mgipt,
        Method::SourceOnly,
        Method::BnCalibOnly,
        Method::SingleScaleGp,
        Method::GpOnly,
        Method::IpOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mgipt => "mgipt",
            Method::SourceOnly => "source_only",
            Method::BnCalibOnly => "bn_calib_only",
            Method::SingleScaleGp => "single_scale_gp",
            Method::GpOnly => "gp_only",
            Method::IpOnly => "ip_only",
        }
    }

    pub fn uses_instance_prompt(self) -> bool {
        matches!(self, Method::Mgipt | Method::SingleScaleGp | Method::IpOnly)
    }

    pub fn uses_global_prompts(self) -> bool {
        matches!(self, Method::Mgipt | Method::SingleScaleGp | Method::GpOnly)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalization mode under which prompts minimise the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptBnMode {
    /// Downstream layers normalize with the source statistics.
    #[default]
    Source,
    /// Downstream layers normalize with the calibrated blend.
    Calibrated,
}

/// Every tunable of a run. Parsed from flat TOML; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Weight of the source statistics in the calibrated blend.
    pub lambda: f64,
    /// Teacher EMA decay.
    pub ema_decay: f64,
    /// Middle global prompt size; the others are two smaller and larger.
    pub base_size: usize,
    pub ip_lr: f64,
    pub gp_lr: f64,
    pub ip_epochs: usize,
    pub gp_epochs: usize,
    pub max_scale_steps: usize,
    pub patience: usize,
    /// (brightness, contrast) pairs for the consistency views.
    pub jitter: Vec<(f64, f64)>,
    /// Stream order of the target domains within a round.
    pub domains: Vec<Domain>,
    pub rounds: usize,
    /// Recorded with the run; adaptation itself draws no random numbers.
    pub seed: u64,
    pub bn_loss_scope: BnLossScope,
    pub method: Method,
    pub confidence_reduce: ConfidenceReduce,
    pub student_init: StudentInit,
    pub reset_student_optimizer: bool,
    pub prompt_bn_mode: PromptBnMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aip = AipConfig::default();
        let mgp = MgpConfig::default();
        Self {
            lambda: 0.8,
            ema_decay: mgp.ema_decay,
            base_size: mgp.base_size,
            ip_lr: aip.lr,
            gp_lr: mgp.lr,
            ip_epochs: aip.epochs_per_scale,
            gp_epochs: mgp.student_epochs,
            max_scale_steps: aip.max_scale_steps,
            patience: aip.patience,
            jitter: aip.jitter,
            domains: Domain::TARGETS.to_vec(),
            rounds: 1,
            seed: 0,
            bn_loss_scope: BnLossScope::All,
            method: Method::Mgipt,
            confidence_reduce: ConfidenceReduce::Mean,
            student_init: mgp.student_init,
            reset_student_optimizer: mgp.reset_student_optimizer,
            prompt_bn_mode: PromptBnMode::Source,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("no domains to adapt to".into()));
        }
        self.aip_config().validate()?;
        self.mgp_config().validate()
    }

    pub fn aip_config(&self) -> AipConfig {
        AipConfig {
            epochs_per_scale: self.ip_epochs,
            max_scale_steps: self.max_scale_steps,
            lr: self.ip_lr,
            jitter: self.jitter.clone(),
            patience: self.patience,
        }
    }

    pub fn mgp_config(&self) -> MgpConfig {
        MgpConfig {
            base_size: self.base_size,
            ema_decay: self.ema_decay,
            student_epochs: self.gp_epochs,
            lr: self.gp_lr,
            student_init: self.student_init,
            reset_student_optimizer: self.reset_student_optimizer,
        }
    }

    /// Normalization used for every prediction.
    pub fn eval_mode(&self) -> BnMode {
        BnMode::Calibrated(self.lambda)
    }

    pub fn objective(&self) -> AlignObjective {
        let mode = match self.prompt_bn_mode {
            PromptBnMode::Source => BnMode::Source,
            PromptBnMode::Calibrated => self.eval_mode(),
        };
        AlignObjective {
            mode,
            scope: self.bn_loss_scope,
        }
    }

    /// Sets one numeric key by name, as used by parameter sweeps.
    pub fn set_numeric(&mut self, key: &str, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{key} needs a non-negative integer, got {v}")))
            }
        };
        match key {
            "lambda" => self.lambda = value,
            "ema_decay" | "e" => self.ema_decay = value,
            "ip_lr" => self.ip_lr = value,
            "gp_lr" => self.gp_lr = value,
            "base_size" => self.base_size = as_count(value)?,
            "ip_epochs" => self.ip_epochs = as_count(value)?,
            "gp_epochs" => self.gp_epochs = as_count(value)?,
            "max_scale_steps" => self.max_scale_steps = as_count(value)?,
            "patience" => self.patience = as_count(value)?,
            "rounds" => self.rounds = as_count(value)?,
            "seed" => self.seed = as_count(value)? as u64,
            _ => return Err(Error::Config(format!("cannot sweep {key:?}"))),
        }
        self.validate()
    }
}

/// A `key=start:stop:step` sweep over one numeric setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("sweep {s:?} is not key=start:stop:step"));
        let (key, range) = s.split_once('=').ok_or_else(bad)?;
        let parts: Vec<f64> = range
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
            return Err(bad());
        }
        // Round to the step's decimal grid so 0.1 steps land on 0.3, not 0.30000000000000004.
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let values = (0..count)
            .map(|i| {
                let v = start + i as f64 * step;
                (v * 1e9).round() / 1e9
            })
            .collect();
        Ok(Sweep {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// One prediction branch of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub name: String,
    /// Prompt side length, if the branch is prompted.
    pub scale: Option<usize>,
    pub confidence: f64,
    pub weight: f64,
}

/// Per-sample log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub sample_id: String,
    pub domain: Domain,
    pub round: usize,
    /// Position in the whole stream, starting at 0.
    pub position: usize,
    pub branches: Vec<BranchRecord>,
    /// Per-class DSC as fractions (outer, inner).
    pub dsc: Vec<f64>,
    pub dsc_mean: f64,
    pub best_instance_scale: Option<usize>,
    pub consistency_trace: Vec<f64>,
    pub failed_branches: Vec<String>,
    pub wall_time_ms: f64,
}

/// Prediction for one sample with the prompts that produced it.
#[derive(Debug, Clone)]
pub struct Adaptation {
    /// Ensembled probabilities `[2, H, W]`.
    pub probs: Tensor,
    pub branches: Vec<BranchRecord>,
    pub failed_branches: Vec<String>,
    pub instance_prompt: Option<PromptGrid>,
    /// Input image adapted by the instance prompt.
    pub adapted: Option<Tensor>,
    pub best_instance_scale: Option<usize>,
    pub consistency_trace: Vec<f64>,
}

/// Per-stream adaptation state: the global prompt bank, if the method uses
/// one.
#[derive(Debug, Clone)]
pub struct Adapter {
    cfg: RunConfig,
    bank: Option<GlobalPromptBank>,
}

struct Branch {
    name: String,
    scale: Option<usize>,
    logits: Tensor,
}

impl Adapter {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = match cfg.method {
            Method::Mgipt | Method::GpOnly => Some(GlobalPromptBank::new(cfg.mgp_config(), IN_CHANNELS)?),
            Method::SingleScaleGp => Some(GlobalPromptBank::single_scale(cfg.mgp_config(), IN_CHANNELS)?),
            _ => None,
        };
        Ok(Self { cfg, bank })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn bank(&self) -> Option<&GlobalPromptBank> {
        self.bank.as_ref()
    }

    /// Adapts to one `[3, H, W]` image and predicts it.
    ///
    /// A branch whose computation fails numerically is dropped and the
    /// remaining weights renormalized; if every branch fails, the plain
    /// calibrated prediction is returned.
    pub fn adapt_sample(&mut self, net: &MiniSegNet, x: &Tensor) -> Result<Adaptation> {
        x.chw()?;
        x.ensure_finite()?;
        let cfg = &self.cfg;
        let eval = cfg.eval_mode();
        let mut branches = Vec::new();
        let mut failed = Vec::new();
        let mut out = Adaptation {
            probs: Tensor::zeros(&[1]),
            branches: Vec::new(),
            failed_branches: Vec::new(),
            instance_prompt: None,
            adapted: None,
            best_instance_scale: None,
            consistency_trace: Vec::new(),
        };
        match cfg.method {
            Method::SourceOnly => branches.push(Branch {
                name: "source".into(),
                scale: None,
                logits: forward_one(net, x, BnMode::Source)?,
            }),
            Method::BnCalibOnly => branches.push(Branch {
                name: "calibrated".into(),
                scale: None,
                logits: forward_one(net, x, eval)?,
            }),
            _ => {}
        }
        if cfg.method.uses_instance_prompt() {
            let aip = tune_instance_prompt(x, net, &cfg.aip_config(), cfg.objective(), eval)?;
            out.consistency_trace = aip.consistency_trace.clone();
            match aip.best_logits {
                Some(logits) => {
                    out.best_instance_scale = Some(aip.best_scale);
                    out.adapted = Some(SpectralImage::new(x)?.apply(&aip.best_prompt)?);
                    out.instance_prompt = Some(aip.best_prompt);
                    branches.push(Branch {
                        name: "instance".into(),
                        scale: Some(aip.best_scale),
                        logits,
                    });
                }
                None => failed.push("instance".to_string()),
            }
        }
        if let Some(bank) = self.bank.as_mut() {
            match bank.adapt(x, net, cfg.objective()) {
                Ok(_) => {}
                // Keep the previous teachers; they still yield predictions.
                Err(e) if e.is_numeric() => failed.push("global_update".to_string()),
                Err(e) => return Err(e),
            }
            let spectral = SpectralImage::new(x)?;
            for (i, teacher) in bank.teachers().iter().enumerate() {
                let name = format!("global_{}", bank.scales()[i]);
                let logits = spectral.apply(teacher).and_then(|adapted| forward_one(net, &adapted, eval));
                match logits {
                    Ok(logits) => branches.push(Branch {
                        name,
                        scale: Some(teacher.height()),
                        logits,
                    }),
                    Err(e) if e.is_numeric() => failed.push(name),
                    Err(e) => return Err(e),
                }
            }
        }
        if branches.is_empty() {
            branches.push(Branch {
                name: "fallback".into(),
                scale: None,
                logits: forward_one(net, x, eval)?,
            });
        }
        let confidences: Vec<f64> = branches
            .iter()
            .map(|b| confidence(&b.logits, cfg.confidence_reduce))
            .collect();
        let probs: Vec<Tensor> = branches.iter().map(|b| b.logits.map(sigmoid)).collect();
        let refs: Vec<&Tensor> = probs.iter().collect();
        let (fused, weights) = ensemble(&refs, &confidences)?;
        out.probs = fused;
        out.branches = branches
            .into_iter()
            .zip(confidences.iter().zip(&weights))
            .map(|(b, (&c, &w))| BranchRecord {
                name: b.name,
                scale: b.scale,
                confidence: c,
                weight: w,
            })
            .collect();
        out.failed_branches = failed;
        Ok(out)
    }
}

fn forward_one(net: &MiniSegNet, x: &Tensor, mode: BnMode) -> Result<Tensor> {
    let (logits, _) = net.forward(&x.clone().batched()?, mode)?;
    logits.item(0)
}

/// Adapts to `x` with a fresh single-sample state.
pub fn adapt_sample(net: &MiniSegNet, x: &Tensor, adapter: &mut Adapter) -> Result<Adaptation> {
    adapter.adapt_sample(net, x)
}

/// Per-sample callback payload.
pub struct StreamEvent<'a> {
    pub image: &'a Tensor,
    pub adaptation: &'a Adaptation,
    pub record: &'a AdaptationRecord,
}

/// Result of a stream; `error` is set when the run stopped early, in which
/// case `summary.partial` describes it.
#[derive(Debug)]
pub struct StreamResult {
    pub summary: Summary,
    pub records: Vec<AdaptationRecord>,
    pub error: Option<Error>,
}

/// Runs `cfg.rounds` passes over `cfg.domains`, one sample at a time, with
/// the global prompt bank carried across domains and rounds.
///
/// `load` supplies each domain's samples in stream order; `hook` sees every
/// adapted sample.
pub fn run_stream(
    net: &MiniSegNet,
    cfg: &RunConfig,
    load: &mut dyn FnMut(Domain) -> Result<Dataset>,
    hook: &mut dyn FnMut(&StreamEvent<'_>) -> Result<()>,
) -> Result<StreamResult> {
    let mut adapter = Adapter::new(cfg.clone())?;
    let digest = net.digest();
    let mut records = Vec::new();
    let mut error = None;
    let mut position = 0;
    'rounds: for round in 1..=cfg.rounds {
        for &domain in &cfg.domains {
            let data = match load(domain) {
                Ok(d) => d,
                Err(e) => {
                    error = Some(e);
                    break 'rounds;
                }
            };
            for sample in &data.samples {
                let started = Instant::now();
                let step = adapter.adapt_sample(net, &sample.image).and_then(|a| {
                    let dsc = dsc_per_class(&a.probs, &sample.mask)?;
                    Ok((a, dsc))
                });
                let (adaptation, dsc) = match step {
                    Ok(v) => v,
                    Err(e) => {
                        error = Some(e);
                        break 'rounds;
                    }
                };
                let record = AdaptationRecord {
                    sample_id: sample.id.clone(),
                    domain,
                    round,
                    position,
                    branches: adaptation.branches.clone(),
                    dsc_mean: dsc.iter().sum::<f64>() / dsc.len() as f64,
                    dsc,
                    best_instance_scale: adaptation.best_instance_scale,
                    consistency_trace: adaptation.consistency_trace.clone(),
                    failed_branches: adaptation.failed_branches.clone(),
                    wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
                };
                if let Err(e) = hook(&StreamEvent {
                    image: &sample.image,
                    adaptation: &adaptation,
                    record: &record,
                }) {
                    error = Some(e);
                    break 'rounds;
                }
                records.push(record);
                position += 1;
            }
        }
    }
    let mut summary = Summary::from_records(cfg, &records, digest);
    summary.partial = error.as_ref().map(|e| e.to_string());
    Ok(StreamResult {
        summary,
        records,
        error,
    })
}

/// Mean class-averaged DSC per domain of one round, as fractions.
pub(crate) fn domain_means(records: &[AdaptationRecord], round: usize) -> BTreeMap<Domain, f64> {
    let mut acc: BTreeMap<Domain, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.round == round) {
        let e = acc.entry(r.domain).or_default();
        e.0 += r.dsc_mean;
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}
