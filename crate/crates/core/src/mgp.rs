//! Multi-scale global prompts kept as EMA teachers of per-sample students.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::aip::AlignObjective;
use crate::error::{Error, Result};
use crate::net::MiniSegNet;
use crate::par;
use crate::prompt::{adam_step, PromptGrid, SpectralImage};
use crate::tensor::Tensor;

/// How a student prompt starts each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Teacher,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgpConfig {
    pub base_size: usize,
    pub ema_decay: f64,
    pub student_epochs: usize,
    pub lr: f64,
    pub student_init: StudentInit,
    pub reset_student_optimizer: bool,
}

impl Default for MgpConfig {
    fn default() -> Self {
        Self {
            base_size: 5,
            ema_decay: 0.1,
            student_epochs: 1,
            lr: 0.05,
            student_init: StudentInit::Teacher,
            reset_student_optimizer: false,
        }
    }
}

impl MgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_size < 3 || self.base_size % 2 == 0 {
            return Err(Error::Config(format!(
                "base size {} must be odd and at least 3",
                self.base_size
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0,1]", self.ema_decay)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("global prompt learning rate".into()));
        }
        Ok(())
    }

    /// `[bs - 2, bs, bs + 2]`.
    pub fn scales(&self) -> [usize; 3] {
        [self.base_size - 2, self.base_size, self.base_size + 2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    scales: Vec<usize>,
    channels: usize,
    config: MgpConfig,
    samples_seen: u64,
    optimizers: Vec<AdamState>,
}

/// Teacher prompts at several scales plus the optimizer state of their
/// students.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPromptBank {
    cfg: MgpConfig,
    scales: Vec<usize>,
    teachers: Vec<PromptGrid>,
    optimizers: Vec<AdamState>,
    samples_seen: u64,
}

impl GlobalPromptBank {
    /// Three all-ones teachers at `bs - 2`, `bs`, `bs + 2`.
    pub fn new(cfg: MgpConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let scales = cfg.scales().to_vec();
        Ok(Self::with_scales(cfg, channels, scales))
    }

    /// A bank holding only the base scale.
    pub fn single_scale(cfg: MgpConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let scales = vec![cfg.base_size];
        Ok(Self::with_scales(cfg, channels, scales))
    }

    fn with_scales(cfg: MgpConfig, channels: usize, scales: Vec<usize>) -> Self {
        let teachers: Vec<PromptGrid> = scales.iter().map(|&s| PromptGrid::square(s, channels)).collect();
        let optimizers = teachers
            .iter()
            .map(|t| AdamState::new(t.values().len(), cfg.lr))
            .collect();
        Self {
            cfg,
            scales,
            teachers,
            optimizers,
            samples_seen: 0,
        }
    }

    pub fn config(&self) -> &MgpConfig {
        &self.cfg
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn teachers(&self) -> &[PromptGrid] {
        &self.teachers
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    fn student_start(&self, i: usize) -> PromptGrid {
        match self.cfg.student_init {
            StudentInit::Teacher => self.teachers[i].clone(),
            StudentInit::Ones => PromptGrid::square(self.scales[i], self.teachers[i].channels()),
        }
    }

    /// Optimizes one student per scale on the alignment loss of `x`.
    ///
    /// A scale whose optimization fails numerically yields a copy of its
    /// teacher and keeps its previous optimizer state.
    pub fn student_update(
        &mut self,
        x: &Tensor,
        net: &MiniSegNet,
        objective: AlignObjective,
    ) -> Result<Vec<PromptGrid>> {
        let spectral = SpectralImage::new(x)?;
        let outcomes = par::map_range(self.scales.len(), |i| {
            let mut student = self.student_start(i);
            let mut opt = if self.cfg.reset_student_optimizer {
                AdamState::new(student.values().len(), self.cfg.lr)
            } else {
                self.optimizers[i].clone()
            };
            let run = (|| -> Result<()> {
                for _ in 0..self.cfg.student_epochs {
                    let (_, grad) = spectral.align_grad(&student, net, objective.mode, objective.scope)?;
                    adam_step(&mut student, &grad, &mut opt)?;
                }
                Ok(())
            })();
            match run {
                Ok(()) => Ok(Some((student, opt))),
                Err(e) if e.is_numeric() => Ok(None),
                Err(e) => Err(e),
            }
        });
        let mut students = Vec::with_capacity(self.scales.len());
        for (i, outcome) in outcomes.into_iter().enumerate() {
            match outcome? {
                Some((student, opt)) => {
                    self.optimizers[i] = opt;
                    students.push(student);
                }
                None => students.push(self.teachers[i].clone()),
            }
        }
        Ok(students)
    }

    /// `teacher = e * teacher + (1 - e) * student`, per scale.
    pub fn teacher_update(&mut self, students: &[PromptGrid]) -> Result<()> {
        if students.len() != self.teachers.len()
            || students.iter().zip(&self.teachers).any(|(s, t)| !s.same_shape(t))
        {
            return Err(Error::Shape("students do not match teacher scales".into()));
        }
        let e = self.cfg.ema_decay;
        let mut next = self.teachers.clone();
        for (t, s) in next.iter_mut().zip(students) {
            for (tv, &sv) in t.values_mut().iter_mut().zip(s.values()) {
                let blended = e * *tv + (1.0 - e) * sv;
                // Keep the result inside the closed segment despite rounding.
                *tv = blended.clamp(tv.min(sv), tv.max(sv));
            }
            if !t.is_finite() {
                return Err(Error::Numeric("teacher prompt left the finite range".into()));
            }
        }
        self.teachers = next;
        self.samples_seen += 1;
        Ok(())
    }

    /// Student step followed by the EMA update; returns the students.
    pub fn adapt(&mut self, x: &Tensor, net: &MiniSegNet, objective: AlignObjective) -> Result<Vec<PromptGrid>> {
        let students = self.student_update(x, net, objective)?;
        self.teacher_update(&students)?;
        Ok(students)
    }

    /// Writes `teacher_<i>.prmt` files and `bank.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, t) in self.teachers.iter().enumerate() {
            t.save(&dir.join(format!("teacher_{i}.prmt")))?;
        }
        let meta = BankMeta {
            scales: self.scales.clone(),
            channels: self.teachers.first().map_or(0, |t| t.channels()),
            config: self.cfg.clone(),
            samples_seen: self.samples_seen,
            optimizers: self.optimizers.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("bank.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("bank.json"))?;
        let meta: BankMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("bank.json: {e}")))?;
        meta.config.validate()?;
        let mut teachers = Vec::with_capacity(meta.scales.len());
        for (i, &s) in meta.scales.iter().enumerate() {
            let t = PromptGrid::load(&dir.join(format!("teacher_{i}.prmt")))?;
            if t.height() != s || t.width() != s || t.channels() != meta.channels {
                return Err(Error::Format(format!("teacher {i} does not match scale {s}")));
            }
            teachers.push(t);
        }
        if meta.optimizers.len() != teachers.len()
            || meta.optimizers.iter().zip(&teachers).any(|(o, t)| o.len() != t.values().len())
        {
            return Err(Error::Format("optimizer state does not match teachers".into()));
        }
        Ok(Self {
            cfg: meta.config,
            scales: meta.scales,
            teachers,
            optimizers: meta.optimizers,
            samples_seen: meta.samples_seen,
        })
    }
}
