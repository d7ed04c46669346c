use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamW;
use crate::error::{Error, Result};
use crate::model::{ConditionTable, TokenKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lora,
    Cat,
    PriorPreservation,
    TextualEmbedding,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Lora, Mode::Cat, Mode::PriorPreservation, Mode::TextualEmbedding];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lora => "lora",
            Mode::Cat => "cat",
            Mode::PriorPreservation => "prior_preservation",
            Mode::TextualEmbedding => "textual_embedding",
        }
    }

    pub fn trains_adapter(self) -> bool {
        self != Mode::TextualEmbedding
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown training mode '{s}'")))
    }
}

/// Which prompt the contrastive branch evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastivePolicy {
    #[default]
    NullToken,
    ClassToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub rank: usize,
    pub lora_scale: f64,
    pub seed: u64,
    pub contrastive: ContrastivePolicy,
    pub prior_weight: f64,
    pub reg_set_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamW::default();
        TrainConfig {
            mode: Mode::Cat,
            alpha: 0.5,
            lr: opt.lr,
            steps: 600,
            batch_size: 4,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps_opt: opt.eps,
            weight_decay: opt.weight_decay,
            rank: 4,
            lora_scale: 1.0,
            seed: 0,
            contrastive: ContrastivePolicy::NullToken,
            prior_weight: 1.0,
            reg_set_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.prior_weight >= 0.0) || self.reg_set_size == 0 {
            return bad("prior_weight must be non-negative and reg_set_size at least 1".into());
        }
        if !self.lora_scale.is_finite() {
            return bad("lora_scale must be finite".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps_opt, weight_decay: self.weight_decay }
    }
}

/// Few-shot fine-tuning data: each sample carries the trigger token it is
/// captioned with and, optionally, the base class it resembles.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    pub samples: Vec<Vec<f64>>,
    pub triggers: Vec<usize>,
    pub captions: Vec<Option<usize>>,
}

impl IdentityDataset {
    pub fn new(samples: Vec<Vec<f64>>, trigger: usize, caption: Option<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("identity dataset is empty"));
        }
        let n = samples.len();
        Ok(IdentityDataset { samples, triggers: vec![trigger; n], captions: vec![caption; n] })
    }

    /// Union of several single-concept sets, for multi-concept training.
    pub fn concat(parts: &[IdentityDataset]) -> Result<Self> {
        let mut out = IdentityDataset { samples: Vec::new(), triggers: Vec::new(), captions: Vec::new() };
        for p in parts {
            out.samples.extend(p.samples.iter().cloned());
            out.triggers.extend(&p.triggers);
            out.captions.extend(&p.captions);
        }
        if out.samples.is_empty() {
            return Err(Error::invalid("identity dataset is empty"));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct trigger ids in order of first appearance.
    pub fn concepts(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for &t in &self.triggers {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
        seen
    }

    /// Sample indices of each concept, aligned with [`Self::concepts`].
    pub fn groups(&self) -> Vec<Vec<usize>> {
        self.concepts().into_iter().map(|c| (0..self.len()).filter(|&i| self.triggers[i] == c).collect()).collect()
    }

    /// The base class of sample `i`: its caption, else the class its trigger
    /// was seeded from.
    pub fn class_of(&self, i: usize, conditions: &ConditionTable) -> Result<usize> {
        if let Some(c) = self.captions[i] {
            return Ok(c);
        }
        match conditions.kind(self.triggers[i])? {
            TokenKind::Trigger { base_class, .. } => Ok(*base_class),
            _ => Err(Error::invalid(format!("sample {i} has no caption class and a non-trigger token"))),
        }
    }

    pub fn validate(&self, conditions: &ConditionTable, data_dim: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("identity dataset is empty"));
        }
        if self.triggers.len() != self.len() || self.captions.len() != self.len() {
            return Err(Error::invalid("identity dataset columns differ in length"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != data_dim {
                return Err(Error::Shape {
                    node: format!("identity sample {i}"),
                    detail: format!("length {} vs data dim {data_dim}", s.len()),
                });
            }
            if !matches!(conditions.kind(self.triggers[i])?, TokenKind::Trigger { .. }) {
                return Err(Error::invalid(format!(
                    "sample {i}: token {} is not a registered trigger",
                    self.triggers[i]
                )));
            }
            if let Some(c) = self.captions[i] {
                conditions.class_token(c)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    /// The weighted auxiliary term: α·contrastive for CAT, weight·prior for
    /// prior preservation, zero otherwise.
    pub contrastive: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,total,recon,contrastive";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn recon(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.recon).collect()
    }

    /// Same values, ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.seed == other.seed && self.records == other.records
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.total, r.recon, r.contrastive);
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format("train log header".into()));
        }
        let mut records = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format(format!("train log row '{line}'")))
            };
            let step = f
                .first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("train log row '{line}'")))?;
            records.push(StepRecord { step, total: num(1)?, recon: num(2)?, contrastive: num(3)? });
        }
        Ok(TrainLog { seed, records, wall_clock_secs: 0.0 })
    }
}
