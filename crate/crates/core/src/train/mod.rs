//! Loss regimes, optimizers and the training loop.

mod fit;
mod loss;
mod optim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ops::BackwardRule;

pub use fit::{evaluate_split, fit, fit_with, score_examples, EpochMetrics, FitOutput, SplitEval, TrainLog, METRICS_HEADER};
pub use loss::{
    bce_with_logits, bce_with_logits_grad, evaluate_loss, segmentation_loss, total_loss, FrozenSaliency,
};
pub use optim::{Optimizer, OptimizerKind};

/// How the classification and segmentation losses are wired.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Regime {
    /// Classification head only.
    ClsOnly,
    /// Decoder mask against the static gaze map.
    MaskVsGaze,
    /// Generator heatmap against the static gaze map, through the saliency graph.
    SalVsGaze { rule: BackwardRule },
    /// Decoder mask against the (gradient-stopped) generator heatmap.
    MaskVsSal { rule: BackwardRule },
    /// `alpha · SalVsGaze + (1 - alpha) · MaskVsGaze`.
    Combined { rule: BackwardRule, alpha: f64 },
}

impl Regime {
    pub const NAMES: [&'static str; 5] = ["cls-only", "mask-vs-gaze", "sal-vs-gaze", "mask-vs-sal", "combined"];

    /// Builds a regime from its name plus the optional rule and alpha.
    pub fn from_parts(name: &str, rule: Option<BackwardRule>, alpha: Option<f64>) -> Result<Regime> {
        let needs_rule = |rule: Option<BackwardRule>| {
            rule.ok_or_else(|| Error::InvalidConfig(format!("regime {name} needs a generator rule")))
        };
        let regime = match name.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "cls-only" | "clsonly" => Regime::ClsOnly,
            "mask-vs-gaze" | "maskvsgaze" | "baseline" => Regime::MaskVsGaze,
            "sal-vs-gaze" | "salvsgaze" => Regime::SalVsGaze { rule: needs_rule(rule)? },
            "mask-vs-sal" | "maskvssal" => Regime::MaskVsSal { rule: needs_rule(rule)? },
            "combined" => Regime::Combined { rule: needs_rule(rule)?, alpha: alpha.unwrap_or(0.5) },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown regime `{other}` (expected one of {})",
                    Regime::NAMES.join(", ")
                )))
            }
        };
        if alpha.is_some() && !matches!(regime, Regime::Combined { .. }) {
            return Err(Error::InvalidConfig(format!("alpha only applies to the combined regime, not {name}")));
        }
        if rule.is_some() && matches!(regime, Regime::ClsOnly | Regime::MaskVsGaze) {
            return Err(Error::InvalidConfig(format!("regime {name} takes no generator rule")));
        }
        regime.validate()?;
        Ok(regime)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::ClsOnly => "cls-only",
            Regime::MaskVsGaze => "mask-vs-gaze",
            Regime::SalVsGaze { .. } => "sal-vs-gaze",
            Regime::MaskVsSal { .. } => "mask-vs-sal",
            Regime::Combined { .. } => "combined",
        }
    }

    pub fn rule(&self) -> Option<BackwardRule> {
        match *self {
            Regime::SalVsGaze { rule } | Regime::MaskVsSal { rule } | Regime::Combined { rule, .. } => Some(rule),
            _ => None,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            Regime::Combined { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rule) = self.rule() {
            if rule == BackwardRule::Backprop {
                return Err(Error::InvalidConfig(format!("regime {} needs the deconvnet or guided rule", self.name())));
            }
        }
        if let Some(alpha) = self.alpha() {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        if let Some(rule) = self.rule() {
            write!(f, " ({rule}")?;
            if let Some(alpha) = self.alpha() {
                write!(f, ", alpha {alpha}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl FromStr for Regime {
    type Err = Error;

    /// Parses `name`, `name:rule` or `combined:rule:alpha`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let rule = parts.next().map(str::parse::<BackwardRule>).transpose()?;
        let alpha = parts
            .next()
            .map(|a| a.trim().parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad alpha `{a}`"))))
            .transpose()?;
        Regime::from_parts(name, rule, alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda_cls: 1.0,
            lambda_seg: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// Rates may be zero (a zero learning rate freezes the model) but not
    /// negative.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("lambda_cls", self.lambda_cls), ("lambda_seg", self.lambda_seg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}
