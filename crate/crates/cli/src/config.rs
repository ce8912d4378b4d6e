//! Flat `key = value` run configuration. Lines starting with `#` are
//! comments; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gazesal::data::DataConfig;
use gazesal::eval::BootstrapConfig;
use gazesal::model::UNetConfig;
use gazesal::train::{OptimizerKind, Regime, TrainConfig};
use gazesal::{BackwardRule, Execution};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Every random choice (synthesis, split, init, shuffling, bootstrap)
    /// derives from this.
    pub seed: u64,
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    pub regime: String,
    pub rule: Option<BackwardRule>,
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub optimizer: OptimizerKind,
    pub sigma_frac: f64,
    pub window_ms: f64,
    pub bootstrap_iterations: usize,
    pub per_class: usize,
    pub split_fractions: [f64; 3],
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let data = DataConfig::default();
        RunConfig {
            data: None,
            split: None,
            checkpoint: None,
            seed: 0,
            image_size: data.image_size,
            encoder_channels: UNetConfig::default().encoder_channels,
            regime: "cls-only".into(),
            rule: None,
            alpha: None,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            lambda_cls: train.lambda_cls,
            lambda_seg: train.lambda_seg,
            optimizer: train.optimizer,
            sigma_frac: data.sigma_frac,
            window_ms: data.window_ms,
            bootstrap_iterations: BootstrapConfig::default().iterations,
            per_class: 200,
            split_fractions: gazesal::data::DEFAULT_FRACTIONS,
            execution: Execution::default(),
        }
    }
}

pub const KEYS: [&str; 21] = [
    "data",
    "split",
    "checkpoint",
    "seed",
    "image_size",
    "encoder_channels",
    "regime",
    "rule",
    "alpha",
    "epochs",
    "batch_size",
    "learning_rate",
    "lambda_cls",
    "lambda_seg",
    "optimizer",
    "sigma_frac",
    "window_ms",
    "bootstrap_iterations",
    "per_class",
    "split_fractions",
    "execution",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "none" => None,
        v => Some(v),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = optional(v).map(PathBuf::from),
            "split" => self.split = optional(v).map(PathBuf::from),
            "checkpoint" => self.checkpoint = optional(v).map(PathBuf::from),
            "seed" => self.seed = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "encoder_channels" => self.encoder_channels = list(key, v)?,
            "regime" => self.regime = v.to_owned(),
            "rule" => self.rule = optional(v).map(str::parse::<BackwardRule>).transpose().map_err(|e| e.to_string())?,
            "alpha" => self.alpha = optional(v).map(|a| num(key, a)).transpose()?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "lambda_cls" => self.lambda_cls = num(key, v)?,
            "lambda_seg" => self.lambda_seg = num(key, v)?,
            "optimizer" => self.optimizer = v.parse().map_err(|e: gazesal::Error| e.to_string())?,
            "sigma_frac" => self.sigma_frac = num(key, v)?,
            "window_ms" => self.window_ms = num(key, v)?,
            "bootstrap_iterations" => self.bootstrap_iterations = num(key, v)?,
            "per_class" => self.per_class = num(key, v)?,
            "split_fractions" => {
                self.split_fractions = list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| "split_fractions: expected three values".to_owned())?
            }
            "execution" => {
                self.execution = match v {
                    "parallel" => Execution::Parallel,
                    "serial" => Execution::Serial,
                    _ => return Err(format!("execution: expected parallel or serial, got `{v}`")),
                }
            }
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("{source}:{}: expected key = value", n + 1))?;
            cfg.set(k, v).map_err(|e| format!("{source}:{}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn value(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".into(), |p| p.display().to_string());
        let join = |v: &[String]| v.join(",");
        match key {
            "data" => path(&self.data),
            "split" => path(&self.split),
            "checkpoint" => path(&self.checkpoint),
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "encoder_channels" => join(&self.encoder_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>()),
            "regime" => self.regime.clone(),
            "rule" => self.rule.map_or("none".into(), |r| r.to_string()),
            "alpha" => self.alpha.map_or("none".into(), |a| a.to_string()),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lambda_cls" => self.lambda_cls.to_string(),
            "lambda_seg" => self.lambda_seg.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "sigma_frac" => self.sigma_frac.to_string(),
            "window_ms" => self.window_ms.to_string(),
            "bootstrap_iterations" => self.bootstrap_iterations.to_string(),
            "per_class" => self.per_class.to_string(),
            "split_fractions" => join(&self.split_fractions.iter().map(|f| f.to_string()).collect::<Vec<_>>()),
            "execution" => if self.execution.is_parallel() { "parallel" } else { "serial" }.into(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// The resolved configuration in the same `key = value` form it is read from.
    pub fn render(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        s
    }

    pub fn regime(&self) -> Result<Regime, String> {
        Regime::from_parts(&self.regime, self.rule, self.alpha).map_err(|e| e.to_string())
    }

    pub fn model(&self) -> UNetConfig {
        UNetConfig {
            input_size: self.image_size,
            encoder_channels: self.encoder_channels.clone(),
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda_cls: self.lambda_cls,
            lambda_seg: self.lambda_seg,
            seed: self.seed,
            optimizer: self.optimizer,
            exec: self.execution,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { image_size: self.image_size, sigma_frac: self.sigma_frac, window_ms: self.window_ms }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig { iterations: self.bootstrap_iterations, seed: self.seed, ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.set("regime", "combined").unwrap();
        cfg.set("rule", "guided").unwrap();
        cfg.set("alpha", "0.25").unwrap();
        cfg.set("encoder_channels", "4, 8").unwrap();
        cfg.set("data", "/tmp/x").unwrap();
        cfg.set("execution", "serial").unwrap();
        cfg.set("learning_rate", "0.003").unwrap();
        assert_eq!(RunConfig::parse(&cfg.render(), "echo").unwrap(), cfg);
        assert_eq!(cfg.regime().unwrap(), Regime::Combined { rule: BackwardRule::Guided, alpha: 0.25 });
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("colour = red\n", "f").unwrap_err().contains("unknown config key"));
        assert!(RunConfig::parse("epochs = many\n", "f").is_err());
        assert!(RunConfig::parse("just words\n", "f").is_err());
        assert!(RunConfig::parse("# comment\n\nseed = 4\n", "f").unwrap().seed == 4);
    }
}
