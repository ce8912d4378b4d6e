use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{evaluate_loss, FrozenSaliency};
use super::{Optimizer, Regime, TrainConfig};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::{class_aucs, mean_auc, overlap_metrics, ScoredExample};
use crate::exec::{self, Execution};
use crate::model::{Gradients, UNetModel, NUM_CLASSES};
use crate::saliency::{Heatmap, HeatmapSource};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_auc_mean,val_auc_normal,val_auc_chf,val_auc_pneumonia";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc_mean: f64,
    pub val_auc: [f64; NUM_CLASSES],
    /// Mean correlation between the decoder's probability mask and the
    /// static gaze map over validation.
    pub val_ncc: f64,
    pub val_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for m in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.epoch, m.train_loss, m.val_loss, m.val_auc_mean, m.val_auc[0], m.val_auc[1], m.val_auc[2]
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

pub struct FitOutput {
    /// Parameters from the epoch with the best validation mean AUC.
    pub model: UNetModel<f32>,
    pub log: TrainLog,
}

pub fn score_examples(model: &UNetModel<f32>, examples: &[Example], exec: Execution) -> Result<Vec<ScoredExample>> {
    exec::map(exec, examples, |_, ex| {
        let probs = model.classify(&ex.input())?;
        Ok(ScoredExample {
            image_id: ex.image_id.clone(),
            scores: probs.map(f64::from),
            true_label: ex.label.index(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub loss: f64,
    pub scored: Vec<ScoredExample>,
    pub ncc: f64,
    pub iou: f64,
}

impl SplitEval {
    pub fn aucs(&self) -> Result<[f64; NUM_CLASSES]> {
        class_aucs(&self.scored)
    }
}

/// Loss, scores and mask/gaze overlap of `model` on `examples`.
pub fn evaluate_split(model: &UNetModel<f32>, examples: &[Example], regime: &Regime, cfg: &TrainConfig) -> Result<SplitEval> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let per = exec::map(cfg.exec, examples, |_, ex| -> Result<_> {
        let rec = model.forward_one(&ex.input())?;
        let class = ex.label.index();
        let frozen = FrozenSaliency::capture(model, &rec, regime, class)?;
        let (loss, _) = evaluate_loss(model, &rec, &frozen, regime, cfg, class, &ex.gaze_static.values, false)?;
        let mask = Heatmap { values: rec.mask_probabilities(), source: HeatmapSource::DecoderMask };
        let overlap = overlap_metrics(&mask, &ex.gaze_static)?;
        let scored = ScoredExample {
            image_id: ex.image_id.clone(),
            scores: rec.class_probabilities().map(f64::from),
            true_label: class,
        };
        Ok((loss as f64, scored, overlap))
    });
    let n = examples.len() as f64;
    let (mut loss, mut ncc, mut iou, mut scored) = (0.0, 0.0, 0.0, Vec::with_capacity(examples.len()));
    for r in per {
        let (l, s, o) = r?;
        loss += l;
        ncc += o.ncc;
        iou += o.iou;
        scored.push(s);
    }
    Ok(SplitEval { loss: loss / n, scored, ncc: ncc / n, iou: iou / n })
}

fn example_gradient(model: &UNetModel<f32>, ex: &Example, regime: &Regime, cfg: &TrainConfig) -> Result<(f32, Gradients<f32>)> {
    let rec = model.forward_one(&ex.input())?;
    let class = ex.label.index();
    let frozen = FrozenSaliency::capture(model, &rec, regime, class)?;
    let (loss, grads) = evaluate_loss(model, &rec, &frozen, regime, cfg, class, &ex.gaze_static.values, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

pub fn fit(model: UNetModel<f32>, train: &[Example], val: &[Example], regime: &Regime, cfg: &TrainConfig) -> Result<FitOutput> {
    fit_with(model, train, val, regime, cfg, &mut |_| {})
}

/// [`fit`] with a callback after each logged epoch.
pub fn fit_with(
    mut model: UNetModel<f32>,
    train: &[Example],
    val: &[Example],
    regime: &Regime,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<FitOutput> {
    cfg.validate()?;
    regime.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let size = model.config().input_size;
    if let Some(ex) = train.iter().chain(val).find(|e| e.image.shape() != [size, size]) {
        return Err(Error::shape("fit", format!("{size}x{size} images"), format!("{:?} for {}", ex.image.shape(), ex.image_id)));
    }
    for c in 0..NUM_CLASSES {
        if !val.iter().any(|e| e.label.index() == c) {
            return Err(Error::InvalidInput(format!("validation split lacks class {}", crate::eval::CLASS_NAMES[c])));
        }
    }

    let mut log = TrainLog::default();
    let mut record = |epoch: usize, train_loss: f64, model: &UNetModel<f32>, log: &mut TrainLog| -> Result<f64> {
        let v = evaluate_split(model, val, regime, cfg)?;
        let aucs = v.aucs()?;
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_auc_mean: mean_auc(&aucs),
            val_auc: aucs,
            val_ncc: v.ncc,
            val_iou: v.iou,
        };
        on_epoch(&m);
        log.epochs.push(m);
        Ok(mean_auc(&aucs))
    };

    let initial_train = evaluate_split(&model, train, regime, cfg)?.loss;
    let mut best_auc = record(0, initial_train, &model, &mut log)?;
    let mut best = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = || Error::Diverged { epoch, batch };
            let results = exec::map(cfg.exec, idx, |_, &i| example_gradient(&model, &train[i], regime, cfg));
            let mut total = Gradients::zeros_like(&model);
            let mut batch_loss = 0.0f64;
            for r in results {
                let (loss, g) = r.map_err(|e| match e {
                    Error::NonFinite { .. } => diverged(),
                    e => e,
                })?;
                batch_loss += loss as f64;
                total.add_scaled(1.0, &g)?;
            }
            if !batch_loss.is_finite() || !total.all_finite() {
                return Err(diverged());
            }
            total.scale(1.0 / idx.len() as f32);
            opt.step(&mut model, &total)?;
            epoch_loss += batch_loss;
        }
        let auc = record(epoch, epoch_loss / train.len() as f64, &model, &mut log)?;
        if auc > best_auc {
            best_auc = auc;
            best = model.clone();
            log.best_epoch = epoch;
        }
    }
    Ok(FitOutput { model: best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Label};
    use crate::model::UNetConfig;
    use crate::ops::BackwardRule;

    fn corpus() -> (Vec<Example>, Vec<Example>) {
        let all = generate_synthetic(8, 16, 2).unwrap();
        let (val, train): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 4 == 0);
        let strip = |v: Vec<(usize, Example)>| v.into_iter().map(|(_, e)| e).collect::<Vec<_>>();
        (strip(train), strip(val))
    }

    fn small() -> UNetModel<f32> {
        UNetModel::build(UNetConfig { input_size: 16, encoder_channels: vec![4, 8], seed: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (train, val) = corpus();
        let m = small();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.0, ..Default::default() };
        let out = fit(m.clone(), &train, &val, &Regime::Combined { rule: BackwardRule::Guided, alpha: 0.5 }, &cfg).unwrap();
        assert_eq!(out.model.flat_params(), m.flat_params());
        assert_eq!(out.log.epochs.len(), 3);
    }

    #[test]
    fn same_seed_same_log_across_execution_modes() {
        let (train, val) = corpus();
        let regime = Regime::SalVsGaze { rule: BackwardRule::Deconvnet };
        let cfg = TrainConfig { epochs: 2, batch_size: 5, learning_rate: 1e-2, exec: Execution::Serial, ..Default::default() };
        let a = fit(small(), &train, &val, &regime, &cfg).unwrap();
        let b = fit(small(), &train, &val, &regime, &cfg).unwrap();
        let c = fit(small(), &train, &val, &regime, &TrainConfig { exec: Execution::Parallel, ..cfg.clone() }).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log, c.log);
        assert_eq!(a.model.flat_params(), c.model.flat_params());
        let csv = a.log.to_csv();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn huge_learning_rate_diverges_with_location() {
        let (train, val) = corpus();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 1e30, optimizer: crate::train::OptimizerKind::Sgd, ..Default::default() };
        match fit(small(), &train, &val, &Regime::MaskVsGaze, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn rejects_validation_without_every_class() {
        let (train, val) = corpus();
        let val: Vec<Example> = val.into_iter().filter(|e| e.label != Label::Chf).collect();
        assert!(fit(small(), &train, &val, &Regime::ClsOnly, &TrainConfig::default()).is_err());
    }
}
