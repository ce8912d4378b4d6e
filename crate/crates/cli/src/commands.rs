use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gazesal::data::{self, DatasetPaths, Example, SplitPlan};
use gazesal::eval::{bootstrap_auc, render_table, write_report, CLASS_NAMES};
use gazesal::model::{load_checkpoint, save_checkpoint};
use gazesal::saliency::{generate, gradcam};
use gazesal::train::{fit_with, score_examples};
use gazesal::{BackwardRule, Error, Heatmap, HeatmapSource, UNetModel};

use crate::config::RunConfig;
use crate::render;
use crate::Failure;

type Outcome = Result<(), Failure>;

fn prepare(cfg: &RunConfig, out: &Path) -> Outcome {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.txt");
    std::fs::write(&path, cfg.render()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn data_dir(cfg: &RunConfig) -> Result<&Path, Failure> {
    cfg.data.as_deref().ok_or_else(|| Failure::Usage("no corpus given (--data or `data` in the config)".into()))
}

fn load(cfg: &RunConfig) -> Result<Vec<Example>, Failure> {
    Ok(data::load_dataset(&DatasetPaths::in_dir(data_dir(cfg)?), &cfg.data_config(), cfg.execution)?)
}

fn plan(cfg: &RunConfig, examples: &[Example]) -> Result<(SplitPlan, bool), Failure> {
    Ok(match &cfg.split {
        Some(p) => (SplitPlan::load(p)?, false),
        None => (data::grouped_split(examples, cfg.split_fractions, cfg.seed)?, true),
    })
}

fn checkpoint(cfg: &RunConfig) -> Result<UNetModel<f32>, Failure> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Failure::Usage("no checkpoint given (--checkpoint)".into()))?;
    Ok(load_checkpoint(path, cfg.image_size)?)
}

fn save_png(img: &image::RgbImage, path: PathBuf) -> Outcome {
    img.save(&path).map_err(|e| Failure::Runtime(Error::InvalidInput(format!("{}: {e}", path.display()))))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare(cfg, out)?;
    let examples = data::generate_synthetic(cfg.per_class, cfg.image_size, cfg.seed)?;
    data::save_dataset(&examples, out)?;
    println!("wrote {} examples ({} per class, {}x{}) to {}", examples.len(), cfg.per_class, cfg.image_size, cfg.image_size, out.display());
    Ok(())
}

pub fn render_gaze(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare(cfg, out)?;
    let examples = load(cfg)?;
    let mut files = 0;
    for ex in &examples {
        save_png(&render::heatmap_image(&ex.gaze_static), out.join(format!("{}_static.png", ex.image_id)))?;
        for (k, t) in ex.gaze_temporals.iter().enumerate() {
            save_png(&render::heatmap_image(t), out.join(format!("{}_t{k}.png", ex.image_id)))?;
        }
        files += 1 + ex.gaze_temporals.len();
    }
    println!("wrote {files} gaze heatmaps for {} images to {}", examples.len(), out.display());
    Ok(())
}

pub fn split(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare(cfg, out)?;
    let examples = load(cfg)?;
    let plan = data::grouped_split(&examples, cfg.split_fractions, cfg.seed)?;
    plan.save(out.join("split.json"))?;
    println!("train {}, val {}, test {} images -> {}", plan.train.len(), plan.val.len(), plan.test.len(), out.join("split.json").display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Outcome {
    let regime = cfg.regime().map_err(Failure::Usage)?;
    let train_cfg = cfg.train();
    train_cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let model = UNetModel::build(cfg.model()).map_err(|e| Failure::Usage(e.to_string()))?;
    prepare(cfg, out)?;
    let examples = load(cfg)?;
    let (plan, computed) = plan(cfg, &examples)?;
    if computed {
        plan.save(out.join("split.json"))?;
    }
    let [train, val, _] = plan.partition(&examples)?;
    println!("{regime}: {} train / {} val images, {} parameters", train.len(), val.len(), model.num_parameters());
    let fitted = fit_with(model, &train, &val, &regime, &train_cfg, &mut |m| {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  auc {:.3}  ncc {:.3}",
            m.epoch, m.train_loss, m.val_loss, m.val_auc_mean, m.val_ncc
        )
    })?;
    save_checkpoint(&fitted.model, out.join("model.ggt"))?;
    fitted.log.write_csv(out.join("metrics.csv"))?;
    let best = &fitted.log.epochs[fitted.log.best_epoch];
    println!("best epoch {} (val mean AUC {:.3}); wrote {}", best.epoch, best.val_auc_mean, out.join("model.ggt").display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, all: bool) -> Outcome {
    let model = checkpoint(cfg)?;
    prepare(cfg, out)?;
    let examples = load(cfg)?;
    let subset = if all { examples } else { plan(cfg, &examples)?.0.partition(&examples)?[2].clone() };
    let scored = score_examples(&model, &subset, cfg.execution)?;
    let report = bootstrap_auc(&scored, &cfg.bootstrap(), cfg.execution)?;
    let name = cfg.checkpoint.as_ref().and_then(|p| p.file_stem()).map_or("model".into(), |s| s.to_string_lossy().into_owned());
    write_report(out, &[(&name, &report)])?;
    let mut csv = String::from("image_id,label,score_normal,score_chf,score_pneumonia\n");
    for s in &scored {
        let _ = writeln!(csv, "{},{},{},{},{}", s.image_id, CLASS_NAMES[s.true_label], s.scores[0], s.scores[1], s.scores[2]);
    }
    let path = out.join("scores.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    print!("{}", render_table(&[(&name, &report)]));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainRule {
    Rule(BackwardRule),
    GradCam,
}

impl ExplainRule {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gradcam" | "grad-cam" => Ok(ExplainRule::GradCam),
            other => other.parse().map(ExplainRule::Rule).map_err(|e: Error| e.to_string()),
        }
    }
}

pub fn explain(cfg: &RunConfig, out: &Path, rule: ExplainRule, images: Option<Vec<String>>, limit: usize) -> Outcome {
    let model = checkpoint(cfg)?;
    prepare(cfg, out)?;
    let examples = load(cfg)?;
    let chosen: Vec<&Example> = match &images {
        Some(ids) => ids
            .iter()
            .map(|id| {
                examples
                    .iter()
                    .find(|e| &e.image_id == id)
                    .ok_or_else(|| Failure::Runtime(Error::InvalidInput(format!("no image `{id}` in the corpus"))))
            })
            .collect::<Result<_, _>>()?,
        None => examples.iter().take(limit).collect(),
    };
    for ex in chosen {
        let record = model.forward_one(&ex.input())?;
        let probs = record.class_probabilities();
        let class = (0..probs.len()).fold(0, |best, c| if probs[c] > probs[best] { c } else { best });
        let heat = match rule {
            ExplainRule::Rule(r) => generate(&model, &record, class, r)?,
            ExplainRule::GradCam => gradcam(&model, &record, class)?,
        };
        let mask = Heatmap { values: record.mask_probabilities(), source: HeatmapSource::DecoderMask };
        let panel = render::four_panel(&ex.image, &heat, &ex.gaze_static, &mask);
        save_png(&panel, out.join(format!("{}_explain.png", ex.image_id)))?;
        println!("{}: label {}, predicted {} ({:.3})", ex.image_id, ex.label, CLASS_NAMES[class], probs[class]);
    }
    Ok(())
}
