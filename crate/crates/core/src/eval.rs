//! ROC-AUC with bootstrap percentile intervals, and heatmap overlap metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::NUM_CLASSES;
use crate::saliency::Heatmap;
use crate::tensor::Scalar;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "CHF", "pneumonia"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub image_id: String,
    /// Per-class sigmoid scores.
    pub scores: [f64; NUM_CLASSES],
    pub true_label: usize,
}

impl ScoredExample {
    fn validate(&self) -> Result<()> {
        if self.true_label >= NUM_CLASSES {
            return Err(Error::InvalidInput(format!("{}: label index {}", self.image_id, self.true_label)));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { location: format!("scores of {}", self.image_id) });
        }
        Ok(())
    }
}

/// Mann-Whitney AUC: `(concordant + ties / 2) / (P · N)`.
pub fn auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape("auc", scores.len(), positives.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { location: "auc scores".into() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut concordant, mut ties, mut neg_below) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                pos += 1
            } else {
                neg += 1
            }
            j += 1;
        }
        concordant += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        i = j;
    }
    let p = positives.iter().filter(|&&p| p).count() as u128;
    let n = positives.len() as u128 - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc(format!("{p} positives and {n} negatives")));
    }
    Ok((2 * concordant + ties) as f64 / (2 * p * n) as f64)
}

/// One-vs-rest AUC for each class.
pub fn class_aucs(examples: &[ScoredExample]) -> Result<[f64; NUM_CLASSES]> {
    let mut out = [0.0; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let scores: Vec<f64> = examples.iter().map(|e| e.scores[c]).collect();
        let pos: Vec<bool> = examples.iter().map(|e| e.true_label == c).collect();
        *slot = auc(&scores, &pos).map_err(|e| match e {
            Error::UndefinedAuc(m) => Error::UndefinedAuc(format!("class {}: {m}", CLASS_NAMES[c])),
            e => e,
        })?;
    }
    Ok(out)
}

pub fn mean_auc(aucs: &[f64; NUM_CLASSES]) -> f64 {
    aucs.iter().sum::<f64>() / NUM_CLASSES as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    /// Defaults to the number of examples.
    pub resample_size: Option<usize>,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { iterations: 30, resample_size: None, seed: 0, max_retries: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub p50: f64,
    pub p2_5: f64,
    pub p97_5: f64,
}

impl Interval {
    pub fn constant(v: f64) -> Self {
        Interval { p50: v, p2_5: v, p97_5: v }
    }

    /// `0.872 (0.840, 0.897)`
    pub fn cell(&self) -> String {
        format!("{:.3} ({:.3}, {:.3})", self.p50, self.p2_5, self.p97_5)
    }

    fn from_samples(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Interval {
            p50: percentile(&values, 0.5),
            p2_5: percentile(&values, 0.025),
            p97_5: percentile(&values, 0.975),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub mean: Interval,
    /// Ordered normal, CHF, pneumonia.
    pub per_class: [Interval; NUM_CLASSES],
    pub n_iterations: usize,
    pub resample_size: usize,
    pub seed: u64,
}

/// Linear interpolation between closest ranks at `q · (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let (a, b) = (sorted[lo], sorted[hi]);
    (a + (pos - lo as f64) * (b - a)).clamp(a, b)
}

pub fn bootstrap_auc(examples: &[ScoredExample], cfg: &BootstrapConfig, exec: Execution) -> Result<AucReport> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("bootstrap needs at least one iteration".into()));
    }
    for e in examples {
        e.validate()?;
    }
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        if !examples.iter().any(|e| e.true_label == c) {
            return Err(Error::InvalidInput(format!("class {name} absent from the test set")));
        }
    }
    let m = cfg.resample_size.unwrap_or(examples.len());
    let draws = exec::map_range(exec, cfg.iterations, |it| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64);
        for _ in 0..=cfg.max_retries {
            let sample: Vec<ScoredExample> =
                (0..m).map(|_| examples[rng.random_range(0..examples.len())].clone()).collect();
            match class_aucs(&sample) {
                Ok(a) => return Ok(a),
                Err(Error::UndefinedAuc(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::UndefinedAuc(format!("iteration {it}: no defined resample in {} tries", cfg.max_retries + 1)))
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>>>()?;
    let column = |f: &dyn Fn(&[f64; NUM_CLASSES]) -> f64| Interval::from_samples(draws.iter().map(f).collect());
    Ok(AucReport {
        mean: column(&mean_auc),
        per_class: [column(&|a| a[0]), column(&|a| a[1]), column(&|a| a[2])],
        n_iterations: cfg.iterations,
        resample_size: m,
        seed: cfg.seed,
    })
}

/// Aligned text table, one row per named report.
pub fn render_table(rows: &[(&str, &AucReport)]) -> String {
    let header = ["mean", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2]];
    let name_w = rows.iter().map(|(n, _)| n.len()).chain(["model".len()]).max().unwrap_or(5);
    let cell_w = 20;
    let mut s = format!("{:<name_w$}", "model");
    for h in header {
        let _ = write!(s, "  {h:<cell_w$}");
    }
    s = s.trim_end().to_owned();
    s.push('\n');
    for (name, r) in rows {
        let mut line = format!("{name:<name_w$}");
        for iv in std::iter::once(&r.mean).chain(&r.per_class) {
            let _ = write!(line, "  {:<cell_w$}", iv.cell());
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    if let Some((_, r)) = rows.first() {
        let _ = writeln!(s, "({} iterations, resample size {}, seed {})", r.n_iterations, r.resample_size, r.seed);
    }
    s
}

pub fn render_report(report: &AucReport) -> String {
    render_table(&[("auc", report)])
}

pub fn report_csv(rows: &[(&str, &AucReport)]) -> String {
    let mut s = String::from("model,quantity,p50,p2_5,p97_5\n");
    for (name, r) in rows {
        let quantities = std::iter::once(("mean", &r.mean)).chain(CLASS_NAMES.iter().copied().zip(&r.per_class));
        for (q, iv) in quantities {
            let _ = writeln!(s, "{name},{q},{},{},{}", iv.p50, iv.p2_5, iv.p97_5);
        }
    }
    s
}

pub fn write_report(dir: impl AsRef<Path>, rows: &[(&str, &AucReport)]) -> Result<()> {
    let dir = dir.as_ref();
    let txt = dir.join("report.txt");
    std::fs::write(&txt, render_table(rows)).map_err(|e| Error::io(&txt, e))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report_csv(rows)).map_err(|e| Error::io(&csv, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub iou: f64,
    pub ncc: f64,
}

pub fn iou_at<T: Scalar>(a: &Heatmap<T>, b: &Heatmap<T>, tau: f64) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape("overlap", format!("{:?}", a.values.shape()), format!("{:?}", b.values.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values.data().iter().zip(b.values.data()) {
        let (p, q) = (x.as_f64() >= tau, y.as_f64() >= tau);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pearson correlation of the flattened maps; 0 when either is constant.
pub fn ncc<T: Scalar>(a: &Heatmap<T>, b: &Heatmap<T>) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape("overlap", format!("{:?}", a.values.shape()), format!("{:?}", b.values.shape())));
    }
    let n = a.values.len() as f64;
    let xs = a.values.data().iter().map(|v| v.as_f64());
    let ys = b.values.data().iter().map(|v| v.as_f64());
    let (ma, mb) = (xs.clone().sum::<f64>() / n, ys.clone().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in xs.zip(ys) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn overlap_metrics<T: Scalar>(a: &Heatmap<T>, b: &Heatmap<T>) -> Result<Overlap> {
    Ok(Overlap { iou: iou_at(a, b, 0.5)?, ncc: ncc(a, b)? })
}
