//! Synthetic chest-film stand-ins with blob-anchored gaze.
//!
//! Every image has uniform background noise with a per-image ceiling in
//! [0.15, 0.3]. CHF adds one wide bright Gaussian blob left of centre;
//! pneumonia adds one or two checkerboard-textured discs in the lung fields;
//! normal adds nothing. Fixations scatter around the findings (the image
//! centre for normal).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Example, Label};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gaze::{render_gaze, FixationRecord, GazeRenderConfig};
use crate::tensor::Tensor;

/// Blob width for CHF as a fraction of the image side.
pub const CHF_SIGMA_FRAC: f64 = 0.12;
/// Fixation scatter around an anchor, as a fraction of the image side.
pub const FIXATION_SCATTER: f64 = 0.04;

/// Ground truth behind one synthetic example.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// Normalized `(x, y)` centres of the findings; empty for normal.
    pub anchors: Vec<(f64, f64)>,
}

pub fn generate_synthetic(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<Example>> {
    Ok(generate_synthetic_annotated(n_per_class, size, seed)?.into_iter().map(|(e, _)| e).collect())
}

pub fn generate_synthetic_annotated(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<(Example, SynthTruth)>> {
    if n_per_class == 0 || size < 8 {
        return Err(Error::InvalidInput(format!("synthetic corpus needs n_per_class >= 1 and size >= 8, got {n_per_class}, {size}")));
    }
    let mut labels: Vec<Label> = Label::ALL.iter().flat_map(|&l| std::iter::repeat_n(l, n_per_class)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let gaze_cfg = GazeRenderConfig::with_size(size);
    exec::map(Execution::default(), &labels, |i, &label| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        synth_one(i, label, size, &gaze_cfg, &mut rng)
    })
    .into_iter()
    .collect()
}

fn synth_one(i: usize, label: Label, size: usize, gaze_cfg: &GazeRenderConfig, rng: &mut ChaCha8Rng) -> Result<(Example, SynthTruth)> {
    let s = size as f64;
    let ceiling = rng.random_range(0.15..=0.3);
    let mut px: Vec<f32> = (0..size * size).map(|_| rng.random_range(0.0..=ceiling) as f32).collect();
    let mut anchors = Vec::new();
    match label {
        Label::Normal => {}
        Label::Chf => {
            let (cx, cy) = (rng.random_range(0.35..0.48), rng.random_range(0.45..0.62));
            let amp = rng.random_range(0.5..0.7);
            let sigma = CHF_SIGMA_FRAC * s;
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx * s, y as f64 + 0.5 - cy * s);
                    px[y * size + x] += (amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()) as f32;
                }
            }
            anchors.push((cx, cy));
        }
        Label::Pneumonia => {
            let left_first = rng.random_bool(0.5);
            let count = rng.random_range(1..=2);
            for k in 0..count {
                let left = left_first ^ (k == 1);
                let cx = if left { rng.random_range(0.18..0.32) } else { rng.random_range(0.68..0.82) };
                let cy = rng.random_range(0.3..0.7);
                let r = rng.random_range(0.06..0.09) * s;
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 + 0.5 - cx * s, y as f64 + 0.5 - cy * s);
                        if dx * dx + dy * dy <= r * r && (x / 2 + y / 2) % 2 == 0 {
                            px[y * size + x] += 0.45;
                        }
                    }
                }
                anchors.push((cx, cy));
            }
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let image_id = format!("syn{i:05}");
    let patient_id = format!("pat{:05}", i / 2);
    let scatter = Normal::new(0.0, FIXATION_SCATTER).expect("positive scatter");
    let n_fix = rng.random_range(5..=10);
    let mut start = 0.0;
    let fixations: Vec<FixationRecord> = (0..n_fix)
        .map(|_| {
            let (ax, ay) = if anchors.is_empty() { (0.5, 0.5) } else { anchors[rng.random_range(0..anchors.len())] };
            let duration_ms = rng.random_range(100.0..=600.0);
            let f = FixationRecord {
                image_id: image_id.clone(),
                patient_id: patient_id.clone(),
                x_norm: (ax + scatter.sample(rng)).clamp(0.0, 1.0),
                y_norm: (ay + scatter.sample(rng)).clamp(0.0, 1.0),
                start_ms: start,
                duration_ms,
            };
            start += duration_ms;
            f
        })
        .collect();
    let maps = render_gaze(&fixations, gaze_cfg)?;
    let example = Example {
        image_id,
        patient_id,
        image: Tensor::new([size, size], px)?,
        label,
        gaze_static: maps.static_map,
        gaze_temporals: maps.temporals,
        fixations,
    };
    Ok((example, SynthTruth { anchors }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auc;

    #[test]
    fn balanced_and_deterministic() {
        let a = generate_synthetic(20, 32, 5).unwrap();
        assert_eq!(a.len(), 60);
        for l in Label::ALL {
            assert_eq!(a.iter().filter(|e| e.label == l).count(), 20);
        }
        assert_eq!(a, generate_synthetic(20, 32, 5).unwrap());
        assert_ne!(a, generate_synthetic(20, 32, 6).unwrap());
        assert!(a.iter().all(|e| e.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(a.iter().all(|e| (5..=10).contains(&e.fixations.len())));
        assert_eq!(a[0].patient_id, a[1].patient_id);
        assert!(generate_synthetic(0, 32, 5).is_err());
    }

    #[test]
    fn chf_gaze_peaks_near_blob() {
        let size = 64;
        let sigma = CHF_SIGMA_FRAC * size as f64;
        for (ex, truth) in generate_synthetic_annotated(40, size, 1).unwrap() {
            if ex.label != Label::Chf {
                continue;
            }
            let i = ex.gaze_static.values.argmax();
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let (cx, cy) = (truth.anchors[0].0 * size as f64, truth.anchors[0].1 * size as f64);
            assert!(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() <= 3.0 * sigma);
        }
    }

    #[test]
    fn mean_intensity_does_not_find_pneumonia() {
        let ex = generate_synthetic(200, 128, 0).unwrap();
        let scores: Vec<f64> = ex.iter().map(|e| e.image.sum() as f64).collect();
        let pos: Vec<bool> = ex.iter().map(|e| e.label == Label::Pneumonia).collect();
        let a = auc(&scores, &pos).unwrap();
        assert!(a < 0.8, "mean-intensity AUC {a}");
    }
}
