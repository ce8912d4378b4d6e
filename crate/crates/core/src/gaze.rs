//! Temporal and static eye-gaze heatmaps from fixation records.
//!
//! Each fixation contributes `duration_ms · exp(-d² / 2σ²)` around its
//! position, truncated at 4σ. Fixations are bucketed into consecutive
//! windows by start time; the static map is the pixelwise sum of all window
//! accumulations.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{normalize, Heatmap, HeatmapSource};
use crate::tensor::Tensor;

pub const FIXATION_COLUMNS: [&str; 6] = ["image_id", "patient_id", "x_norm", "y_norm", "start_ms", "duration_ms"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub image_id: String,
    pub patient_id: String,
    /// Fraction of image width.
    pub x_norm: f64,
    /// Fraction of image height.
    pub y_norm: f64,
    pub start_ms: f64,
    pub duration_ms: f64,
}

impl FixationRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("x_norm", self.x_norm), ("y_norm", self.y_norm)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("start_ms", self.start_ms), ("duration_ms", self.duration_ms)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} = {v} must be a finite non-negative value")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeRenderConfig {
    /// Gaussian σ as a fraction of the output width.
    pub sigma_frac: f64,
    pub window_ms: f64,
    /// `(height, width)`.
    pub output_size: (usize, usize),
}

impl Default for GazeRenderConfig {
    fn default() -> Self {
        GazeRenderConfig { sigma_frac: 0.05, window_ms: 1000.0, output_size: (128, 128) }
    }
}

impl GazeRenderConfig {
    pub fn with_size(size: usize) -> Self {
        GazeRenderConfig { output_size: (size, size), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_frac > 0.0) || !(self.window_ms > 0.0) {
            return Err(Error::InvalidConfig("sigma_frac and window_ms must be positive".into()));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::InvalidConfig("output size must be positive".into()));
        }
        Ok(())
    }
}

fn splat(map: &mut [f64], (h, w): (usize, usize), sigma: f64, f: &FixationRecord) {
    let cx = f.x_norm * w as f64;
    let cy = f.y_norm * h as f64;
    let radius = 4.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    // pixel j covers [j, j+1) with centre j + 0.5
    let lo = |c: f64| ((c - radius - 0.5).ceil().max(0.0)) as usize;
    let hi = |c: f64, n: usize| (((c + radius - 0.5).floor()) as isize).clamp(-1, n as isize - 1);
    let (y1, x1) = (hi(cy, h), hi(cx, w));
    if y1 < 0 || x1 < 0 {
        return;
    }
    for y in lo(cy)..=y1 as usize {
        let dy = y as f64 + 0.5 - cy;
        for x in lo(cx)..=x1 as usize {
            let dx = x as f64 + 0.5 - cx;
            let d2 = dx * dx + dy * dy;
            if d2 <= radius * radius {
                map[y * w + x] += f.duration_ms * (-d2 * inv).exp();
            }
        }
    }
}

/// Un-normalized per-window accumulations, in window order, with trailing
/// empty windows dropped.
pub fn accumulate_temporal(records: &[FixationRecord], cfg: &GazeRenderConfig) -> Result<Vec<Tensor<f64>>> {
    cfg.validate()?;
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let mut windows: Vec<Vec<&FixationRecord>> = Vec::new();
    for r in records {
        if r.image_id != first.image_id {
            return Err(Error::InvalidInput(format!(
                "fixations for `{}` and `{}` mixed in one render",
                first.image_id, r.image_id
            )));
        }
        r.validate()?;
        let idx = (r.start_ms / cfg.window_ms).floor() as usize;
        if windows.len() <= idx {
            windows.resize_with(idx + 1, Vec::new);
        }
        windows[idx].push(r);
    }
    let (h, w) = cfg.output_size;
    let sigma = cfg.sigma_frac * w as f64;
    windows
        .into_iter()
        .map(|mut bucket| {
            // fixed summation order makes the result independent of input order
            bucket.sort_by(|a, b| {
                (a.start_ms, a.x_norm, a.y_norm, a.duration_ms)
                    .partial_cmp(&(b.start_ms, b.x_norm, b.y_norm, b.duration_ms))
                    .expect("validated finite")
            });
            let mut map = vec![0.0; h * w];
            for f in bucket {
                splat(&mut map, (h, w), sigma, f);
            }
            Tensor::new([h, w], map)
        })
        .collect()
}

pub fn render_temporal(records: &[FixationRecord], cfg: &GazeRenderConfig) -> Result<Vec<Heatmap<f32>>> {
    accumulate_temporal(records, cfg)?
        .iter()
        .map(|t| Ok(normalize(t, HeatmapSource::Gaze)?.cast()))
        .collect()
}

/// Pixelwise sum of un-normalized temporal accumulations.
pub fn static_accumulation(temporals: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = temporals
        .first()
        .ok_or_else(|| Error::InvalidInput("static map needs at least one temporal map".into()))?;
    let mut sum = Tensor::zeros(first.shape());
    for t in temporals {
        sum.axpy(1.0, t).map_err(|_| {
            Error::InvalidInput(format!("temporal maps have mixed extents {:?} and {:?}", first.shape(), t.shape()))
        })?;
    }
    Ok(sum)
}

pub fn render_static(temporals: &[Tensor<f64>]) -> Result<Heatmap<f32>> {
    Ok(normalize(&static_accumulation(temporals)?, HeatmapSource::Gaze)?.cast())
}

/// Static and temporal maps for one image; no fixations gives an all-zero
/// static map and no temporals.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeMaps {
    pub static_map: Heatmap<f32>,
    pub temporals: Vec<Heatmap<f32>>,
}

pub fn render_gaze(records: &[FixationRecord], cfg: &GazeRenderConfig) -> Result<GazeMaps> {
    let raw = accumulate_temporal(records, cfg)?;
    if raw.is_empty() {
        let (h, w) = cfg.output_size;
        return Ok(GazeMaps { static_map: Heatmap::zeros(h, w, HeatmapSource::Gaze), temporals: Vec::new() });
    }
    let temporals = raw
        .iter()
        .map(|t| Ok(normalize(t, HeatmapSource::Gaze)?.cast()))
        .collect::<Result<_>>()?;
    Ok(GazeMaps { static_map: render_static(&raw)?, temporals })
}

pub fn read_fixations<R: Read>(reader: R, source: &str) -> Result<Vec<FixationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(FIXATION_COLUMNS) {
        *slot = headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            path: source.to_owned(),
            row: 1,
            column: name.to_owned(),
            message: "missing column".into(),
        })?;
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            rec.get(cols[i]).map(str::trim).ok_or_else(|| Error::Parse {
                path: source.to_owned(),
                row,
                column: FIXATION_COLUMNS[i].to_owned(),
                message: "missing field".into(),
            })
        };
        let number = |i: usize, range: Option<(f64, f64)>| -> Result<f64> {
            let text = field(i)?;
            let err = |message: String| Error::Parse {
                path: source.to_owned(),
                row,
                column: FIXATION_COLUMNS[i].to_owned(),
                message,
            };
            let v: f64 = text.parse().map_err(|_| err(format!("`{text}` is not a number")))?;
            match range {
                Some((lo, hi)) if !(lo..=hi).contains(&v) => Err(err(format!("{v} outside [{lo}, {hi}]"))),
                None if !(v >= 0.0 && v.is_finite()) => Err(err(format!("{v} must be finite and non-negative"))),
                _ => Ok(v),
            }
        };
        out.push(FixationRecord {
            image_id: field(0)?.to_owned(),
            patient_id: field(1)?.to_owned(),
            x_norm: number(2, Some((0.0, 1.0)))?,
            y_norm: number(3, Some((0.0, 1.0)))?,
            start_ms: number(4, None)?,
            duration_ms: number(5, None)?,
        });
    }
    Ok(out)
}

pub fn parse_fixations(path: impl AsRef<Path>) -> Result<Vec<FixationRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_fixations(file, &path.display().to_string())
}

pub fn write_fixations_to<W: Write>(writer: W, records: &[FixationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FIXATION_COLUMNS)?;
    for r in records {
        w.write_record([
            r.image_id.clone(),
            r.patient_id.clone(),
            r.x_norm.to_string(),
            r.y_norm.to_string(),
            r.start_ms.to_string(),
            r.duration_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<fixations>", e))?;
    Ok(())
}

pub fn write_fixations(path: impl AsRef<Path>, records: &[FixationRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_fixations_to(file, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fix(x: f64, y: f64, start: f64, dur: f64) -> FixationRecord {
        FixationRecord { image_id: "img".into(), patient_id: "p".into(), x_norm: x, y_norm: y, start_ms: start, duration_ms: dur }
    }

    #[test]
    fn single_fixation_peaks_at_centre() {
        let cfg = GazeRenderConfig { output_size: (65, 65), ..Default::default() };
        let maps = render_temporal(&[fix(32.5 / 65.0, 32.5 / 65.0, 0.0, 300.0)], &cfg).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].values.argmax(), 32 * 65 + 32);
        assert_eq!(maps[0].values.data()[32 * 65 + 32], 1.0);
        // even grid: the peak sits on the central 2x2 block
        let maps = render_temporal(&[fix(0.5, 0.5, 0.0, 300.0)], &GazeRenderConfig::with_size(64)).unwrap();
        let i = maps[0].values.argmax();
        assert!([31, 32].contains(&(i / 64)) && [31, 32].contains(&(i % 64)));
    }

    #[test]
    fn mirrored_fixations_give_symmetric_map() {
        let cfg = GazeRenderConfig::with_size(40);
        let maps = render_temporal(&[fix(0.3, 0.4, 0.0, 200.0), fix(0.7, 0.4, 100.0, 200.0)], &cfg).unwrap();
        let v = maps[0].values.data();
        for y in 0..40 {
            for x in 0..40 {
                assert!((v[y * 40 + x] - v[y * 40 + 39 - x]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn window_bucketing() {
        let cfg = GazeRenderConfig::with_size(16);
        let maps = accumulate_temporal(&[fix(0.2, 0.2, 0.0, 100.0), fix(0.8, 0.8, 1500.0, 100.0)], &cfg).unwrap();
        assert_eq!(maps.len(), 2);
        let maps = accumulate_temporal(&[fix(0.2, 0.2, 0.0, 100.0), fix(0.8, 0.8, 3500.0, 100.0)], &cfg).unwrap();
        assert_eq!(maps.len(), 4);
        assert!(maps[1].data().iter().all(|&v| v == 0.0));
        assert!(accumulate_temporal(&[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn static_is_sum_of_temporals() {
        let cfg = GazeRenderConfig::with_size(32);
        let recs = [fix(0.2, 0.3, 10.0, 150.0), fix(0.6, 0.5, 1200.0, 400.0), fix(0.61, 0.52, 2100.0, 90.0)];
        let raw = accumulate_temporal(&recs, &cfg).unwrap();
        let sum = static_accumulation(&raw).unwrap();
        for i in 0..32 * 32 {
            assert_eq!(sum.data()[i], raw[0].data()[i] + raw[1].data()[i] + raw[2].data()[i]);
        }
        let one = render_static(&raw[..1]).unwrap();
        assert_eq!(one.values, normalize(&raw[0], HeatmapSource::Gaze).unwrap().values.cast());
        let other = Tensor::zeros([16, 16]);
        assert!(render_static(&[raw[0].clone(), other]).is_err());
    }

    #[test]
    fn far_apart_blobs_both_survive_in_static() {
        let cfg = GazeRenderConfig::with_size(64);
        let recs = [fix(0.15, 0.15, 0.0, 300.0), fix(0.85, 0.85, 1000.0, 300.0)];
        let raw = accumulate_temporal(&recs, &cfg).unwrap();
        let s = render_static(&raw).unwrap();
        let v = s.values.data();
        // pixel centres nearest each fixation: (9, 9) and (54, 54)
        let peak = |y: usize, x: usize| {
            let c = v[y * 64 + x];
            (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| v[yy * 64 + xx] <= c))
        };
        assert!(peak(9, 9) && peak(54, 54));
        // tail of one blob at the other is negligible
        assert!(raw[0].data()[54 * 64 + 54] < 1e-6);
    }

    #[test]
    fn duration_scaling_and_order_invariance() {
        let cfg = GazeRenderConfig::with_size(32);
        let recs = vec![fix(0.2, 0.3, 10.0, 150.0), fix(0.5, 0.5, 20.0, 400.0), fix(0.7, 0.2, 900.0, 90.0)];
        let base = render_gaze(&recs, &cfg).unwrap();
        let doubled: Vec<_> = recs.iter().map(|r| FixationRecord { duration_ms: r.duration_ms * 2.0, ..r.clone() }).collect();
        assert_eq!(render_gaze(&doubled, &cfg).unwrap(), base);
        let mut shuffled = recs.clone();
        shuffled.reverse();
        assert_eq!(render_gaze(&shuffled, &cfg).unwrap(), base);
    }

    #[test]
    fn no_fixations_gives_zero_static() {
        let maps = render_gaze(&[], &GazeRenderConfig::with_size(8)).unwrap();
        assert!(maps.static_map.is_zero());
        assert!(maps.temporals.is_empty());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let recs = vec![fix(0.1, 0.2, 0.0, 123.456), fix(1.0, 0.0, 17.25, 0.1), fix(0.333333333333, 0.5, 1e3, 600.0)];
        let mut buf = Vec::new();
        write_fixations_to(&mut buf, &recs).unwrap();
        assert_eq!(read_fixations(&buf[..], "mem").unwrap(), recs);

        let bad = "image_id,patient_id,x_norm,y_norm,start_ms,duration_ms\na,p,0.5,0.5,0,10\nb,p,1.2,0.5,0,10\n";
        match read_fixations(bad.as_bytes(), "f.csv").unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (3, "x_norm")),
            e => panic!("{e}"),
        }
        let nan = "image_id,patient_id,x_norm,y_norm,start_ms,duration_ms\na,p,0.5,abc,0,10\n";
        assert!(matches!(read_fixations(nan.as_bytes(), "f").unwrap_err(), Error::Parse { row: 2, .. }));
        let missing = "image_id,patient_id,x_norm,y_norm,start_ms\n";
        assert!(matches!(read_fixations(missing.as_bytes(), "f").unwrap_err(), Error::Parse { column, .. } if column == "duration_ms"));
        let empty = "image_id,patient_id,x_norm,y_norm,start_ms,duration_ms\n";
        assert!(read_fixations(empty.as_bytes(), "f").unwrap().is_empty());
    }
}
