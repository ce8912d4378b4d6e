//! Dataset ingestion and persistence, patient-grouped splitting and the
//! synthetic corpus.
//!
//! On disk a corpus is `<image_dir>/<image_id>.png` grayscale images plus a
//! labels CSV (`image_id,patient_id,label`) and a fixations CSV in the
//! [`gaze`](crate::gaze) schema.

mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gaze::{self, FixationRecord, GazeRenderConfig};
use crate::model::NUM_CLASSES;
use crate::saliency::Heatmap;
use crate::tensor::Tensor;

pub use split::{grouped_split, grouped_split_ids, SplitPlan, DEFAULT_FRACTIONS};
pub use synth::{generate_synthetic, generate_synthetic_annotated, SynthTruth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Chf,
    Pneumonia,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label::Normal, Label::Chf, Label::Pneumonia];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f32; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Chf => "CHF",
            Label::Pneumonia => "pneumonia",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "chf" => Ok(Label::Chf),
            "pneumonia" => Ok(Label::Pneumonia),
            other => Err(Error::InvalidInput(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_id: String,
    pub patient_id: String,
    /// `[H, W]` in [0, 1].
    pub image: Tensor<f32>,
    pub label: Label,
    pub gaze_static: Heatmap<f32>,
    pub gaze_temporals: Vec<Heatmap<f32>>,
    pub fixations: Vec<FixationRecord>,
}

impl Example {
    /// The image as a `[1, 1, H, W]` model input.
    pub fn input(&self) -> Tensor<f32> {
        let s = self.image.shape();
        self.image.clone().reshape([1, 1, s[0], s[1]]).expect("2-D image")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub sigma_frac: f64,
    pub window_ms: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GazeRenderConfig::default();
        DataConfig { image_size: 128, sigma_frac: g.sigma_frac, window_ms: g.window_ms }
    }
}

impl DataConfig {
    pub fn gaze(&self) -> GazeRenderConfig {
        GazeRenderConfig {
            sigma_frac: self.sigma_frac,
            window_ms: self.window_ms,
            output_size: (self.image_size, self.image_size),
        }
    }
}

/// Paths of a corpus on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub image_dir: PathBuf,
    pub labels_csv: PathBuf,
    pub fixations_csv: PathBuf,
}

impl DatasetPaths {
    /// The layout written by [`save_dataset`].
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DatasetPaths {
            image_dir: dir.join("images"),
            labels_csv: dir.join("labels.csv"),
            fixations_csv: dir.join("fixations.csv"),
        }
    }
}

struct LabelRow {
    image_id: String,
    patient_id: String,
    label: Label,
}

fn read_labels(path: &Path, problems: &mut Vec<String>) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 3];
    for (slot, name) in col.iter_mut().zip(["image_id", "patient_id", "label"]) {
        *slot = headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            row: 1,
            column: name.into(),
            message: "missing column".into(),
        })?;
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| rec.get(col[i]).unwrap_or("").trim().to_owned();
        match get(2).parse::<Label>() {
            Ok(label) => rows.push(LabelRow { image_id: get(0), patient_id: get(1), label }),
            Err(_) => problems.push(format!("{}:{line}: unknown label `{}`", path.display(), get(2))),
        }
    }
    Ok(rows)
}

/// Decodes an 8- or 16-bit grayscale PNG into `[size, size]` values in [0, 1].
pub fn decode_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut luma = img.into_luma16();
    if luma.width() as usize != size || luma.height() as usize != size {
        luma = image::imageops::resize(&luma, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    let data = luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Tensor::new([size, size], data)
}

/// Writes `[H, W]` values in [0, 1] as a 16-bit grayscale PNG.
pub fn encode_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let [h, w] = match *image.shape() {
        [h, w] => [h, w],
        _ => return Err(Error::shape("encode_image", "[H, W]", format!("{:?}", image.shape()))),
    };
    let px = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches extent");
    buf.save(path)?;
    Ok(())
}

pub fn load_dataset(paths: &DatasetPaths, cfg: &DataConfig, exec: Execution) -> Result<Vec<Example>> {
    let mut problems = Vec::new();
    let labels = read_labels(&paths.labels_csv, &mut problems)?;
    let fixations = gaze::parse_fixations(&paths.fixations_csv)?;

    let mut on_disk = BTreeSet::new();
    let dir = std::fs::read_dir(&paths.image_dir).map_err(|e| Error::io(&paths.image_dir, e))?;
    for entry in dir {
        let p = entry.map_err(|e| Error::io(&paths.image_dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                on_disk.insert(stem.to_owned());
            }
        }
    }
    let mut labelled = BTreeSet::new();
    for row in &labels {
        if !labelled.insert(row.image_id.clone()) {
            problems.push(format!("image `{}` labelled twice", row.image_id));
        }
        if !on_disk.contains(&row.image_id) {
            problems.push(format!("label row for `{}` has no image file", row.image_id));
        }
    }
    for id in on_disk.difference(&labelled) {
        problems.push(format!("image `{id}` has no label row"));
    }
    let mut by_image: BTreeMap<&str, Vec<FixationRecord>> = BTreeMap::new();
    for f in &fixations {
        if !labelled.contains(&f.image_id) {
            problems.push(format!("fixations reference unknown image `{}`", f.image_id));
        }
        by_image.entry(&f.image_id).or_default().push(f.clone());
    }
    if !problems.is_empty() {
        problems.dedup();
        return Err(Error::Load(problems));
    }

    let gaze_cfg = cfg.gaze();
    let loaded = exec::map(exec, &labels, |_, row| -> Result<Example> {
        let image = decode_image(&paths.image_dir.join(format!("{}.png", row.image_id)), cfg.image_size)?;
        let fixations = by_image.get(row.image_id.as_str()).cloned().unwrap_or_default();
        let maps = gaze::render_gaze(&fixations, &gaze_cfg)?;
        Ok(Example {
            image_id: row.image_id.clone(),
            patient_id: row.patient_id.clone(),
            image,
            label: row.label,
            gaze_static: maps.static_map,
            gaze_temporals: maps.temporals,
            fixations,
        })
    });
    let mut out = Vec::with_capacity(loaded.len());
    for (row, ex) in labels.iter().zip(loaded) {
        match ex {
            Ok(ex) => out.push(ex),
            Err(e) => problems.push(format!("{}: {e}", row.image_id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems));
    }
    out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(out)
}

/// Writes images as 16-bit PNGs plus the two CSVs under `dir`.
pub fn save_dataset(examples: &[Example], dir: impl AsRef<Path>) -> Result<DatasetPaths> {
    let paths = DatasetPaths::in_dir(dir);
    std::fs::create_dir_all(&paths.image_dir).map_err(|e| Error::io(&paths.image_dir, e))?;
    let mut labels = csv::Writer::from_path(&paths.labels_csv)?;
    labels.write_record(["image_id", "patient_id", "label"])?;
    let mut fixations = Vec::new();
    for ex in examples {
        encode_image(&ex.image, &paths.image_dir.join(format!("{}.png", ex.image_id)))?;
        labels.write_record([ex.image_id.as_str(), ex.patient_id.as_str(), &ex.label.to_string()])?;
        fixations.extend_from_slice(&ex.fixations);
    }
    labels.flush().map_err(|e| Error::io(&paths.labels_csv, e))?;
    gaze::write_fixations(&paths.fixations_csv, &fixations)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fix(id: &str, x: f64) -> FixationRecord {
        FixationRecord {
            image_id: id.into(),
            patient_id: "p".into(),
            x_norm: x,
            y_norm: 0.5,
            start_ms: 0.0,
            duration_ms: 200.0,
        }
    }

    fn toy(dir: &Path) -> DatasetPaths {
        let paths = DatasetPaths::in_dir(dir);
        std::fs::create_dir_all(&paths.image_dir).unwrap();
        // one 8-bit image at a different size, two 16-bit
        let small: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(8, 8, |x, y| Luma([(x * 30 + y) as u8]));
        small.save(paths.image_dir.join("a.png")).unwrap();
        for id in ["b", "c"] {
            encode_image(&Tensor::from_fn([16, 16], |i| i as f32 / 255.0), &paths.image_dir.join(format!("{id}.png")))
                .unwrap();
        }
        std::fs::write(&paths.labels_csv, "image_id,patient_id,label\nc,p2,normal\na,p1,CHF\nb,p1,pneumonia \n").unwrap();
        gaze::write_fixations(&paths.fixations_csv, &[fix("a", 0.3), fix("b", 0.6), fix("a", 0.7)]).unwrap();
        paths
    }

    fn cfg() -> DataConfig {
        DataConfig { image_size: 16, ..Default::default() }
    }

    #[test]
    fn toy_corpus_loads() {
        let dir = tempfile::tempdir().unwrap();
        let paths = toy(dir.path());
        let ex = load_dataset(&paths, &cfg(), Execution::Serial).unwrap();
        assert_eq!(ex.iter().map(|e| e.image_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(ex[1].label, Label::Pneumonia);
        for e in &ex {
            assert_eq!(e.image.shape(), &[16, 16]);
            assert_eq!(e.gaze_static.values.shape(), &[16, 16]);
            assert!(e.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(ex[2].gaze_static.is_zero() && ex[2].gaze_temporals.is_empty());
        assert_eq!(ex[0].fixations.len(), 2);
        assert_eq!(load_dataset(&paths, &cfg(), Execution::Parallel).unwrap(), ex);
    }

    #[test]
    fn load_save_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let first = load_dataset(&toy(dir.path()), &cfg(), Execution::Serial).unwrap();
        let out = tempfile::tempdir().unwrap();
        let paths = save_dataset(&first, out.path()).unwrap();
        assert_eq!(load_dataset(&paths, &cfg(), Execution::Serial).unwrap(), first);
    }

    #[test]
    fn eight_bit_values_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(2, 1, |x, _| Luma([if x == 0 { 0 } else { 255 }]));
        img.save(&p).unwrap();
        let t = decode_image(&p, 2).unwrap();
        assert_eq!(&t.data()[..2], &[0.0, 1.0]);
    }

    #[test]
    fn load_errors_are_itemized() {
        let dir = tempfile::tempdir().unwrap();
        let paths = toy(dir.path());
        std::fs::write(&paths.labels_csv, "image_id,patient_id,label\na,p1,flu\nb,p1,normal\nzz,p3,normal\n").unwrap();
        match load_dataset(&paths, &cfg(), Execution::Serial).unwrap_err() {
            Error::Load(items) => {
                let all = items.join("\n");
                assert!(all.contains("`flu`"), "{all}");
                assert!(all.contains("`zz` has no image file"), "{all}");
                assert!(all.contains("image `c` has no label row"), "{all}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn label_parsing() {
        assert_eq!("pneumonia ".parse::<Label>().unwrap(), Label::Pneumonia);
        assert_eq!("chf".parse::<Label>().unwrap(), Label::Chf);
        assert!("flu".parse::<Label>().is_err());
        for l in Label::ALL {
            assert_eq!(l.to_string().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
    }
}
