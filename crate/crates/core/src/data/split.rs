use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Image ids per split; every patient's images share one list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitPlan {
    pub fn lists(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Partitions `examples` into (train, val, test), each in plan order.
    pub fn partition(&self, examples: &[Example]) -> Result<[Vec<Example>; 3]> {
        let by_id: BTreeMap<&str, &Example> = examples.iter().map(|e| (e.image_id.as_str(), e)).collect();
        let pick = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|e| (*e).clone())
                        .ok_or_else(|| Error::InvalidInput(format!("split names unknown image `{id}`")))
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok([pick(&self.train)?, pick(&self.val)?, pick(&self.test)?])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn grouped_split(examples: &[Example], fractions: [f64; 3], seed: u64) -> Result<SplitPlan> {
    let items: Vec<(&str, &str)> = examples.iter().map(|e| (e.image_id.as_str(), e.patient_id.as_str())).collect();
    grouped_split_ids(&items, fractions, seed)
}

/// Splits `(image_id, patient_id)` pairs. Patients are shuffled by seed and
/// each goes to the split furthest below its image-count target (ties to
/// the earlier split).
pub fn grouped_split_ids(items: &[(&str, &str)], fractions: [f64; 3], seed: u64) -> Result<SplitPlan> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (image, patient) in items {
        groups.entry(patient).or_default().push((*image).to_owned());
    }
    if groups.len() < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 patients to split, got {}", groups.len())));
    }
    let mut patients: Vec<Vec<String>> = groups.into_values().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = items.len() as f64;
    let mut lists: [Vec<String>; 3] = Default::default();
    for images in patients {
        let deficit = |k: usize| fractions[k] * total - lists[k].len() as f64;
        let mut best = 0;
        for k in 1..3 {
            if deficit(k) > deficit(best) {
                best = k;
            }
        }
        lists[best].extend(images);
    }
    let [train, val, test] = lists;
    Ok(SplitPlan { train, val, test, fractions, seed })
}
