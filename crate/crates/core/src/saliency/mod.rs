//! Saliency maps: input-space signals propagated back from a class logit
//! under a [`BackwardRule`], plus Grad-CAM on the bottleneck features.

mod graph;

use serde::{Deserialize, Serialize};

pub use graph::{
    build_saliency_graph, build_saliency_graph_traced, build_saliency_graph_with_seed, GraphTrace, SaliencyGraph,
};

use crate::error::{Error, Result};
use crate::model::{ForwardRecord, UNetModel, NUM_CLASSES};
use crate::ops::{self, BackwardRule};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeatmapSource {
    Backprop,
    Deconvnet,
    Guided,
    GradCam,
    Gaze,
    DecoderMask,
}

impl From<BackwardRule> for HeatmapSource {
    fn from(rule: BackwardRule) -> Self {
        match rule {
            BackwardRule::Backprop => HeatmapSource::Backprop,
            BackwardRule::Deconvnet => HeatmapSource::Deconvnet,
            BackwardRule::Guided => HeatmapSource::Guided,
        }
    }
}

/// An `H×W` map with values in `[0, 1]` whose maximum is 1 unless the map
/// is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T = f32> {
    pub values: Tensor<T>,
    pub source: HeatmapSource,
}

impl<T: Scalar> Heatmap<T> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> Heatmap<U> {
        Heatmap { values: self.values.cast(), source: self.source }
    }

    /// Builds a heatmap from values that are already normalized.
    pub fn from_normalized(values: Tensor<T>, source: HeatmapSource) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape("Heatmap", "[H, W]", format!("{:?}", values.shape())));
        }
        if values.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::InvalidInput("heatmap values must lie in [0, 1]".into()));
        }
        Ok(Heatmap { values, source })
    }

    pub fn zeros(height: usize, width: usize, source: HeatmapSource) -> Self {
        Heatmap { values: Tensor::zeros([height, width]), source }
    }
}

/// Rectify, then divide by the maximum (all zeros stay all zeros).
pub fn normalize_values<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(i) = raw.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { location: format!("heatmap element {i}") });
    }
    let rect = raw.map(|v| v.max(T::zero()));
    let max = rect.data().iter().copied().fold(T::zero(), T::max);
    if max > T::zero() {
        Ok(rect.map(|v| v / max))
    } else {
        Ok(rect)
    }
}

pub fn normalize<T: Scalar>(raw: &Tensor<T>, source: HeatmapSource) -> Result<Heatmap<T>> {
    if raw.ndim() != 2 {
        return Err(Error::shape("normalize", "[H, W]", format!("{:?}", raw.shape())));
    }
    Ok(Heatmap { values: normalize_values(raw)?, source })
}

/// Collapses `[1, C, H, W]` to `[H, W]` by the maximum absolute value over
/// channels; also returns the winning channel per pixel.
pub(crate) fn collapse_channels<T: Scalar>(signal: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = signal.dims4("collapse_channels")?;
    if n != 1 {
        return Err(Error::shape("collapse_channels", "batch of 1", n));
    }
    let d = signal.data();
    let mut out = vec![T::zero(); h * w];
    let mut which = vec![0usize; h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let v = d[ch * h * w + p].abs();
            if ch == 0 || v > out[p] {
                out[p] = v;
                which[p] = ch;
            }
        }
    }
    Ok((Tensor::new([h, w], out)?, which))
}

pub(crate) fn one_hot_seed<T: Scalar>(target_class: usize) -> Result<Tensor<T>> {
    if target_class >= NUM_CLASSES {
        return Err(Error::InvalidInput(format!("target class {target_class} not in 0..{NUM_CLASSES}")));
    }
    Ok(Tensor::from_fn([1, NUM_CLASSES], |i| if i == target_class { T::one() } else { T::zero() }))
}

/// Raw input-space signal `[1, 1, H, W]` obtained by propagating `seed`
/// (`[1, 3]`) from the class logits through the encoder with `rule` at every
/// ReLU.
pub fn propagate_to_input<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    seed: &Tensor<T>,
    rule: BackwardRule,
) -> Result<Tensor<T>> {
    graph::propagate(model, record, seed, rule, None)
}

pub fn generate<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    target_class: usize,
    rule: BackwardRule,
) -> Result<Heatmap<T>> {
    generate_with_seed(model, record, &one_hot_seed(target_class)?, rule)
}

/// Like [`generate`] with an arbitrary `[1, 3]` seed on the logits.
pub fn generate_with_seed<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    seed: &Tensor<T>,
    rule: BackwardRule,
) -> Result<Heatmap<T>> {
    model.check_record(record)?;
    let raw = propagate_to_input(model, record, seed, rule)?;
    let (collapsed, _) = collapse_channels(&raw)?;
    normalize(&collapsed, rule.into())
}

/// Rectified gradient-weighted sum of bottleneck feature maps at the
/// bottleneck resolution, before upsampling or normalization.
pub fn gradcam_coarse<T: Scalar>(model: &UNetModel<T>, record: &ForwardRecord<T>, target_class: usize) -> Result<Tensor<T>> {
    model.check_record(record)?;
    let seed = one_hot_seed::<T>(target_class)?;
    let features = record.bottleneck_features();
    let [_, c, h, w] = features.dims4("gradcam")?;
    let d_gap = ops::affine_backward_input(&seed, model.weight(model.head_weight_index()))?;
    let d_features = ops::gap_backward(&d_gap, features.shape())?;
    let weights = ops::gap_forward(&d_features)?;
    let mut cam = vec![T::zero(); h * w];
    for k in 0..c {
        let a = weights.data()[k];
        for (v, &f) in cam.iter_mut().zip(&features.data()[k * h * w..(k + 1) * h * w]) {
            *v += a * f;
        }
    }
    Tensor::new([h, w], cam.into_iter().map(|v| v.max(T::zero())).collect())
}

pub fn gradcam<T: Scalar>(model: &UNetModel<T>, record: &ForwardRecord<T>, target_class: usize) -> Result<Heatmap<T>> {
    let coarse = gradcam_coarse(model, record, target_class)?;
    let [h, w] = [coarse.shape()[0], coarse.shape()[1]];
    let size = model.config().input_size;
    let up = ops::upsample2d_forward(&coarse.reshape([1, 1, h, w])?, size / h)?.reshape([size, size])?;
    normalize(&up, HeatmapSource::GradCam)
}
