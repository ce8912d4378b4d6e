//! Differentiable replay of a modified backward pass.
//!
//! With the ReLU pass masks and pooling switches frozen, the input-space
//! signal is multilinear in the model weights. The graph records that chain
//! of linear maps so a loss on the resulting heatmap can be differentiated
//! with respect to the weights used along it.

use super::{collapse_channels, normalize_values, one_hot_seed, Heatmap, HeatmapSource};
use crate::error::{Error, Result};
use crate::model::{ForwardRecord, Gradients, UNetModel};
use crate::ops::{self, BackwardRule};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub(super) enum GraphOp {
    /// `[1, 3] -> [1, C]`: seed times the head weight.
    HeadTranspose { weight: usize },
    /// `[1, C] -> [1, C, h, w]`.
    GapTranspose { shape: Vec<usize> },
    /// Frozen ReLU pass mask.
    Mask { keep: Vec<bool> },
    /// Transposed convolution with a live weight.
    ConvTranspose { weight: usize, input_shape: Vec<usize>, stride: usize, padding: usize },
    /// Scatter through frozen pooling switches.
    PoolTranspose { argmax: Vec<usize>, input_shape: Vec<usize> },
    CollapseChannels,
    Normalize,
}

#[derive(Clone, Debug)]
pub struct SaliencyGraph<T = f32> {
    ops: Vec<GraphOp>,
    seed: Tensor<T>,
    rule: BackwardRule,
}

/// Inputs to every op of one evaluation, kept for the reverse sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTrace<T = f32> {
    inputs: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

fn apply_mask<T: Scalar>(t: &Tensor<T>, keep: &[bool]) -> Result<Tensor<T>> {
    if keep.len() != t.len() {
        return Err(Error::shape("mask", keep.len(), t.len()));
    }
    let data = t.data().iter().zip(keep).map(|(&v, &k)| if k { v } else { T::zero() }).collect();
    Tensor::new(t.shape(), data)
}

pub(super) struct Recorder<T> {
    ops: Vec<GraphOp>,
    inputs: Vec<Tensor<T>>,
}

/// Shared imperative pass; with `recorder` set it also emits graph ops.
pub(super) fn propagate<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    seed: &Tensor<T>,
    rule: BackwardRule,
    mut recorder: Option<&mut Recorder<T>>,
) -> Result<Tensor<T>> {
    seed.ensure_shape("saliency seed", &[1, 3])?;
    let mut emit = |op: GraphOp, input: &Tensor<T>| {
        if let Some(r) = recorder.as_deref_mut() {
            r.ops.push(op);
            r.inputs.push(input.clone());
        }
    };
    let relu = model.is_relu();
    let through_relu =
        |signal: Tensor<T>, pre: &Tensor<T>, emit: &mut dyn FnMut(GraphOp, &Tensor<T>)| -> Result<Tensor<T>> {
            if !relu {
                return Ok(signal);
            }
            let keep = signal.data().iter().zip(pre.data()).map(|(&s, &z)| rule.passes(z, s)).collect();
            emit(GraphOp::Mask { keep }, &signal);
            ops::relu_backward(&signal, pre, rule)
        };

    let head = model.head_weight_index();
    emit(GraphOp::HeadTranspose { weight: head }, seed);
    let d_gap = ops::affine_backward_input(seed, model.weight(head))?;
    emit(GraphOp::GapTranspose { shape: record.bott_act.shape().to_vec() }, &d_gap);
    let mut d = ops::gap_backward(&d_gap, record.bott_act.shape())?;
    d = through_relu(d, &record.bott_pre, &mut emit)?;

    let depth = record.pooled.len();
    let b = model.bottleneck_weight_index();
    let shape = record.pooled[depth - 1].shape().to_vec();
    emit(GraphOp::ConvTranspose { weight: b, input_shape: shape.clone(), stride: 1, padding: 1 }, &d);
    d = ops::conv2d_backward_input(&d, &shape, model.weight(b), 1, 1)?;

    for i in (0..depth).rev() {
        let act_shape = record.enc_act[i].shape().to_vec();
        emit(GraphOp::PoolTranspose { argmax: record.argmax[i].clone(), input_shape: act_shape.clone() }, &d);
        d = ops::maxpool2d_backward(&d, &record.argmax[i], &act_shape)?;
        d = through_relu(d, &record.enc_pre[i], &mut emit)?;
        let w = model.encoder_weight_indices()[i];
        let in_shape = if i == 0 { record.input.shape().to_vec() } else { record.pooled[i - 1].shape().to_vec() };
        emit(GraphOp::ConvTranspose { weight: w, input_shape: in_shape.clone(), stride: 1, padding: 1 }, &d);
        d = ops::conv2d_backward_input(&d, &in_shape, model.weight(w), 1, 1)?;
    }
    Ok(d)
}

pub fn build_saliency_graph<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    target_class: usize,
    rule: BackwardRule,
) -> Result<SaliencyGraph<T>> {
    build_saliency_graph_with_seed(model, record, &one_hot_seed(target_class)?, rule)
}

pub fn build_saliency_graph_with_seed<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    seed: &Tensor<T>,
    rule: BackwardRule,
) -> Result<SaliencyGraph<T>> {
    Ok(build_traced(model, record, seed, rule)?.0)
}

/// Builds the graph together with the trace of its evaluation at the
/// current weights, saving a replay.
pub fn build_saliency_graph_traced<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    target_class: usize,
    rule: BackwardRule,
) -> Result<(SaliencyGraph<T>, GraphTrace<T>)> {
    build_traced(model, record, &one_hot_seed(target_class)?, rule)
}

fn build_traced<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    seed: &Tensor<T>,
    rule: BackwardRule,
) -> Result<(SaliencyGraph<T>, GraphTrace<T>)> {
    if rule == BackwardRule::Backprop {
        return Err(Error::InvalidConfig("saliency graph requires the deconvnet or guided rule".into()));
    }
    model.check_record(record)?;
    let mut rec = Recorder { ops: Vec::new(), inputs: Vec::new() };
    let raw = propagate(model, record, seed, rule, Some(&mut rec))?;
    let (collapsed, _) = collapse_channels(&raw)?;
    let output = normalize_values(&collapsed)?;
    rec.ops.extend([GraphOp::CollapseChannels, GraphOp::Normalize]);
    rec.inputs.extend([raw, collapsed]);
    let graph = SaliencyGraph { ops: rec.ops, seed: seed.clone(), rule };
    Ok((graph, GraphTrace { inputs: rec.inputs, output }))
}

impl<T: Scalar> SaliencyGraph<T> {
    pub fn rule(&self) -> BackwardRule {
        self.rule
    }

    /// Evaluates the graph against the *current* weights of `model`; masks
    /// and switches stay as recorded.
    pub fn evaluate(&self, model: &UNetModel<T>) -> Result<Heatmap<T>> {
        let trace = self.forward(model)?;
        Ok(Heatmap { values: trace.output, source: HeatmapSource::from(self.rule) })
    }

    pub fn forward(&self, model: &UNetModel<T>) -> Result<GraphTrace<T>> {
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut cur = self.seed.clone();
        for op in &self.ops {
            let next = match op {
                GraphOp::HeadTranspose { weight } => ops::affine_backward_input(&cur, model.weight(*weight))?,
                GraphOp::GapTranspose { shape } => ops::gap_backward(&cur, shape)?,
                GraphOp::Mask { keep } => apply_mask(&cur, keep)?,
                GraphOp::ConvTranspose { weight, input_shape, stride, padding } => {
                    ops::conv2d_backward_input(&cur, input_shape, model.weight(*weight), *stride, *padding)?
                }
                GraphOp::PoolTranspose { argmax, input_shape } => ops::maxpool2d_backward(&cur, argmax, input_shape)?,
                GraphOp::CollapseChannels => collapse_channels(&cur)?.0,
                GraphOp::Normalize => normalize_values(&cur)?,
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Ok(GraphTrace { inputs, output: cur })
    }

    /// Reverse sweep: gradients of a scalar loss with respect to every model
    /// parameter, given `d_output = ∂loss/∂map`.
    pub fn backward(&self, model: &UNetModel<T>, trace: &GraphTrace<T>, d_output: &Tensor<T>) -> Result<Gradients<T>> {
        d_output.ensure_shape("saliency graph backward", trace.output.shape())?;
        let mut grads = Gradients::zeros_like(model);
        let mut lam = d_output.clone();
        for (op, input) in self.ops.iter().zip(&trace.inputs).rev() {
            lam = match op {
                GraphOp::Normalize => {
                    let max = input.data().iter().copied().fold(T::zero(), T::max);
                    if max > T::zero() {
                        let k = input.argmax();
                        let mut out: Vec<T> = input
                            .data()
                            .iter()
                            .zip(lam.data())
                            .map(|(&v, &l)| if v > T::zero() { l / max } else { T::zero() })
                            .collect();
                        let coupling: T = input
                            .data()
                            .iter()
                            .zip(lam.data())
                            .map(|(&v, &l)| l * v.max(T::zero()))
                            .sum();
                        out[k] -= coupling / (max * max);
                        Tensor::new(input.shape(), out)?
                    } else {
                        Tensor::zeros(input.shape())
                    }
                }
                GraphOp::CollapseChannels => {
                    let (_, which) = collapse_channels(input)?;
                    let [_, _, h, w] = input.dims4("collapse")?;
                    let mut out = Tensor::zeros(input.shape());
                    for p in 0..h * w {
                        let idx = which[p] * h * w + p;
                        let v = input.data()[idx];
                        let sign = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        out.data_mut()[idx] = lam.data()[p] * sign;
                    }
                    out
                }
                GraphOp::ConvTranspose { weight, stride, padding, .. } => {
                    let w = model.weight(*weight);
                    let (gw, _) = ops::conv2d_backward_params(input, &lam, w.shape(), *stride, *padding)?;
                    grads.0[*weight].axpy(T::one(), &gw)?;
                    ops::conv2d_forward(&lam, w, None, *stride, *padding)?
                }
                GraphOp::PoolTranspose { argmax, .. } => ops::maxpool2d_gather(&lam, argmax, input.shape())?,
                GraphOp::Mask { keep } => apply_mask(&lam, keep)?,
                GraphOp::GapTranspose { .. } => ops::gap_forward(&lam)?,
                GraphOp::HeadTranspose { weight } => {
                    // d_gap = seed · W  =>  ∂/∂W[c, k] = seed[c] · λ[k]
                    let w = model.weight(*weight);
                    let (classes, ch) = (w.shape()[0], w.shape()[1]);
                    let g = &mut grads.0[*weight];
                    for c in 0..classes {
                        let s = input.data()[c];
                        for k in 0..ch {
                            g.data_mut()[c * ch + k] += s * lam.data()[k];
                        }
                    }
                    // the seed is a constant
                    Tensor::zeros(input.shape())
                }
            };
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use crate::ops::gradcheck::gradient_check;
    use crate::saliency::generate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, size: usize) -> (UNetModel<f64>, ForwardRecord<f64>) {
        let cfg = UNetConfig { input_size: size, encoder_channels: vec![2, 3], seed, ..Default::default() };
        let mut m = UNetModel::<f64>::build(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in m.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.1));
            }
        }
        let img = Tensor::from_fn([1, 1, size, size], |_| rng.random_range(0.0..1.0));
        let rec = m.forward_one(&img).unwrap();
        (m, rec)
    }

    #[test]
    fn replay_matches_generator_bitwise() {
        for seed in 0..10 {
            let (m, rec) = setup(seed, 16);
            for rule in [BackwardRule::Deconvnet, BackwardRule::Guided] {
                for class in 0..3 {
                    let g = build_saliency_graph(&m, &rec, class, rule).unwrap();
                    let replay = g.evaluate(&m).unwrap();
                    let direct = generate(&m, &rec, class, rule).unwrap();
                    assert_eq!(replay.values, direct.values);
                    let (_, traced) = build_saliency_graph_traced(&m, &rec, class, rule).unwrap();
                    assert_eq!(traced, g.forward(&m).unwrap());
                }
            }
        }
    }

    #[test]
    fn backprop_rule_rejected() {
        let (m, rec) = setup(0, 16);
        assert!(build_saliency_graph(&m, &rec, 0, BackwardRule::Backprop).is_err());
    }

    #[test]
    fn zero_seed_gives_zero_map_and_grads() {
        let (m, rec) = setup(1, 16);
        let g = build_saliency_graph_with_seed(&m, &rec, &Tensor::zeros([1, 3]), BackwardRule::Guided).unwrap();
        let trace = g.forward(&m).unwrap();
        assert!(trace.output.data().iter().all(|&v| v == 0.0));
        let grads = g.backward(&m, &trace, &Tensor::full(trace.output.shape(), 1.0)).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_gradients_match_frozen_mask_finite_differences() {
        for rule in [BackwardRule::Deconvnet, BackwardRule::Guided] {
            let (model, rec) = setup(3, 16);
            let g = build_saliency_graph(&model, &rec, 1, rule).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let probe = Tensor::<f64>::from_fn([16, 16], |_| rng.random_range(-1.0..1.0));
            for loss_kind in 0..2 {
                let loss = |map: &Tensor<f64>| if loss_kind == 0 { map.sum() } else { map.dot(&probe).unwrap() };
                let point = model.flat_params();
                let err = gradient_check(
                    |p| {
                        let mut m = model.clone();
                        m.set_flat_params(p).unwrap();
                        loss(&g.evaluate(&m).unwrap().values)
                    },
                    |_| {
                        let trace = g.forward(&model).unwrap();
                        let d = if loss_kind == 0 { Tensor::full([16, 16], 1.0) } else { probe.clone() };
                        g.backward(&model, &trace, &d).unwrap().flatten()
                    },
                    &point,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-4, "{rule:?} loss {loss_kind}: {err}");
            }
        }
    }
}
