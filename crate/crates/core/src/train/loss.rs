use super::{Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ForwardRecord, Gradients, UNetModel, NUM_CLASSES};
use crate::ops::sigmoid;
use crate::saliency::{build_saliency_graph_traced, generate, GraphTrace, Heatmap, SaliencyGraph};
use crate::tensor::{Scalar, Tensor};

fn check_targets<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape("bce_with_logits", format!("{:?}", logits.shape()), format!("{:?}", targets.shape())));
    }
    if let Some(y) = targets.data().iter().find(|y| !(**y >= T::zero() && **y <= T::one())) {
        return Err(Error::InvalidInput(format!("bce target {y} outside [0, 1]")));
    }
    Ok(())
}

fn bce_term<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean of `max(z, 0) - z·y + ln(1 + e^-|z|)` over elements.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    check_targets(logits, targets)?;
    let n = T::from_f64(logits.len() as f64);
    Ok(logits.data().iter().zip(targets.data()).map(|(&z, &y)| bce_term(z, y)).sum::<T>() / n)
}

/// Loss and its gradient `(σ(z) - y) / n` with respect to the logits.
pub fn bce_with_logits_grad<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let value = bce_with_logits(logits, targets)?;
    let n = T::from_f64(logits.len() as f64);
    let grad = logits.data().iter().zip(targets.data()).map(|(&z, &y)| (sigmoid(z) - y) / n).collect();
    Ok((value, Tensor::new(logits.shape(), grad)?))
}

/// What a saliency-driven regime holds fixed from the forward pass it was
/// captured at: the replay graph (frozen masks and switches) and, for
/// mask-vs-saliency, the generator target.
#[derive(Clone, Debug)]
pub struct FrozenSaliency<T = f32> {
    graph: Option<SaliencyGraph<T>>,
    /// Evaluation of `graph` at the capture weights, keyed by fingerprint.
    trace: Option<(u64, GraphTrace<T>)>,
    target: Option<Tensor<T>>,
}

impl<T: Scalar> FrozenSaliency<T> {
    pub fn capture(model: &UNetModel<T>, record: &ForwardRecord<T>, regime: &Regime, target_class: usize) -> Result<Self> {
        regime.validate()?;
        Ok(match *regime {
            Regime::ClsOnly | Regime::MaskVsGaze => FrozenSaliency { graph: None, trace: None, target: None },
            Regime::SalVsGaze { rule } | Regime::Combined { rule, .. } => {
                let (graph, trace) = build_saliency_graph_traced(model, record, target_class, rule)?;
                FrozenSaliency { graph: Some(graph), trace: Some((model.fingerprint(), trace)), target: None }
            }
            Regime::MaskVsSal { rule } => FrozenSaliency {
                graph: None,
                trace: None,
                target: Some(generate(model, record, target_class, rule)?.values),
            },
        })
    }
}

struct Segmentation<T> {
    value: T,
    d_mask: Option<Tensor<T>>,
    grads: Option<Gradients<T>>,
}

fn segmentation<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    frozen: &FrozenSaliency<T>,
    regime: &Regime,
    gaze: &Tensor<T>,
    weight: T,
    with_grad: bool,
) -> Result<Segmentation<T>> {
    let mask_shape = record.mask_logits.shape().to_vec();
    let [h, w] = [mask_shape[2], mask_shape[3]];
    gaze.ensure_shape("gaze target", &[h, w])?;
    let mask_vs = |target: &Tensor<T>, scale: T| -> Result<(T, Option<Tensor<T>>)> {
        let target = target.clone().reshape(mask_shape.clone())?;
        if with_grad {
            let (v, mut g) = bce_with_logits_grad(&record.mask_logits, &target)?;
            g.scale(scale);
            Ok((v, Some(g)))
        } else {
            Ok((bce_with_logits(&record.mask_logits, &target)?, None))
        }
    };
    let sal_vs_gaze = |scale: T| -> Result<(T, Option<Gradients<T>>)> {
        let graph = frozen
            .graph
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("saliency regime without a captured graph".into()))?;
        let replayed;
        let trace = match &frozen.trace {
            Some((fp, t)) if *fp == model.fingerprint() => t,
            _ => {
                replayed = graph.forward(model)?;
                &replayed
            }
        };
        if with_grad {
            let (v, mut d_map) = bce_with_logits_grad(&trace.output, gaze)?;
            d_map.scale(scale);
            Ok((v, Some(graph.backward(model, trace, &d_map)?)))
        } else {
            Ok((bce_with_logits(&trace.output, gaze)?, None))
        }
    };
    Ok(match *regime {
        Regime::ClsOnly => Segmentation { value: T::zero(), d_mask: None, grads: None },
        Regime::MaskVsGaze => {
            let (value, d_mask) = mask_vs(gaze, weight)?;
            Segmentation { value, d_mask, grads: None }
        }
        Regime::MaskVsSal { .. } => {
            let target = frozen
                .target
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("mask-vs-saliency without a captured target".into()))?;
            let (value, d_mask) = mask_vs(target, weight)?;
            Segmentation { value, d_mask, grads: None }
        }
        Regime::SalVsGaze { .. } => {
            let (value, grads) = sal_vs_gaze(weight)?;
            Segmentation { value, d_mask: None, grads }
        }
        Regime::Combined { alpha, .. } => {
            let alpha = T::from_f64(alpha);
            let beta = T::one() - alpha;
            let (mut value, mut d_mask, mut grads) = (T::zero(), None, None);
            if alpha != T::zero() {
                let (v, g) = sal_vs_gaze(weight * alpha)?;
                value = alpha * v;
                grads = g;
            }
            if beta != T::zero() {
                let (v, g) = mask_vs(gaze, weight * beta)?;
                value += beta * v;
                d_mask = g;
            }
            Segmentation { value, d_mask, grads }
        }
    })
}

/// Total loss of one example, and with `with_grad` its gradient, holding
/// the saliency state in `frozen` fixed. `record` must come from `model`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_loss<T: Scalar>(
    model: &UNetModel<T>,
    record: &ForwardRecord<T>,
    frozen: &FrozenSaliency<T>,
    regime: &Regime,
    cfg: &TrainConfig,
    target_class: usize,
    gaze: &Tensor<T>,
    with_grad: bool,
) -> Result<(T, Option<Gradients<T>>)> {
    if target_class >= NUM_CLASSES {
        return Err(Error::InvalidInput(format!("class {target_class} not in 0..{NUM_CLASSES}")));
    }
    let onehot = Tensor::from_fn([NUM_CLASSES], |i| if i == target_class { T::one() } else { T::zero() });
    let (lambda_cls, lambda_seg) = (T::from_f64(cfg.lambda_cls), T::from_f64(cfg.lambda_seg));
    let seg = if *regime == Regime::ClsOnly {
        None
    } else {
        Some(segmentation(model, record, frozen, regime, gaze, lambda_seg, with_grad)?)
    };
    let cls = bce_with_logits(&record.class_logits, &onehot)?;
    let mut value = lambda_cls * cls;
    if let Some(s) = &seg {
        value += lambda_seg * s.value;
    }
    if !with_grad {
        return Ok((value, None));
    }
    let (_, mut d_logits) = bce_with_logits_grad(&record.class_logits, &onehot)?;
    d_logits.scale(lambda_cls);
    let (d_mask, extra) = match seg {
        Some(s) => (s.d_mask, s.grads),
        None => (None, None),
    };
    let mut grads = model.backward(record, &d_logits, d_mask.as_ref())?;
    if let Some(extra) = extra {
        grads.add_scaled(T::one(), &extra)?;
    }
    Ok((value, Some(grads)))
}

fn class_of<T: Scalar>(label_onehot: &Tensor<T>) -> Result<usize> {
    let ones: Vec<usize> = (0..label_onehot.len()).filter(|&i| label_onehot.data()[i] == T::one()).collect();
    let zeros = label_onehot.data().iter().filter(|v| **v == T::zero()).count();
    match ones.as_slice() {
        [c] if label_onehot.len() == NUM_CLASSES && zeros == NUM_CLASSES - 1 => Ok(*c),
        _ => Err(Error::InvalidInput(format!("label {:?} is not one-hot over {NUM_CLASSES} classes", label_onehot.data()))),
    }
}

/// Segmentation term alone, capturing the saliency state from `record`.
pub fn segmentation_loss<T: Scalar>(
    regime: &Regime,
    record: &ForwardRecord<T>,
    model: &UNetModel<T>,
    gaze: &Heatmap<T>,
    target_class: usize,
) -> Result<T> {
    if *regime == Regime::ClsOnly {
        return Err(Error::InvalidConfig("cls-only has no segmentation loss".into()));
    }
    model.check_record(record)?;
    let frozen = FrozenSaliency::capture(model, record, regime, target_class)?;
    Ok(segmentation(model, record, &frozen, regime, &gaze.values, T::one(), false)?.value)
}

/// `lambda_cls · bce(class_logits, onehot) + lambda_seg · segmentation`.
pub fn total_loss<T: Scalar>(
    record: &ForwardRecord<T>,
    model: &UNetModel<T>,
    regime: &Regime,
    cfg: &TrainConfig,
    label_onehot: &Tensor<T>,
    gaze: &Heatmap<T>,
) -> Result<T> {
    let class = class_of(label_onehot)?;
    model.check_record(record)?;
    let frozen = FrozenSaliency::capture(model, record, regime, class)?;
    Ok(evaluate_loss(model, record, &frozen, regime, cfg, class, &gaze.values, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use crate::ops::gradcheck::gradient_check;
    use crate::ops::BackwardRule;
    use crate::saliency::HeatmapSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len()], v).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce_with_logits(&t(&[0.0]), &t(&[0.5])).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(&t(&[30.0]), &t(&[1.0])).unwrap() < 1e-12);
        let (v, g) = bce_with_logits_grad(&t(&[0.0]), &t(&[1.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5]);
        assert!(bce_with_logits(&t(&[0.0]), &t(&[1.5])).is_err());
        assert!(bce_with_logits(&t(&[0.0, 1.0]), &t(&[1.0])).is_err());
        let big = bce_with_logits(&t(&[1e4, -1e4, 1e4]), &t(&[0.0, 1.0, 1.0])).unwrap();
        assert!(big.is_finite() && big > 0.0);
    }

    fn setup(seed: u64) -> (UNetModel<f64>, Tensor<f64>, Heatmap<f64>) {
        let cfg = UNetConfig { input_size: 16, encoder_channels: vec![2, 3], seed, ..Default::default() };
        let mut model = UNetModel::<f64>::build(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // nonzero biases keep pre-activations off the ReLU kink at 0
        for p in model.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let img = Tensor::from_fn([1, 1, 16, 16], |_| rng.random_range(0.0..1.0));
        let gaze = Heatmap {
            values: Tensor::from_fn([16, 16], |_| rng.random_range(0.0..1.0)),
            source: HeatmapSource::Gaze,
        };
        (model, img, gaze)
    }

    fn regimes() -> Vec<Regime> {
        let mut r = vec![Regime::ClsOnly, Regime::MaskVsGaze];
        for rule in [BackwardRule::Deconvnet, BackwardRule::Guided] {
            r.push(Regime::SalVsGaze { rule });
            r.push(Regime::MaskVsSal { rule });
            r.push(Regime::Combined { rule, alpha: 0.3 });
        }
        r
    }

    #[test]
    fn combined_endpoints_and_linearity() {
        let (model, img, gaze) = setup(3);
        let rec = model.forward_one(&img).unwrap();
        let cfg = TrainConfig::default();
        let onehot = t(&[0.0, 1.0, 0.0]);
        for rule in [BackwardRule::Deconvnet, BackwardRule::Guided] {
            let at = |alpha| total_loss(&rec, &model, &Regime::Combined { rule, alpha }, &cfg, &onehot, &gaze).unwrap();
            let sal = total_loss(&rec, &model, &Regime::SalVsGaze { rule }, &cfg, &onehot, &gaze).unwrap();
            let mask = total_loss(&rec, &model, &Regime::MaskVsGaze, &cfg, &onehot, &gaze).unwrap();
            assert_eq!(at(1.0), sal);
            assert_eq!(at(0.0), mask);
            let mid = at(0.25);
            assert!((mid - (0.25 * sal + 0.75 * mask)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_seg_zero_is_cls_only() {
        let (model, img, gaze) = setup(4);
        let rec = model.forward_one(&img).unwrap();
        let cfg = TrainConfig { lambda_seg: 0.0, ..Default::default() };
        let onehot = t(&[0.0, 0.0, 1.0]);
        let base = total_loss(&rec, &model, &Regime::ClsOnly, &cfg, &onehot, &gaze).unwrap();
        for r in regimes() {
            let v = total_loss(&rec, &model, &r, &cfg, &onehot, &gaze).unwrap();
            assert_eq!(v, base, "{r}");
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn mask_vs_zero_saliency_is_bce_against_zero() {
        let (mut model, img, gaze) = setup(5);
        // zero head weights give an all-zero generator map
        let h = model.param_index("head.weight").unwrap();
        model.params_mut()[h].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let rec = model.forward_one(&img).unwrap();
        let seg = segmentation_loss(&Regime::MaskVsSal { rule: BackwardRule::Guided }, &rec, &model, &gaze, 1).unwrap();
        let zeros = Tensor::zeros(rec.mask_logits.shape());
        assert_eq!(seg, bce_with_logits(&rec.mask_logits, &zeros).unwrap());
    }

    #[test]
    fn rejects_bad_labels() {
        let (model, img, gaze) = setup(6);
        let rec = model.forward_one(&img).unwrap();
        let cfg = TrainConfig::default();
        assert!(total_loss(&rec, &model, &Regime::ClsOnly, &cfg, &t(&[1.0, 1.0, 0.0]), &gaze).is_err());
        assert!(total_loss(&rec, &model, &Regime::ClsOnly, &cfg, &t(&[0.5, 0.5, 0.0]), &gaze).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_regime() {
        for regime in regimes() {
            let (model, img, gaze) = setup(9);
            let cfg = TrainConfig { lambda_cls: 0.7, lambda_seg: 1.3, ..Default::default() };
            let class = 2;
            let rec = model.forward_one(&img).unwrap();
            let frozen = FrozenSaliency::capture(&model, &rec, &regime, class).unwrap();
            let err = gradient_check(
                |p| {
                    let mut m = model.clone();
                    m.set_flat_params(p).unwrap();
                    let r = m.forward_one(&img).unwrap();
                    evaluate_loss(&m, &r, &frozen, &regime, &cfg, class, &gaze.values, false).unwrap().0
                },
                |_| {
                    evaluate_loss(&model, &rec, &frozen, &regime, &cfg, class, &gaze.values, true)
                        .unwrap()
                        .1
                        .unwrap()
                        .flatten()
                },
                &model.flat_params(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{regime}: relative error {err}");
        }
    }
}
