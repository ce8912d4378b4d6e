//! Max pooling with argmax switches and nearest-neighbour upsampling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_divisible(op: &'static str, shape: &[usize], factor: usize) -> Result<[usize; 4]> {
    let [n, c, h, w] = match *shape {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape(op, "NCHW tensor", format!("{shape:?}"))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "{op}: spatial extent {h}x{w} not divisible by factor {factor}"
        )));
    }
    Ok([n, c, h, w])
}

/// Non-overlapping `k×k` max pooling. Returns the pooled tensor and, for each
/// output cell, the flat index of the input element it was taken from
/// (first maximum in scan order).
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = check_divisible("maxpool2d", input.shape(), k)?;
    let (oh, ow) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

/// Routes each output gradient to its recorded argmax position.
pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("maxpool2d_backward", format!("{} switches", argmax.len()), format!("{:?}", grad_out.shape())));
    }
    let mut grad_in = Tensor::zeros(input_shape.to_vec());
    let gi = grad_in.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        if idx >= gi.len() {
            return Err(Error::InvalidInput("maxpool2d_backward: switch index out of range".into()));
        }
        gi[idx] += g;
    }
    Ok(grad_in)
}

/// Gathers `values` through recorded switches: the adjoint of
/// [`maxpool2d_backward`] with the switches held fixed.
pub fn maxpool2d_gather<T: Scalar>(values: &Tensor<T>, argmax: &[usize], output_shape: &[usize]) -> Result<Tensor<T>> {
    let v = values.data();
    if argmax.iter().any(|&i| i >= v.len()) {
        return Err(Error::InvalidInput("maxpool2d_gather: switch index out of range".into()));
    }
    Tensor::new(output_shape, argmax.iter().map(|&i| v[i]).collect())
}

pub fn upsample2d_forward<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("upsample2d")?;
    if factor == 0 {
        return Err(Error::InvalidInput("upsample2d: factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            let row = &x[plane * h * w + (y / factor) * w..plane * h * w + (y / factor + 1) * w];
            for xo in 0..ow {
                out.push(row[xo / factor]);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

/// Sums each `factor×factor` block back onto its source cell.
pub fn upsample2d_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = check_divisible("upsample2d_backward", grad_out.shape(), factor)?;
    let (h, w) = (oh / factor, ow / factor);
    let g = grad_out.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out[plane * h * w + (y / factor) * w + x / factor] += g[plane * oh * ow + y * ow + x];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(&Tensor::new([1, 1, 1, 1], vec![7.0]).unwrap(), &idx, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn upsample_fan_out_fan_in() {
        let x = Tensor::<f32>::new([1, 1, 1, 1], vec![5.0]).unwrap();
        let y = upsample2d_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 5.0));
        let g = upsample2d_backward(&Tensor::full([1, 1, 2, 2], 1.0f32), 2).unwrap();
        assert_eq!(g.data(), &[4.0]);
    }

    #[test]
    fn non_divisible_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2d_forward(&x, 2), Err(Error::InvalidInput(_))));
        assert!(upsample2d_backward(&x, 2).is_err());
    }

    #[test]
    fn finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor::from_fn([2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let err = gradient_check(
            |p| maxpool2d_forward(&Tensor::new([2, 3, 4, 4], p.to_vec()).unwrap(), 2).unwrap().0.dot(&g).unwrap(),
            |p| {
                let x = Tensor::new([2, 3, 4, 4], p.to_vec()).unwrap();
                let (_, idx) = maxpool2d_forward(&x, 2).unwrap();
                maxpool2d_backward(&g, &idx, x.shape()).unwrap().into_data()
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);

        let x: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Tensor::from_fn([2, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
        let err = gradient_check(
            |p| upsample2d_forward(&Tensor::new([2, 3, 2, 2], p.to_vec()).unwrap(), 3).unwrap().dot(&g).unwrap(),
            |_| upsample2d_backward(&g, 3).unwrap().into_data(),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn gather_is_adjoint_of_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn([1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let (_, idx) = maxpool2d_forward(&x, 2).unwrap();
        let g = Tensor::<f64>::from_fn([1, 2, 2, 2], |_| rng.random_range(-1.0..1.0));
        let lam = Tensor::from_fn([1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let routed = maxpool2d_backward(&g, &idx, x.shape()).unwrap();
        let gathered = maxpool2d_gather(&lam, &idx, g.shape()).unwrap();
        assert!((routed.dot(&lam).unwrap() - g.dot(&gathered).unwrap()).abs() < 1e-12);
    }
}
