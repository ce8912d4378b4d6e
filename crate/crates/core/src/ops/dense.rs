//! Affine map, global average pooling and the logistic sigmoid.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn affine_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, inp, out) = affine_dims(x, weight)?;
    bias.ensure_shape("affine bias", &[out])?;
    let mut y = vec![T::zero(); n * out];
    gemm(MatRef::new(x.data(), n, inp), MatRef::new(weight.data(), out, inp).t(), T::zero(), &mut y);
    for row in y.chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new([n, out], y)
}

fn affine_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, inp) = match *x.shape() {
        [n, i] => (n, i),
        _ => return Err(Error::shape("affine", "input [N, in]", format!("{:?}", x.shape()))),
    };
    match *weight.shape() {
        [o, i] if i == inp => Ok((n, inp, o)),
        _ => Err(Error::shape("affine", format!("weight [out, {inp}]"), format!("{:?}", weight.shape()))),
    }
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn affine_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, inp, out) = affine_dims(x, weight)?;
    grad_out.ensure_shape("affine_backward", &[n, out])?;
    let gx = affine_backward_input(grad_out, weight)?;
    let mut gw = vec![T::zero(); out * inp];
    gemm(MatRef::new(grad_out.data(), n, out).t(), MatRef::new(x.data(), n, inp), T::zero(), &mut gw);
    let mut gb = vec![T::zero(); out];
    for row in grad_out.data().chunks(out) {
        for (a, &b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok((gx, Tensor::new([out, inp], gw)?, Tensor::new([out], gb)?))
}

/// Input gradient only: `grad_out · W`.
pub fn affine_backward_input<T: Scalar>(grad_out: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, out) = match *grad_out.shape() {
        [n, o] => (n, o),
        _ => return Err(Error::shape("affine_backward", "grad [N, out]", format!("{:?}", grad_out.shape()))),
    };
    let inp = match *weight.shape() {
        [o, i] if o == out => i,
        _ => return Err(Error::shape("affine_backward", format!("weight [{out}, in]"), format!("{:?}", weight.shape()))),
    };
    let mut gx = vec![T::zero(); n * inp];
    gemm(MatRef::new(grad_out.data(), n, out), MatRef::new(weight.data(), out, inp), T::zero(), &mut gx);
    Tensor::new([n, inp], gx)
}

/// Per-channel spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn gap_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let data = input.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([n, c], data)
}

/// Spreads each channel gradient uniformly with weight `1/(H·W)`.
pub fn gap_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = match *input_shape {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape("gap_backward", "NCHW input shape", format!("{input_shape:?}"))),
    };
    grad_out.ensure_shape("gap_backward", &[n, c])?;
    let inv = T::one() / T::from_f64((h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(input_shape, out)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

/// Backward given the cached forward *output* `s = σ(x)`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    output.ensure_shape("sigmoid_backward", grad_out.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &s)| s * (T::one() - s) * g)
        .collect();
    Tensor::new(grad_out.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gap_is_mean() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap_forward(&x).unwrap().data(), &[2.5]);
        let g = gap_backward(&Tensor::new([1, 1], vec![1.0f32]).unwrap(), x.shape()).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let s = sigmoid_forward(&Tensor::new([1], vec![0.0f64]).unwrap());
        assert_eq!(s.data(), &[0.5]);
        let g = sigmoid_backward(&Tensor::new([1], vec![1.0]).unwrap(), &s).unwrap();
        assert_eq!(g.data(), &[0.25]);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
    }

    #[test]
    fn affine_shape_errors() {
        let x = Tensor::<f32>::zeros([2, 3]);
        assert!(affine_forward(&x, &Tensor::zeros([4, 2]), &Tensor::zeros([4])).is_err());
        assert!(affine_forward(&x, &Tensor::zeros([4, 3]), &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn affine_finite_differences_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, i, o) = (3, 5, 4);
        let g = Tensor::<f64>::from_fn([n, o], |_| rng.random_range(-1.0..1.0));
        let point: Vec<f64> = (0..n * i + o * i + o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let unpack = |p: &[f64]| {
            (
                Tensor::new([n, i], p[..n * i].to_vec()).unwrap(),
                Tensor::new([o, i], p[n * i..n * i + o * i].to_vec()).unwrap(),
                Tensor::new([o], p[n * i + o * i..].to_vec()).unwrap(),
            )
        };
        let err = gradient_check(
            |p| {
                let (x, w, b) = unpack(p);
                affine_forward(&x, &w, &b).unwrap().dot(&g).unwrap()
            },
            |p| {
                let (x, w, _) = unpack(p);
                let (gx, gw, gb) = affine_backward(&g, &x, &w).unwrap();
                gx.data().iter().chain(gw.data()).chain(gb.data()).copied().collect()
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");

        let (x, w, _) = unpack(&point);
        let y = affine_forward(&x, &w, &Tensor::zeros([o])).unwrap();
        let (gx, _, _) = affine_backward(&g, &x, &w).unwrap();
        assert!((y.dot(&g).unwrap() - x.dot(&gx).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gap_and_sigmoid_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Tensor::<f64>::from_fn([2, 3], |_| rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..2 * 3 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradient_check(
            |p| gap_forward(&Tensor::new([2, 3, 3, 2], p.to_vec()).unwrap()).unwrap().dot(&g).unwrap(),
            |_| gap_backward(&g, &[2, 3, 3, 2]).unwrap().into_data(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
        let g = Tensor::<f64>::from_fn([6], |_| rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
        let err = gradient_check(
            |p| sigmoid_forward(&Tensor::new([6], p.to_vec()).unwrap()).dot(&g).unwrap(),
            |p| sigmoid_backward(&g, &sigmoid_forward(&Tensor::new([6], p.to_vec()).unwrap())).unwrap().into_data(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}
