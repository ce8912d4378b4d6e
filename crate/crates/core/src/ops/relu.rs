use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a backward signal crosses a ReLU.
///
/// | rule      | passes signal where                 |
/// |-----------|-------------------------------------|
/// | Backprop  | forward input > 0                   |
/// | Deconvnet | signal > 0                          |
/// | Guided    | forward input > 0 and signal > 0    |
///
/// The subgradient at exactly zero is zero under every rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardRule {
    Backprop,
    Deconvnet,
    Guided,
}

impl BackwardRule {
    pub const ALL: [BackwardRule; 3] = [BackwardRule::Backprop, BackwardRule::Deconvnet, BackwardRule::Guided];

    #[inline]
    pub fn passes<T: Scalar>(self, forward_input: T, signal: T) -> bool {
        let zero = T::zero();
        match self {
            BackwardRule::Backprop => forward_input > zero,
            BackwardRule::Deconvnet => signal > zero,
            BackwardRule::Guided => forward_input > zero && signal > zero,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackwardRule::Backprop => "backprop",
            BackwardRule::Deconvnet => "deconvnet",
            BackwardRule::Guided => "guided",
        }
    }
}

impl std::str::FromStr for BackwardRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "backprop" | "vanilla" => Ok(BackwardRule::Backprop),
            "deconvnet" | "deconv" => Ok(BackwardRule::Deconvnet),
            "guided" => Ok(BackwardRule::Guided),
            other => Err(Error::InvalidConfig(format!("unknown backward rule `{other}`"))),
        }
    }
}

impl std::fmt::Display for BackwardRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(
    signal: &Tensor<T>,
    cached_forward_input: &Tensor<T>,
    rule: BackwardRule,
) -> Result<Tensor<T>> {
    cached_forward_input.ensure_shape("relu_backward", signal.shape())?;
    let data = signal
        .data()
        .iter()
        .zip(cached_forward_input.data())
        .map(|(&s, &x)| if rule.passes(x, s) { s } else { T::zero() })
        .collect();
    Tensor::new(signal.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(rule: BackwardRule, input: f64, signal: f64) -> f64 {
        let x = Tensor::new([1], vec![input]).unwrap();
        let s = Tensor::new([1], vec![signal]).unwrap();
        relu_backward(&s, &x, rule).unwrap().data()[0]
    }

    #[test]
    fn sign_cases() {
        use BackwardRule::*;
        assert_eq!([one(Backprop, -1.0, 2.0), one(Deconvnet, -1.0, 2.0), one(Guided, -1.0, 2.0)], [0.0, 2.0, 0.0]);
        assert_eq!([one(Backprop, 1.0, -2.0), one(Deconvnet, 1.0, -2.0), one(Guided, 1.0, -2.0)], [-2.0, 0.0, 0.0]);
        for rule in BackwardRule::ALL {
            assert_eq!(one(rule, 1.0, 2.0), 2.0);
            assert_eq!(one(rule, 0.0, 0.0), 0.0);
        }
        assert_eq!(one(Backprop, 0.0, 3.0), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Tensor::<f32>::zeros([2]);
        let s = Tensor::<f32>::zeros([3]);
        assert!(relu_backward(&s, &x, BackwardRule::Guided).is_err());
    }

    proptest! {
        #[test]
        fn guided_is_deconvnet_then_backprop(v in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40)) {
            let n = v.len();
            let x = Tensor::new([n], v.iter().map(|p| p.0).collect()).unwrap();
            let s = Tensor::new([n], v.iter().map(|p| p.1).collect()).unwrap();
            let guided = relu_backward(&s, &x, BackwardRule::Guided).unwrap();
            let chained = relu_backward(&relu_backward(&s, &x, BackwardRule::Deconvnet).unwrap(), &x, BackwardRule::Backprop).unwrap();
            prop_assert_eq!(guided, chained);
        }

        #[test]
        fn rules_coincide_when_everything_positive(v in proptest::collection::vec((0.01f64..3.0, 0.01f64..3.0), 1..40)) {
            let n = v.len();
            let x = Tensor::new([n], v.iter().map(|p| p.0).collect()).unwrap();
            let s = Tensor::new([n], v.iter().map(|p| p.1).collect()).unwrap();
            let b = relu_backward(&s, &x, BackwardRule::Backprop).unwrap();
            prop_assert_eq!(&b, &relu_backward(&s, &x, BackwardRule::Deconvnet).unwrap());
            prop_assert_eq!(&b, &relu_backward(&s, &x, BackwardRule::Guided).unwrap());
        }
    }
}
