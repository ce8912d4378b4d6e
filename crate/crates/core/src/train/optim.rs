use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Gradients, UNetModel};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(crate::Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    kind: OptimizerKind,
    learning_rate: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, model: &UNetModel<T>) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Optimizer { kind, learning_rate, step: 0, m, v }
    }

    pub fn step(&mut self, model: &mut UNetModel<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.0.len() != model.params().len() {
            return Err(crate::Error::shape("optimizer step", model.params().len(), grads.0.len()));
        }
        self.step += 1;
        let lr = T::from_f64(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in model.params_mut().iter_mut().zip(&grads.0) {
                    p.value.axpy(-lr, g)?;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
                let c1 = T::from_f64(1.0 - BETA1.powi(self.step));
                let c2 = T::from_f64(1.0 - BETA2.powi(self.step));
                let eps = T::from_f64(EPS);
                for (i, (p, g)) in model.params_mut().iter_mut().zip(&grads.0).enumerate() {
                    g.ensure_shape("optimizer step", p.value.shape())?;
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * gj;
                        v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
