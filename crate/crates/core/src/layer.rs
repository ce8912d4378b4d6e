use crate::error::{Error, Result};

/// One entry of the fixed layer vocabulary, with enough hyperparameters to
/// infer output shapes and parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ReLU,
    MaxPool2d { kernel: usize },
    Upsample2d { factor: usize },
    Affine { in_features: usize, out_features: usize },
    GlobalAvgPool,
    Sigmoid,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            LayerSpec::Affine { in_features, out_features } => out_features * in_features + out_features,
            _ => 0,
        }
    }

    /// Output shape for an `[N, C, H, W]` (or `[N, F]` for `Affine`) input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |op: &'static str| -> Result<[usize; 4]> {
            match *input {
                [n, c, h, w] => Ok([n, c, h, w]),
                _ => Err(Error::shape(op, "NCHW", format!("{input:?}"))),
            }
        };
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [n, c, h, w] = spatial("Conv2d")?;
                if c != in_channels {
                    return Err(Error::shape("Conv2d", format!("{in_channels} channels"), c));
                }
                if stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::InvalidInput(format!("Conv2d: kernel {kernel} does not fit {h}x{w}")));
                }
                Ok(vec![n, out_channels, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
            }
            LayerSpec::ReLU | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel } => {
                let [n, c, h, w] = spatial("MaxPool2d")?;
                if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                    return Err(Error::InvalidInput(format!("MaxPool2d: {h}x{w} not divisible by {kernel}")));
                }
                Ok(vec![n, c, h / kernel, w / kernel])
            }
            LayerSpec::Upsample2d { factor } => {
                let [n, c, h, w] = spatial("Upsample2d")?;
                Ok(vec![n, c, h * factor, w * factor])
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, _, _] = spatial("GlobalAvgPool")?;
                Ok(vec![n, c])
            }
            LayerSpec::Affine { in_features, out_features } => match *input {
                [n, f] if f == in_features => Ok(vec![n, out_features]),
                _ => Err(Error::shape("Affine", format!("[N, {in_features}]"), format!("{input:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_counts() {
        let conv = LayerSpec::Conv2d { in_channels: 3, out_channels: 8, kernel: 3, stride: 1, padding: 1 };
        assert_eq!(conv.output_shape(&[2, 3, 16, 16]).unwrap(), vec![2, 8, 16, 16]);
        assert_eq!(conv.param_count(), 8 * 3 * 9 + 8);
        assert!(conv.output_shape(&[2, 4, 16, 16]).is_err());
        assert_eq!(LayerSpec::MaxPool2d { kernel: 2 }.output_shape(&[1, 1, 4, 6]).unwrap(), vec![1, 1, 2, 3]);
        assert!(LayerSpec::MaxPool2d { kernel: 2 }.output_shape(&[1, 1, 5, 6]).is_err());
        assert_eq!(LayerSpec::GlobalAvgPool.output_shape(&[1, 5, 4, 4]).unwrap(), vec![1, 5]);
        assert_eq!(LayerSpec::Affine { in_features: 5, out_features: 3 }.param_count(), 18);
    }
}
