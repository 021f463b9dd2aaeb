use serde::{Deserialize, Serialize};

use super::ops::conv_output_len;
use super::NnError;

/// Declarative description of one network layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    ReLU,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = match *self {
            LayerSpec::Conv2d {
                in_c,
                out_c,
                kernel,
                stride,
                ..
            } => in_c > 0 && out_c > 0 && kernel > 0 && stride >= 1,
            LayerSpec::BatchNorm2d { channels, eps, momentum } => {
                channels > 0 && eps > 0.0 && (0.0..=1.0).contains(&momentum)
            }
            LayerSpec::MaxPool2d { kernel, stride, pad } => kernel > 0 && stride >= 1 && 2 * pad <= kernel,
            LayerSpec::Linear { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::ReLU | LayerSpec::GlobalAvgPool | LayerSpec::Softmax => true,
        };
        if ok {
            Ok(())
        } else {
            Err(NnError::BadLayer(format!("{self:?}")))
        }
    }

    /// Output dims for an input of dims `input` (batch first).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        self.validate()?;
        let mismatch = || NnError::ShapeMismatch(format!("{self:?} cannot take input {input:?}"));
        match (*self, input) {
            (LayerSpec::Conv2d { in_c, out_c, kernel, stride, pad }, &[b, c, h, w]) if c == in_c => {
                let oh = conv_output_len(h, kernel, stride, pad).ok_or_else(mismatch)?;
                let ow = conv_output_len(w, kernel, stride, pad).ok_or_else(mismatch)?;
                Ok(vec![b, out_c, oh, ow])
            }
            (LayerSpec::MaxPool2d { kernel, stride, pad }, &[b, c, h, w]) => {
                let oh = conv_output_len(h, kernel, stride, pad).ok_or_else(mismatch)?;
                let ow = conv_output_len(w, kernel, stride, pad).ok_or_else(mismatch)?;
                Ok(vec![b, c, oh, ow])
            }
            (LayerSpec::BatchNorm2d { channels, .. }, &[_, c, _, _]) if c == channels => Ok(input.to_vec()),
            (LayerSpec::GlobalAvgPool, &[b, c, _, _]) => Ok(vec![b, c]),
            (LayerSpec::Linear { inputs, outputs }, &[b, i]) if i == inputs => Ok(vec![b, outputs]),
            (LayerSpec::ReLU, _) => Ok(input.to_vec()),
            (LayerSpec::Softmax, &[_, _]) => Ok(input.to_vec()),
            _ => Err(mismatch()),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_c, out_c, kernel, .. } => in_c * out_c * kernel * kernel,
            LayerSpec::BatchNorm2d { channels, .. } => 2 * channels,
            LayerSpec::Linear { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ops, Tensor};
    use proptest::prelude::*;

    #[test]
    fn stem_shape() {
        let conv = LayerSpec::Conv2d { in_c: 19, out_c: 64, kernel: 7, stride: 2, pad: 3 };
        assert_eq!(conv.output_shape(&[1, 19, 64, 100]).unwrap(), vec![1, 64, 32, 50]);
        let pool = LayerSpec::MaxPool2d { kernel: 3, stride: 2, pad: 1 };
        assert_eq!(pool.output_shape(&[1, 64, 32, 50]).unwrap(), vec![1, 64, 16, 25]);
        assert!(LayerSpec::Conv2d { in_c: 1, out_c: 1, kernel: 3, stride: 0, pad: 0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn pool_shape_contracts(
            b in 1usize..3, c in 1usize..4, h in 1usize..12, w in 1usize..12,
            kernel in 1usize..5, stride in 1usize..4, pad in 0usize..3,
        ) {
            let x = Tensor::<f32>::zeros(&[b, c, h, w]);
            let spec = LayerSpec::MaxPool2d { kernel, stride, pad };
            match (spec.output_shape(x.dims()), ops::maxpool_forward(&x, kernel, stride, pad)) {
                (Ok(dims), Ok((y, _))) => prop_assert_eq!(dims.as_slice(), y.dims()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "spec {:?} vs kernel {:?}", a, b.map(|t| t.0.dims().to_vec())),
            }
            let gap = ops::global_avg_pool_forward(&x).unwrap();
            let expected = LayerSpec::GlobalAvgPool.output_shape(x.dims()).unwrap();
            prop_assert_eq!(gap.dims(), expected.as_slice());
        }
    }
}
