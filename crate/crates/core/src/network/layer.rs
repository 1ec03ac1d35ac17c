use crate::error::{Error, Result};
use crate::numerics::conv::conv_geometry;
use crate::numerics::pool::pool_geometry;
use crate::numerics::{DenseMatrix, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// Identity map.
    Inference,
    /// Keep-mask drawn from a counter-based generator keyed by `(seed, node_id)`.
    Training { seed: u64 },
}

/// One node's operator.
///
/// `Activation` covers leaky-ReLU (`leakiness > 0`), ReLU (`0`) and absolute
/// value (`-1`). Dense and batch-norm act on the last axis; convolution and
/// pooling expect `[N,H,W,C]`; `Recurrent` consumes `[T, D]` along its leading axis.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        weights: DenseMatrix,
        bias: Vec<f64>,
    },
    Conv2D {
        filters: Tensor,
        bias: Vec<f64>,
        stride: (usize, usize),
        padding: Padding,
    },
    Activation {
        leakiness: f64,
    },
    MaxPool {
        ksize: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    Dropout {
        rate: f64,
        mode: DropoutMode,
    },
    BatchNormInference {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        epsilon: f64,
    },
    Flatten,
    Add,
    Concat {
        axis: usize,
    },
    Recurrent {
        w_hidden: DenseMatrix,
        w_input: DenseMatrix,
        bias: Vec<f64>,
        leakiness: f64,
        steps: usize,
    },
}

impl LayerSpec {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNormInference { .. } => "batchnorm_inf",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Add => "add",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::Recurrent { .. } => "recurrent",
        }
    }

    /// Whether the layer records a nonlinearity state during a forward pass.
    pub fn is_stateful(&self) -> bool {
        matches!(
            self,
            LayerSpec::Activation { .. }
                | LayerSpec::MaxPool { .. }
                | LayerSpec::Dropout {
                    mode: DropoutMode::Training { .. },
                    ..
                }
                | LayerSpec::Recurrent { .. }
        )
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. })
    }

    /// Shape of the weight parameter targeted by weight-JVPs, if any.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Dense { weights, .. } => Some(vec![weights.rows(), weights.cols()]),
            LayerSpec::Conv2D { filters, .. } => Some(filters.shape().to_vec()),
            _ => None,
        }
    }

    pub(crate) fn arity_ok(&self, n: usize) -> bool {
        match self {
            LayerSpec::Add => n >= 2,
            LayerSpec::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }

    /// Checks parameter consistency that does not depend on input shapes.
    pub(crate) fn validate_params(&self) -> std::result::Result<(), String> {
        match self {
            LayerSpec::Dense { weights, bias } => {
                if bias.len() != weights.rows() {
                    return Err(format!(
                        "bias length {} does not match {} output rows",
                        bias.len(),
                        weights.rows()
                    ));
                }
                if weights.rows() == 0 || weights.cols() == 0 {
                    return Err("weights must be non-empty".into());
                }
            }
            LayerSpec::Conv2D {
                filters,
                bias,
                stride,
                ..
            } => {
                if filters.ndim() != 4 {
                    return Err(format!("filters must be [kh,kw,C,F], got {:?}", filters.shape()));
                }
                if bias.len() != filters.shape()[3] {
                    return Err(format!(
                        "bias length {} does not match {} filters",
                        bias.len(),
                        filters.shape()[3]
                    ));
                }
                if stride.0 == 0 || stride.1 == 0 {
                    return Err("stride must be positive".into());
                }
            }
            LayerSpec::Activation { leakiness } => {
                if !leakiness.is_finite() {
                    return Err("leakiness must be finite".into());
                }
            }
            LayerSpec::MaxPool { ksize, stride, .. } => {
                if ksize.0 == 0 || ksize.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err("ksize and stride must be positive".into());
                }
            }
            LayerSpec::Dropout { rate, .. } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(format!("rate {rate} outside [0, 1)"));
                }
            }
            LayerSpec::BatchNormInference {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            } => {
                let n = gamma.len();
                if beta.len() != n || running_mean.len() != n || running_var.len() != n {
                    return Err("gamma, beta, running_mean and running_var lengths differ".into());
                }
                if running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err("running_var entries must be > 0".into());
                }
                if !(*epsilon > 0.0) {
                    return Err("epsilon must be > 0".into());
                }
            }
            LayerSpec::Flatten | LayerSpec::Add | LayerSpec::Concat { .. } => {}
            LayerSpec::Recurrent {
                w_hidden,
                w_input,
                bias,
                leakiness,
                steps,
            } => {
                let h = w_hidden.rows();
                if w_hidden.cols() != h {
                    return Err(format!("w_hidden must be square, got {}x{}", h, w_hidden.cols()));
                }
                if w_input.rows() != h || bias.len() != h {
                    return Err(format!(
                        "w_input rows {} and bias length {} must equal hidden size {h}",
                        w_input.rows(),
                        bias.len()
                    ));
                }
                if *steps == 0 {
                    return Err("steps must be >= 1".into());
                }
                if !leakiness.is_finite() {
                    return Err("leakiness must be finite".into());
                }
            }
        }
        Ok(())
    }

    pub(crate) fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        let first = inputs[0];
        match self {
            LayerSpec::Dense { weights, .. } => {
                let last = *first.last().expect("shapes are non-empty");
                if last != weights.cols() {
                    return Err(format!(
                        "input {first:?} last axis {last} does not match {} weight columns",
                        weights.cols()
                    ));
                }
                let mut out = first.to_vec();
                *out.last_mut().unwrap() = weights.rows();
                Ok(out)
            }
            LayerSpec::Conv2D {
                filters,
                stride,
                padding,
                ..
            } => conv_geometry(first, filters.shape(), *stride, *padding)
                .map(|g| g.output_shape())
                .map_err(|e| e.to_string()),
            LayerSpec::MaxPool {
                ksize,
                stride,
                padding,
            } => pool_geometry(first, *ksize, *stride, *padding)
                .map(|(g, _, _)| vec![g.n, g.oh, g.ow, g.c])
                .map_err(|e| e.to_string()),
            LayerSpec::Activation { .. } | LayerSpec::Dropout { .. } => Ok(first.to_vec()),
            LayerSpec::BatchNormInference { gamma, .. } => {
                let last = *first.last().unwrap();
                if last != gamma.len() {
                    return Err(format!(
                        "input {first:?} last axis {last} does not match {} batch-norm features",
                        gamma.len()
                    ));
                }
                Ok(first.to_vec())
            }
            LayerSpec::Flatten => {
                if first.len() < 2 {
                    Ok(first.to_vec())
                } else {
                    Ok(vec![first[0], first[1..].iter().product()])
                }
            }
            LayerSpec::Add => {
                if let Some(bad) = inputs.iter().find(|s| **s != first) {
                    return Err(format!("add inputs disagree: {first:?} vs {bad:?}"));
                }
                Ok(first.to_vec())
            }
            LayerSpec::Concat { axis } => {
                if *axis >= first.len() {
                    return Err(format!("concat axis {axis} out of range for {first:?}"));
                }
                let mut out = first.to_vec();
                for s in &inputs[1..] {
                    let agree = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(k, (a, b))| k == *axis || a == b);
                    if !agree {
                        return Err(format!("concat inputs disagree off axis {axis}: {first:?} vs {s:?}"));
                    }
                    out[*axis] += s[*axis];
                }
                Ok(out)
            }
            LayerSpec::Recurrent {
                w_hidden,
                w_input,
                steps,
                ..
            } => {
                if first.len() != 2 || first[0] != *steps || first[1] != w_input.cols() {
                    return Err(format!(
                        "recurrent input must be [{steps}, {}], got {first:?}",
                        w_input.cols()
                    ));
                }
                Ok(vec![w_hidden.rows()])
            }
        }
    }

    /// Replaces the weight parameter of a dense or convolutional layer.
    pub(crate) fn with_weights(&self, weights: &Tensor) -> Result<LayerSpec> {
        let expected = self
            .weight_shape()
            .ok_or_else(|| Error::InvalidArgument(format!("{} layer has no weights", self.type_name())))?;
        if weights.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "replace weights",
                lhs: weights.shape().to_vec(),
                rhs: expected,
            });
        }
        let mut out = self.clone();
        match &mut out {
            LayerSpec::Dense { weights: w, .. } => {
                *w = DenseMatrix::new(w.rows(), w.cols(), weights.data().to_vec())?;
            }
            LayerSpec::Conv2D { filters, .. } => *filters = weights.clone(),
            _ => unreachable!(),
        }
        Ok(out)
    }
}
