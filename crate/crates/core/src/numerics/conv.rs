//! 2-D cross-correlation over NHWC tensors and its input adjoint.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output length and leading pad along one spatial axis.
///
/// `same` follows the usual framework rule: `out = ceil(n / stride)`, with the
/// total padding split so the extra element (if odd) goes after the input.
pub fn window_geometry(
    op: &'static str,
    n: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(Error::Geometry {
            op,
            msg: format!("kernel {k} and stride {stride} must be positive"),
        });
    }
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(Error::Geometry {
                    op,
                    msg: format!("window {k} larger than input {n} with valid padding (empty output)"),
                });
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub sh: usize,
    pub sw: usize,
}

pub(crate) fn conv_geometry(
    input_shape: &[usize],
    filter_shape: &[usize],
    stride: (usize, usize),
    padding: Padding,
) -> Result<ConvGeometry> {
    let &[n, h, w, c] = input_shape else {
        return Err(Error::Geometry {
            op: "conv2d",
            msg: format!("input must be rank 4 [N,H,W,C], got {input_shape:?}"),
        });
    };
    let &[kh, kw, fc, f] = filter_shape else {
        return Err(Error::Geometry {
            op: "conv2d",
            msg: format!("filters must be rank 4 [kh,kw,C,F], got {filter_shape:?}"),
        });
    };
    if fc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: input_shape.to_vec(),
            rhs: filter_shape.to_vec(),
        });
    }
    let (oh, pad_top) = window_geometry("conv2d", h, kh, stride.0, padding)?;
    let (ow, pad_left) = window_geometry("conv2d", w, kw, stride.1, padding)?;
    Ok(ConvGeometry {
        n,
        h,
        w,
        c,
        kh,
        kw,
        f,
        oh,
        ow,
        pad_top,
        pad_left,
        sh: stride.0,
        sw: stride.1,
    })
}

impl ConvGeometry {
    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.f]
    }

    /// Input coordinate hit by output row `o` and kernel tap `d`, if inside the image.
    #[inline]
    fn src(o: usize, d: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + d).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// Cross-correlation (no kernel flip) of `x[N,H,W,C]` with `filters[kh,kw,C,F]`.
pub fn conv2d(x: &Tensor, filters: &Tensor, stride: (usize, usize), padding: Padding) -> Result<Tensor> {
    let g = conv_geometry(x.shape(), filters.shape(), stride, padding)?;
    let xd = x.data();
    let wd = filters.data();
    let mut out = vec![0.0; g.n * g.oh * g.ow * g.f];
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let obase = ((n * g.oh + oi) * g.ow + oj) * g.f;
                let orow = &mut out[obase..obase + g.f];
                for di in 0..g.kh {
                    let Some(ii) = ConvGeometry::src(oi, di, g.sh, g.pad_top, g.h) else {
                        continue;
                    };
                    for dj in 0..g.kw {
                        let Some(jj) = ConvGeometry::src(oj, dj, g.sw, g.pad_left, g.w) else {
                            continue;
                        };
                        let xbase = ((n * g.h + ii) * g.w + jj) * g.c;
                        let wbase = (di * g.kw + dj) * g.c * g.f;
                        for c in 0..g.c {
                            let xv = xd[xbase + c];
                            let wrow = &wd[wbase + c * g.f..wbase + (c + 1) * g.f];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape(), out))
}

/// Adjoint of `x ↦ conv2d(x, filters)` for inputs of shape `input_shape`.
pub fn conv2d_input_adjoint(
    grad: &Tensor,
    filters: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    input_shape: &[usize],
) -> Result<Tensor> {
    let g = conv_geometry(input_shape, filters.shape(), stride, padding)?;
    if grad.shape() != g.output_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_adjoint",
            lhs: grad.shape().to_vec(),
            rhs: g.output_shape(),
        });
    }
    let gd = grad.data();
    let wd = filters.data();
    let mut gx = vec![0.0; g.n * g.h * g.w * g.c];
    for n in 0..g.n {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let obase = ((n * g.oh + oi) * g.ow + oj) * g.f;
                let grow = &gd[obase..obase + g.f];
                for di in 0..g.kh {
                    let Some(ii) = ConvGeometry::src(oi, di, g.sh, g.pad_top, g.h) else {
                        continue;
                    };
                    for dj in 0..g.kw {
                        let Some(jj) = ConvGeometry::src(oj, dj, g.sw, g.pad_left, g.w) else {
                            continue;
                        };
                        let xbase = ((n * g.h + ii) * g.w + jj) * g.c;
                        let wbase = (di * g.kw + dj) * g.c * g.f;
                        for c in 0..g.c {
                            let wrow = &wd[wbase + c * g.f..wbase + (c + 1) * g.f];
                            let s: f64 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            gx[xbase + c] += s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}
