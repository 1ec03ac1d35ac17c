//! Explicit per-region affine maps `f(v) = A v + b` for small networks.
//!
//! [`materialize_affine_direct`] composes dense per-layer matrices built with
//! their own index arithmetic, independent of the evaluation engine.
//! [`materialize_affine_via_rop`] probes the engine with canonical basis vectors.

use crate::clone::{frozen_forward, jvp_batch_with_state, FrozenMode};
use crate::error::{Error, Result};
use crate::network::eval::batchnorm_coeffs;
use crate::network::{record_states, DropoutMode, FrozenState, LayerSpec, Network, NodeState, Source};
use crate::numerics::{matmul, DenseMatrix, Padding, Tensor};

/// Default cap on `K · D` entries of a materialized slope matrix.
pub const DEFAULT_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// Slope, `K × D`.
    pub a: DenseMatrix,
    /// Offset, length `K`.
    pub b: Vec<f64>,
}

impl AffineMap {
    /// `A v + b` on a flattened input.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.a.matvec(v)?;
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        Ok(y)
    }

    pub fn input_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.rows()
    }
}

fn check_budget(net: &Network, budget: usize) -> Result<()> {
    let required = net.input_len().saturating_mul(net.output_len());
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(())
}

pub fn materialize_affine_direct(net: &Network, state: &FrozenState) -> Result<AffineMap> {
    materialize_affine_direct_with_budget(net, state, DEFAULT_BUDGET)
}

/// Composes `A = Q^L W^L ⋯ Q^1 W^1` and the matching nested bias sum over the DAG.
pub fn materialize_affine_direct_with_budget(net: &Network, state: &FrozenState, budget: usize) -> Result<AffineMap> {
    check_budget(net, budget)?;
    state.check_matches(net)?;
    let d = net.input_len();
    let n = net.nodes().len();
    let mut maps: Vec<Option<(DenseMatrix, Vec<f64>)>> = vec![None; n];
    let input_map = (DenseMatrix::identity(d), vec![0.0; d]);
    for &i in net.order() {
        let local = local_map(net, state, i)?;
        let len_out: usize = net.shape_at(i).iter().product();
        let mut a = DenseMatrix::zeros(len_out, d);
        let mut b = local.bias;
        for (src, l) in net.sources(i).iter().zip(&local.mats) {
            let (sa, sb) = match *src {
                Source::Input => &input_map,
                Source::Node(j) => maps[j].as_ref().expect("sources precede users"),
            };
            let la = matmul(l, sa)?;
            for (x, y) in a.data_mut().iter_mut().zip(la.data()) {
                *x += y;
            }
            for (x, y) in b.iter_mut().zip(l.matvec(sb)?) {
                *x += y;
            }
        }
        maps[i] = Some((a, b));
    }
    let (a, b) = maps[net.output_index()].take().expect("output evaluated");
    Ok(AffineMap { a, b })
}

pub fn materialize_affine_via_rop(net: &Network, x: &Tensor) -> Result<AffineMap> {
    materialize_affine_via_rop_with_budget(net, x, DEFAULT_BUDGET)
}

/// Columns `A e_d` from one batched linear pass, and `b = f_x(0)`.
pub fn materialize_affine_via_rop_with_budget(net: &Network, x: &Tensor, budget: usize) -> Result<AffineMap> {
    check_budget(net, budget)?;
    let (_, state) = record_states(net, x)?;
    let a = jvp_batch_with_state(net, &state, &DenseMatrix::identity(net.input_len()))?;
    let zero = Tensor::zeros(net.input_shape())?;
    let b = frozen_forward(net, &state, &zero, FrozenMode::Affine)?.into_data();
    Ok(AffineMap { a, b })
}

/// Whether `x` and `y` share every activation mask and pooling index.
pub fn region_equal(net: &Network, x: &Tensor, y: &Tensor) -> Result<bool> {
    let (_, sx) = record_states(net, x)?;
    let (_, sy) = record_states(net, y)?;
    Ok(sx.same_region(&sy))
}

/// A node's own affine action: one matrix per source plus an additive term.
struct LocalMap {
    mats: Vec<DenseMatrix>,
    bias: Vec<f64>,
}

fn diagonal(q: impl Iterator<Item = f64>) -> DenseMatrix {
    DenseMatrix::from_diag(&q.collect::<Vec<_>>())
}

/// Output extent and leading padding of one spatial axis.
fn axis_geometry(n: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((n - k) / s + 1, 0),
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            (out, total / 2)
        }
    }
}

fn local_map(net: &Network, state: &FrozenState, i: usize) -> Result<LocalMap> {
    let node = &net.nodes()[i];
    let in_shape = net.source_shape(net.sources(i)[0]);
    let out_shape = net.shape_at(i);
    let len_in: usize = in_shape.iter().product();
    let len_out: usize = out_shape.iter().product();
    let mismatch = || Error::StateMismatch(format!("node `{}`: missing recorded state", node.id));
    let single = |m: DenseMatrix, bias: Vec<f64>| LocalMap { mats: vec![m], bias };

    Ok(match &node.layer {
        LayerSpec::Dense { weights, bias } => {
            let (ro, ci) = (weights.rows(), weights.cols());
            let nrows = len_in / ci;
            let mut m = DenseMatrix::zeros(len_out, len_in);
            let mut c = vec![0.0; len_out];
            for r in 0..nrows {
                for o in 0..ro {
                    c[r * ro + o] = bias[o];
                    for k in 0..ci {
                        m.set(r * ro + o, r * ci + k, weights.get(o, k));
                    }
                }
            }
            single(m, c)
        }
        LayerSpec::Conv2D {
            filters,
            bias,
            stride,
            padding,
        } => {
            let [nb, h, w, ch] = in_shape[..] else { unreachable!() };
            let fs = filters.shape();
            let (kh, kw, nf) = (fs[0], fs[1], fs[3]);
            let (oh, pt) = axis_geometry(h, kh, stride.0, *padding);
            let (ow, pl) = axis_geometry(w, kw, stride.1, *padding);
            let mut m = DenseMatrix::zeros(len_out, len_in);
            let mut c = vec![0.0; len_out];
            for b in 0..nb {
                for oi in 0..oh {
                    for oj in 0..ow {
                        for f in 0..nf {
                            let row = ((b * oh + oi) * ow + oj) * nf + f;
                            c[row] = bias[f];
                            for di in 0..kh {
                                let ii = (oi * stride.0 + di) as isize - pt as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for dj in 0..kw {
                                    let jj = (oj * stride.1 + dj) as isize - pl as isize;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    for cc in 0..ch {
                                        let col = ((b * h + ii as usize) * w + jj as usize) * ch + cc;
                                        let wv = filters.data()[((di * kw + dj) * ch + cc) * nf + f];
                                        m.set(row, col, m.get(row, col) + wv);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            single(m, c)
        }
        LayerSpec::Activation { leakiness } => {
            let Some(NodeState::Activation { mask }) = state.state_at(i) else {
                return Err(mismatch());
            };
            single(
                diagonal(mask.data().iter().map(|&k| if k { 1.0 } else { *leakiness })),
                vec![0.0; len_out],
            )
        }
        LayerSpec::MaxPool { .. } => {
            let Some(NodeState::MaxPool { argmax }) = state.state_at(i) else {
                return Err(mismatch());
            };
            let mut m = DenseMatrix::zeros(len_out, len_in);
            for (o, &k) in argmax.data().iter().enumerate() {
                m.set(o, k, 1.0);
            }
            single(m, vec![0.0; len_out])
        }
        LayerSpec::Dropout { rate, mode } => match mode {
            DropoutMode::Inference => single(DenseMatrix::identity(len_in), vec![0.0; len_out]),
            DropoutMode::Training { .. } => {
                let Some(NodeState::Dropout { keep }) = state.state_at(i) else {
                    return Err(mismatch());
                };
                let kp = 1.0 - rate;
                single(
                    diagonal(keep.data().iter().map(|&k| if k { 1.0 / kp } else { 0.0 })),
                    vec![0.0; len_out],
                )
            }
        },
        LayerSpec::BatchNormInference {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        } => {
            let (scale, shift) = batchnorm_coeffs(gamma, beta, running_mean, running_var, *epsilon);
            let nc = scale.len();
            single(
                diagonal((0..len_in).map(|k| scale[k % nc])),
                (0..len_out).map(|k| shift[k % nc]).collect(),
            )
        }
        LayerSpec::Flatten => single(DenseMatrix::identity(len_in), vec![0.0; len_out]),
        LayerSpec::Add => LocalMap {
            mats: vec![DenseMatrix::identity(len_in); net.sources(i).len()],
            bias: vec![0.0; len_out],
        },
        LayerSpec::Concat { axis } => {
            let shapes: Vec<&[usize]> = net.sources(i).iter().map(|s| net.source_shape(*s)).collect();
            let outer: usize = out_shape[..*axis].iter().product();
            let chunks: Vec<usize> = shapes.iter().map(|s| s[*axis..].iter().product()).collect();
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            let mut mats = Vec::with_capacity(shapes.len());
            for (sh, &c) in shapes.iter().zip(&chunks) {
                let mut m = DenseMatrix::zeros(len_out, sh.iter().product());
                for o in 0..outer {
                    for e in 0..c {
                        m.set(o * total + offset + e, o * c + e, 1.0);
                    }
                }
                offset += c;
                mats.push(m);
            }
            LocalMap {
                mats,
                bias: vec![0.0; len_out],
            }
        }
        LayerSpec::Recurrent {
            w_hidden,
            w_input,
            bias,
            leakiness,
            steps,
        } => {
            let Some(NodeState::Recurrent { masks }) = state.state_at(i) else {
                return Err(mismatch());
            };
            let hdim = w_hidden.rows();
            let din = w_input.cols();
            let mut a = DenseMatrix::zeros(hdim, len_in);
            let mut c = vec![0.0; hdim];
            for t in 0..*steps {
                // Input injection W_in S_t, where S_t selects x_t.
                let mut inject = DenseMatrix::zeros(hdim, len_in);
                for o in 0..hdim {
                    for k in 0..din {
                        inject.set(o, t * din + k, w_input.get(o, k));
                    }
                }
                let q = diagonal(masks[t].data().iter().map(|&k| if k { 1.0 } else { *leakiness }));
                let mut pre = matmul(w_hidden, &a)?;
                for (x, y) in pre.data_mut().iter_mut().zip(inject.data()) {
                    *x += y;
                }
                a = matmul(&q, &pre)?;
                let mut cb = w_hidden.matvec(&c)?;
                for (x, y) in cb.iter_mut().zip(bias) {
                    *x += y;
                }
                c = q.matvec(&cb)?;
            }
            single(a, c)
        }
    })
}
