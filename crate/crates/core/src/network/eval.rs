//! Stacked evaluation engine.
//!
//! Every pass carries a leading stack axis of `S` slices. Nonlinearity states are
//! either derived from slice 0 and tiled across all slices, or read from a
//! recorded [`FrozenState`]. Plain forward, state recording, frozen replay and
//! the concatenated-batch clone mode are all instances of this one routine.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{conv2d, maxpool_argmax, DenseMatrix, MaskTensor, Tensor};
use crate::rng::keyed_rng;

use super::{DropoutMode, FrozenState, LayerSpec, Network, NodeState, Source};

/// How a frozen pass treats additive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrozenMode {
    /// Keeps biases and batch-norm shifts: computes `A v + b`.
    Affine,
    /// Drops every additive term: computes `A v`.
    Linear,
}

pub(crate) enum StateSource<'a> {
    Derive,
    Frozen(&'a FrozenState),
}

pub(crate) struct Pass<'a> {
    pub mode: FrozenMode,
    pub states: StateSource<'a>,
    pub record: bool,
    /// Replaces the output of one node with a precomputed stacked tensor.
    pub inject: Option<(usize, Tensor)>,
}

pub(crate) struct PassOutput {
    pub output: Tensor,
    pub state: Option<FrozenState>,
}

pub(crate) fn stacked_shape(stack: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(stack);
    s.extend_from_slice(shape);
    s
}

/// Stacks equal-shape tensors along a new leading axis.
pub(crate) fn stack(net_shape: &[usize], items: &[&Tensor]) -> Tensor {
    let mut data = Vec::with_capacity(items.len() * items.first().map_or(0, |t| t.len()));
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::from_parts(stacked_shape(items.len(), net_shape), data)
}

pub(crate) fn unstack(t: Tensor, shape: &[usize]) -> Vec<Tensor> {
    let n: usize = shape.iter().product();
    t.into_data()
        .chunks(n.max(1))
        .map(|c| Tensor::from_parts(shape.to_vec(), c.to_vec()))
        .collect()
}

/// Plain evaluation of `f(x)`.
pub fn forward(net: &Network, x: &Tensor) -> Result<Tensor> {
    net.check_input("forward", x)?;
    let out = run(
        net,
        stack(net.input_shape(), &[x]),
        Pass {
            mode: FrozenMode::Affine,
            states: StateSource::Derive,
            record: false,
            inject: None,
        },
    )?;
    Ok(out.output.reshaped(net.output_shape().to_vec()))
}

/// Evaluates `f(x)` and records the region code plus every feature map.
pub fn record_states(net: &Network, x: &Tensor) -> Result<(Tensor, FrozenState)> {
    net.check_input("record_states", x)?;
    let out = run(
        net,
        stack(net.input_shape(), &[x]),
        Pass {
            mode: FrozenMode::Affine,
            states: StateSource::Derive,
            record: true,
            inject: None,
        },
    )?;
    Ok((
        out.output.reshaped(net.output_shape().to_vec()),
        out.state.expect("recording pass returns a state"),
    ))
}

pub(crate) fn run(net: &Network, input: Tensor, mut pass: Pass<'_>) -> Result<PassOutput> {
    let s = input.shape()[0];
    if let StateSource::Frozen(st) = pass.states {
        st.check_matches(net)?;
    }
    let n = net.nodes().len();
    let mut remaining = vec![0usize; n];
    for i in 0..n {
        for src in net.sources(i) {
            if let Source::Node(j) = *src {
                remaining[j] += 1;
            }
        }
    }
    remaining[net.output_index()] += 1;

    let mut values: Vec<Option<Tensor>> = vec![None; n];
    let mut states: Vec<Option<NodeState>> = vec![None; n];
    let mut features: Vec<Option<Tensor>> = vec![None; if pass.record { n } else { 0 }];

    for &i in net.order() {
        let node = &net.nodes()[i];
        let (value, state) = match pass.inject.take_if(|(k, _)| *k == i) {
            Some((_, t)) => (t, None),
            None => {
                let ins: Vec<&Tensor> = net
                    .sources(i)
                    .iter()
                    .map(|src| match *src {
                        Source::Input => &input,
                        Source::Node(j) => values[j].as_ref().expect("inputs evaluated first"),
                    })
                    .collect();
                let frozen = match pass.states {
                    StateSource::Derive => None,
                    StateSource::Frozen(st) => Some(st.state_at(i)),
                };
                apply(net, i, &ins, s, pass.mode, frozen).map_err(|e| match e {
                    Error::Node { .. } | Error::StateMismatch(_) => e,
                    other => Error::node(&node.id, other.to_string()),
                })?
            }
        };
        for src in net.sources(i) {
            if let Source::Node(j) = *src {
                remaining[j] -= 1;
                if remaining[j] == 0 {
                    values[j] = None;
                }
            }
        }
        if pass.record {
            let shape = net.shape_at(i).to_vec();
            let len: usize = shape.iter().product();
            features[i] = Some(Tensor::from_parts(shape, value.data()[..len].to_vec()));
            states[i] = state;
        }
        values[i] = Some(value);
    }
    let output = values[net.output_index()].take().expect("output evaluated");
    let state = pass.record.then(|| FrozenState {
        node_ids: net.nodes().iter().map(|n| n.id.clone()).collect(),
        states,
        features: features.into_iter().map(|f| f.expect("every node evaluated")).collect(),
        input: Tensor::from_parts(net.input_shape().to_vec(), input.data()[..net.input_len()].to_vec()),
    });
    Ok(PassOutput { output, state })
}

pub(crate) fn dense_rows(x: &[f64], w: &DenseMatrix, bias: Option<&[f64]>) -> Vec<f64> {
    let (rows_out, cols) = (w.rows(), w.cols());
    let nrows = x.len() / cols;
    let mut out = vec![0.0; nrows * rows_out];
    // Weight rows outermost so each is streamed once for all input rows.
    for o in 0..rows_out {
        let wo = w.row(o);
        for r in 0..nrows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mut acc: f64 = wo.iter().zip(xr).map(|(a, b)| a * b).sum();
            if let Some(b) = bias {
                acc += b[o];
            }
            out[r * rows_out + o] = acc;
        }
    }
    out
}

pub(crate) fn batchnorm_coeffs(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma.iter().zip(var).map(|(g, v)| g / (v + eps).sqrt()).collect();
    let shift = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    (scale, shift)
}

pub(crate) fn dropout_keep(seed: u64, node_id: &str, len: usize, rate: f64) -> Vec<bool> {
    let mut rng = keyed_rng(seed, node_id);
    (0..len).map(|_| rng.random::<f64>() >= rate).collect()
}

fn missing_state(id: &str) -> Error {
    Error::StateMismatch(format!("node `{id}`: no recorded state"))
}

/// Returns the mask for a stateful layer: recorded, or derived from slice 0.
fn mask_or<F>(frozen: Option<Option<&NodeState>>, id: &str, derive: F) -> Result<(Vec<bool>, bool)>
where
    F: FnOnce() -> Vec<bool>,
{
    match frozen {
        None => Ok((derive(), true)),
        Some(Some(NodeState::Activation { mask })) | Some(Some(NodeState::Dropout { keep: mask })) => {
            Ok((mask.data().to_vec(), false))
        }
        Some(_) => Err(missing_state(id)),
    }
}

fn apply(
    net: &Network,
    i: usize,
    ins: &[&Tensor],
    s: usize,
    mode: FrozenMode,
    frozen: Option<Option<&NodeState>>,
) -> Result<(Tensor, Option<NodeState>)> {
    let node = &net.nodes()[i];
    let affine = mode == FrozenMode::Affine;
    let out_shape = stacked_shape(s, net.shape_at(i));
    let x = ins[0];
    let item_in = net.source_shape(net.sources(i)[0]);
    let len_in: usize = item_in.iter().product();

    let (data, state) = match &node.layer {
        LayerSpec::Dense { weights, bias } => (dense_rows(x.data(), weights, affine.then_some(bias.as_slice())), None),
        LayerSpec::Conv2D {
            filters,
            bias,
            stride,
            padding,
        } => {
            let merged = Tensor::from_parts(
                [&[s * item_in[0]], &item_in[1..]].concat(),
                x.data().to_vec(),
            );
            let mut y = conv2d(&merged, filters, *stride, *padding)?.into_data();
            if affine {
                let f = bias.len();
                for (k, v) in y.iter_mut().enumerate() {
                    *v += bias[k % f];
                }
            }
            (y, None)
        }
        LayerSpec::Activation { leakiness } => {
            let (mask, derived) = mask_or(frozen, &node.id, || x.data()[..len_in].iter().map(|&v| v >= 0.0).collect())?;
            let y = x
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| if mask[k % len_in] { v } else { leakiness * v })
                .collect();
            let st = derived.then(|| NodeState::Activation {
                mask: MaskTensor::new(item_in.to_vec(), mask).expect("mask length matches input"),
            });
            (y, st)
        }
        LayerSpec::MaxPool {
            ksize,
            stride,
            padding,
        } => {
            let (idx, derived) = match frozen {
                None => {
                    let first = Tensor::from_parts(item_in.to_vec(), x.data()[..len_in].to_vec());
                    (maxpool_argmax(&first, *ksize, *stride, *padding)?.1, true)
                }
                Some(Some(NodeState::MaxPool { argmax })) => (argmax.clone(), false),
                Some(_) => return Err(missing_state(&node.id)),
            };
            let len_out = idx.data().len();
            let mut y = Vec::with_capacity(s * len_out);
            for slice in 0..s {
                let base = slice * len_in;
                y.extend(idx.data().iter().map(|&k| x.data()[base + k]));
            }
            (y, derived.then_some(NodeState::MaxPool { argmax: idx }))
        }
        LayerSpec::Dropout { rate, mode: dmode } => match dmode {
            DropoutMode::Inference => (x.data().to_vec(), None),
            DropoutMode::Training { seed } => {
                let (keep, derived) = mask_or(frozen, &node.id, || dropout_keep(*seed, &node.id, len_in, *rate))?;
                let kp = 1.0 - rate;
                let y = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| if keep[k % len_in] { v / kp } else { 0.0 })
                    .collect();
                let st = derived.then(|| NodeState::Dropout {
                    keep: MaskTensor::new(item_in.to_vec(), keep).expect("mask length matches input"),
                });
                (y, st)
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
            let c = scale.len();
            let y = x
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let ch = k % c;
                    if affine {
                        v * scale[ch] + shift[ch]
                    } else {
                        v * scale[ch]
                    }
                })
                .collect();
            (y, None)
        }
        LayerSpec::Flatten => (x.data().to_vec(), None),
        LayerSpec::Add => {
            let mut y = x.data().to_vec();
            for t in &ins[1..] {
                for (a, b) in y.iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
            (y, None)
        }
        LayerSpec::Concat { axis } => {
            // Stacked axis `axis + 1`: copy one contiguous chunk per input per outer index.
            let outer: usize = s * item_in[..*axis].iter().product::<usize>();
            let chunks: Vec<usize> = net
                .sources(i)
                .iter()
                .map(|src| net.source_shape(*src)[*axis..].iter().product())
                .collect();
            let mut y = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for (t, &c) in ins.iter().zip(&chunks) {
                    y.extend_from_slice(&t.data()[o * c..(o + 1) * c]);
                }
            }
            (y, None)
        }
        LayerSpec::Recurrent {
            w_hidden,
            w_input,
            bias,
            leakiness,
            steps,
        } => {
            let hdim = w_hidden.rows();
            let din = w_input.cols();
            let recorded = match frozen {
                None => None,
                Some(Some(NodeState::Recurrent { masks })) => Some(masks),
                Some(_) => return Err(missing_state(&node.id)),
            };
            let mut h = vec![0.0; s * hdim];
            let mut masks = Vec::with_capacity(*steps);
            for t in 0..*steps {
                let mut pre = vec![0.0; s * hdim];
                for slice in 0..s {
                    let hs = &h[slice * hdim..(slice + 1) * hdim];
                    let xt = &x.data()[slice * len_in + t * din..slice * len_in + (t + 1) * din];
                    for o in 0..hdim {
                        let rec: f64 = w_hidden.row(o).iter().zip(hs).map(|(a, b)| a * b).sum();
                        let inp: f64 = w_input.row(o).iter().zip(xt).map(|(a, b)| a * b).sum();
                        let mut p = rec + inp;
                        if affine {
                            p += bias[o];
                        }
                        pre[slice * hdim + o] = p;
                    }
                }
                let mask: Vec<bool> = match recorded {
                    Some(m) => m[t].data().to_vec(),
                    None => pre[..hdim].iter().map(|&v| v >= 0.0).collect(),
                };
                for (k, v) in pre.iter().enumerate() {
                    h[k] = if mask[k % hdim] { *v } else { leakiness * v };
                }
                if recorded.is_none() {
                    masks.push(MaskTensor::new(vec![hdim], mask).expect("mask length matches hidden size"));
                }
            }
            let st = recorded.is_none().then_some(NodeState::Recurrent { masks });
            (h, st)
        }
    };
    debug_assert_eq!(data.len(), out_shape.iter().product::<usize>());
    Ok((Tensor::from_parts(out_shape, data), state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Node;
    use crate::numerics::Padding;

    fn identity_act(eta: f64) -> Network {
        Network::new(
            vec![2],
            vec![
                Node::new(
                    "d",
                    LayerSpec::Dense {
                        weights: DenseMatrix::identity(2),
                        bias: vec![0.0; 2],
                    },
                    &["input"],
                ),
                Node::new("a", LayerSpec::Activation { leakiness: eta }, &["d"]),
            ],
            "a",
        )
        .unwrap()
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn relu_positive_orthant() {
        assert_eq!(forward(&identity_act(0.0), &t(&[1.0, 2.0])).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn absolute_value() {
        assert_eq!(forward(&identity_act(-1.0), &t(&[-3.0, 2.0])).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_mlp() {
        let w1 = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 1.0]]).unwrap();
        let w2 = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap();
        let net = Network::new(
            vec![2],
            vec![
                Node::new("l1", LayerSpec::Dense { weights: w1, bias: vec![0.5, -1.0] }, &["input"]),
                Node::new("a1", LayerSpec::Activation { leakiness: 0.1 }, &["l1"]),
                Node::new("l2", LayerSpec::Dense { weights: w2, bias: vec![0.0, 1.0] }, &["a1"]),
            ],
            "l2",
        )
        .unwrap();
        // h = W1 (1, 1) + b1 = (-0.5, 0.5); act -> (-0.05, 0.5)
        // y = W2 (-0.05, 0.5) + b2 = (0.4, 2.55)
        let y = forward(&net, &t(&[1.0, 1.0])).unwrap();
        assert!((y.data()[0] - 0.4).abs() < 1e-15);
        assert!((y.data()[1] - 2.55).abs() < 1e-15);
    }

    #[test]
    fn sign_mask_and_boundary() {
        let net = identity_act(0.0);
        let (_, st) = record_states(&net, &t(&[1.0, -2.0])).unwrap();
        let Some(NodeState::Activation { mask }) = st.state("a") else { panic!() };
        assert_eq!(mask.data(), &[true, false]);
        let (_, st) = record_states(&net, &t(&[0.0, -0.0])).unwrap();
        let Some(NodeState::Activation { mask }) = st.state("a") else { panic!() };
        assert_eq!(mask.data(), &[true, true]);
    }

    #[test]
    fn maxpool_records_argmax() {
        let net = Network::new(
            vec![1, 2, 2, 1],
            vec![Node::new(
                "p",
                LayerSpec::MaxPool {
                    ksize: (2, 2),
                    stride: (2, 2),
                    padding: Padding::Valid,
                },
                &["input"],
            )],
            "p",
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, st) = record_states(&net, &x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let Some(NodeState::MaxPool { argmax }) = st.state("p") else { panic!() };
        assert_eq!(argmax.data(), &[3]);
    }

    #[test]
    fn recurrent_single_step_matches_dense_activation() {
        let wi = DenseMatrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.9]]).unwrap();
        let b = vec![0.05, -0.2];
        let rnn = Network::new(
            vec![1, 3],
            vec![Node::new(
                "r",
                LayerSpec::Recurrent {
                    w_hidden: DenseMatrix::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.2]]).unwrap(),
                    w_input: wi.clone(),
                    bias: b.clone(),
                    leakiness: 0.2,
                    steps: 1,
                },
                &["input"],
            )],
            "r",
        )
        .unwrap();
        let mlp = Network::new(
            vec![3],
            vec![
                Node::new("d", LayerSpec::Dense { weights: wi, bias: b }, &["input"]),
                Node::new("a", LayerSpec::Activation { leakiness: 0.2 }, &["d"]),
            ],
            "a",
        )
        .unwrap();
        let x = [0.4, -0.8, 1.5];
        let yr = forward(&rnn, &Tensor::new(vec![1, 3], x.to_vec()).unwrap()).unwrap();
        let ym = forward(&mlp, &t(&x)).unwrap();
        assert_eq!(yr.data(), ym.data());
    }

    #[test]
    fn training_dropout_is_deterministic() {
        let net = Network::new(
            vec![64],
            vec![Node::new(
                "drop",
                LayerSpec::Dropout {
                    rate: 0.5,
                    mode: DropoutMode::Training { seed: 9 },
                },
                &["input"],
            )],
            "drop",
        )
        .unwrap();
        let x = Tensor::filled(&[64], 1.0).unwrap();
        let a = forward(&net, &x).unwrap();
        let b = forward(&net, &x).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = a.data().iter().filter(|&&v| v == 2.0).count();
        assert!(kept > 10 && kept < 54, "{kept}");
    }

    #[test]
    fn recorded_features_match_forward() {
        let net = identity_act(0.3);
        let x = t(&[-1.0, 2.0]);
        let (y, st) = record_states(&net, &x).unwrap();
        assert_eq!(&y, st.feature_map("a").unwrap());
        assert_eq!(st.input(), &x);
        assert_eq!(y, forward(&net, &x).unwrap());
    }
}
