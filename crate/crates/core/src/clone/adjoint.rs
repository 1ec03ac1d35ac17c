//! Reverse traversal with frozen states: computes `Aᵀ v`.

use crate::error::{Error, Result};
use crate::network::eval::{batchnorm_coeffs, stacked_shape};
use crate::network::{DropoutMode, FrozenState, LayerSpec, Network, NodeState, Source};
use crate::numerics::{conv2d_input_adjoint, Tensor};

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// `v` is stacked `[S] ++ output_shape`; returns stacked `[S] ++ input_shape`.
pub(crate) fn run_adjoint(net: &Network, state: &FrozenState, v: Tensor) -> Result<Tensor> {
    state.check_matches(net)?;
    let s = v.shape()[0];
    let n = net.nodes().len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    let mut input_grad: Option<Tensor> = None;
    grads[net.output_index()] = Some(v);

    for &i in net.order().iter().rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &net.nodes()[i];
        let contributions = node_adjoint(net, state, i, g, s).map_err(|e| match e {
            Error::Node { .. } | Error::StateMismatch(_) => e,
            other => Error::node(&node.id, other.to_string()),
        })?;
        for (src, gin) in net.sources(i).iter().zip(contributions) {
            match *src {
                Source::Input => accumulate(&mut input_grad, gin),
                Source::Node(j) => accumulate(&mut grads[j], gin),
            }
        }
    }
    Ok(input_grad.unwrap_or_else(|| {
        let shape = stacked_shape(s, net.input_shape());
        let len = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; len])
    }))
}

fn wrong_state(id: &str) -> Error {
    Error::StateMismatch(format!("node `{id}`: recorded state does not fit the layer"))
}

/// Gradient contribution to each source of node `i`, in source order.
fn node_adjoint(net: &Network, state: &FrozenState, i: usize, g: Tensor, s: usize) -> Result<Vec<Tensor>> {
    let node = &net.nodes()[i];
    let in_shape = net.source_shape(net.sources(i)[0]);
    let len_in: usize = in_shape.iter().product();
    let stacked_in = stacked_shape(s, in_shape);
    let one = |data: Vec<f64>| vec![Tensor::from_parts(stacked_in.clone(), data)];
    let gd = g.data();

    Ok(match &node.layer {
        LayerSpec::Dense { weights, .. } => {
            let (rows, cols) = (weights.rows(), weights.cols());
            let nrows = gd.len() / rows;
            let mut out = vec![0.0; nrows * cols];
            for r in 0..nrows {
                let orow = &mut out[r * cols..(r + 1) * cols];
                for o in 0..rows {
                    let go = gd[r * rows + o];
                    for (a, w) in orow.iter_mut().zip(weights.row(o)) {
                        *a += go * w;
                    }
                }
            }
            one(out)
        }
        LayerSpec::Conv2D {
            filters,
            stride,
            padding,
            ..
        } => {
            let out_shape = net.shape_at(i);
            let merged_out = Tensor::from_parts([&[s * out_shape[0]], &out_shape[1..]].concat(), g.into_data());
            let merged_in = [&[s * in_shape[0]], &in_shape[1..]].concat();
            one(conv2d_input_adjoint(&merged_out, filters, *stride, *padding, &merged_in)?.into_data())
        }
        LayerSpec::Activation { leakiness } => {
            let Some(NodeState::Activation { mask }) = state.state_at(i) else {
                return Err(wrong_state(&node.id));
            };
            let m = mask.data();
            one(gd
                .iter()
                .enumerate()
                .map(|(k, &v)| if m[k % len_in] { v } else { leakiness * v })
                .collect())
        }
        LayerSpec::MaxPool { .. } => {
            let Some(NodeState::MaxPool { argmax }) = state.state_at(i) else {
                return Err(wrong_state(&node.id));
            };
            let idx = argmax.data();
            let len_out = idx.len();
            let mut out = vec![0.0; s * len_in];
            for slice in 0..s {
                for (o, &k) in idx.iter().enumerate() {
                    out[slice * len_in + k] += gd[slice * len_out + o];
                }
            }
            one(out)
        }
        LayerSpec::Dropout { rate, mode } => match mode {
            DropoutMode::Inference => one(g.into_data()),
            DropoutMode::Training { .. } => {
                let Some(NodeState::Dropout { keep }) = state.state_at(i) else {
                    return Err(wrong_state(&node.id));
                };
                let kp = 1.0 - rate;
                let m = keep.data();
                one(gd
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| if m[k % len_in] { v / kp } else { 0.0 })
                    .collect())
            }
        },
        LayerSpec::BatchNormInference {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        } => {
            let (scale, _) = batchnorm_coeffs(gamma, beta, running_mean, running_var, *epsilon);
            let c = scale.len();
            one(gd.iter().enumerate().map(|(k, &v)| v * scale[k % c]).collect())
        }
        LayerSpec::Flatten => one(g.into_data()),
        LayerSpec::Add => {
            let k = net.sources(i).len();
            let mut outs = Vec::with_capacity(k);
            for _ in 1..k {
                outs.push(Tensor::from_parts(stacked_in.clone(), gd.to_vec()));
            }
            outs.push(Tensor::from_parts(stacked_in.clone(), g.into_data()));
            outs
        }
        LayerSpec::Concat { axis } => {
            let shapes: Vec<&[usize]> = net.sources(i).iter().map(|src| net.source_shape(*src)).collect();
            let outer: usize = s * in_shape[..*axis].iter().product::<usize>();
            let chunks: Vec<usize> = shapes.iter().map(|sh| sh[*axis..].iter().product()).collect();
            let mut outs: Vec<Vec<f64>> = chunks.iter().map(|c| Vec::with_capacity(outer * c)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (buf, &c) in outs.iter_mut().zip(&chunks) {
                    buf.extend_from_slice(&gd[pos..pos + c]);
                    pos += c;
                }
            }
            outs.into_iter()
                .zip(&shapes)
                .map(|(d, sh)| Tensor::from_parts(stacked_shape(s, sh), d))
                .collect()
        }
        LayerSpec::Recurrent {
            w_hidden,
            w_input,
            leakiness,
            steps,
            ..
        } => {
            let Some(NodeState::Recurrent { masks }) = state.state_at(i) else {
                return Err(wrong_state(&node.id));
            };
            let hdim = w_hidden.rows();
            let din = w_input.cols();
            let mut out = vec![0.0; s * len_in];
            for slice in 0..s {
                let mut gh = gd[slice * hdim..(slice + 1) * hdim].to_vec();
                for t in (0..*steps).rev() {
                    let m = masks[t].data();
                    let gp: Vec<f64> = gh
                        .iter()
                        .zip(m)
                        .map(|(&v, &keep)| if keep { v } else { leakiness * v })
                        .collect();
                    let gx = &mut out[slice * len_in + t * din..slice * len_in + (t + 1) * din];
                    let mut next = vec![0.0; hdim];
                    for (o, &p) in gp.iter().enumerate() {
                        for (a, w) in gx.iter_mut().zip(w_input.row(o)) {
                            *a += p * w;
                        }
                        for (a, w) in next.iter_mut().zip(w_hidden.row(o)) {
                            *a += p * w;
                        }
                    }
                    gh = next;
                }
            }
            one(out)
        }
    })
}
