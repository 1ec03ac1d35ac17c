//! Jacobian-vector and vector-Jacobian products through frozen ("cloned") passes.
//!
//! Within the region of `x` the network is `f(v) = A v + b`. Replaying the
//! forward pass with the recorded states of `x` evaluates that affine map on
//! any `v`; dropping every additive term evaluates `A v` directly.

mod adjoint;

use crate::error::{Error, Result};
use crate::network::eval::{self, stack, stacked_shape, unstack, Pass, StateSource};
use crate::network::{record_states, FrozenState, LayerSpec, Network, Source};
use crate::numerics::{conv2d, DenseMatrix, Tensor};

pub use crate::network::FrozenMode;

fn frozen_pass(
    net: &Network,
    state: &FrozenState,
    stacked: Tensor,
    mode: FrozenMode,
    inject: Option<(usize, Tensor)>,
) -> Result<Tensor> {
    Ok(eval::run(
        net,
        stacked,
        Pass {
            mode,
            states: StateSource::Frozen(state),
            record: false,
            inject,
        },
    )?
    .output)
}

/// Evaluates the network on `v` with every nonlinearity frozen to the state of `x`.
pub fn frozen_forward(net: &Network, state: &FrozenState, v: &Tensor, mode: FrozenMode) -> Result<Tensor> {
    net.check_input("frozen_forward", v)?;
    let out = frozen_pass(net, state, stack(net.input_shape(), &[v]), mode, None)?;
    Ok(out.reshaped(net.output_shape().to_vec()))
}

/// Frozen pass over several inputs at once, stacked along a leading axis.
pub fn frozen_forward_batch(net: &Network, state: &FrozenState, vs: &[&Tensor], mode: FrozenMode) -> Result<Vec<Tensor>> {
    if vs.is_empty() {
        return Ok(Vec::new());
    }
    for v in vs {
        net.check_input("frozen_forward_batch", v)?;
    }
    let out = frozen_pass(net, state, stack(net.input_shape(), vs), mode, None)?;
    Ok(unstack(out, net.output_shape()))
}

/// `A u` for the region recorded in `state`.
pub fn jvp_with_state(net: &Network, state: &FrozenState, u: &Tensor) -> Result<Tensor> {
    frozen_forward(net, state, u, FrozenMode::Linear)
}

/// `Rop(f, x, u) = A_ω(x) u`: one recording pass plus one linear frozen pass.
pub fn jvp_input(net: &Network, x: &Tensor, u: &Tensor) -> Result<Tensor> {
    net.check_input("jvp_input", u)?;
    let (_, state) = record_states(net, x)?;
    jvp_with_state(net, &state, u)
}

/// `f_x(u) − f_x(0)` with two affine frozen passes; agrees with [`jvp_input`].
pub fn jvp_input_two_pass(net: &Network, x: &Tensor, u: &Tensor) -> Result<Tensor> {
    net.check_input("jvp_input", u)?;
    let (_, state) = record_states(net, x)?;
    let zero = Tensor::zeros(net.input_shape())?;
    let outs = frozen_forward_batch(net, &state, &[u, &zero], FrozenMode::Affine)?;
    outs[0].sub(&outs[1])
}

/// `Aᵀ v` for the region recorded in `state`.
pub fn vjp_with_state(net: &Network, state: &FrozenState, v: &Tensor) -> Result<Tensor> {
    net.check_output("vjp_input", v)?;
    let g = adjoint::run_adjoint(net, state, stack(net.output_shape(), &[v]))?;
    Ok(g.reshaped(net.input_shape().to_vec()))
}

/// Several `Aᵀ v` products in one reverse traversal.
pub fn vjp_batch_with_state(net: &Network, state: &FrozenState, vs: &[&Tensor]) -> Result<Vec<Tensor>> {
    if vs.is_empty() {
        return Ok(Vec::new());
    }
    for v in vs {
        net.check_output("vjp_batch", v)?;
    }
    let g = adjoint::run_adjoint(net, state, stack(net.output_shape(), vs))?;
    Ok(unstack(g, net.input_shape()))
}

/// `Lop(f, x, v) = A_ω(x)ᵀ v`.
pub fn vjp_input(net: &Network, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    net.check_output("vjp_input", v)?;
    let (_, state) = record_states(net, x)?;
    vjp_with_state(net, &state, v)
}

/// JVP with respect to the weights of a dense or convolutional node.
///
/// The node's pre-activation is recomputed with weights `direction` and zero
/// bias on its recorded input, then pushed through the frozen downstream
/// graph in linear mode.
pub fn jvp_weight_with_state(net: &Network, state: &FrozenState, node_id: &str, direction: &Tensor) -> Result<Tensor> {
    state.check_matches(net)?;
    let i = net
        .node_index(node_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown node `{node_id}`")))?;
    let layer = &net.nodes()[i].layer;
    let expected = layer
        .weight_shape()
        .ok_or_else(|| Error::node(node_id, format!("{} layer has no weight parameter", layer.type_name())))?;
    if direction.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "jvp_weight",
            lhs: direction.shape().to_vec(),
            rhs: expected,
        });
    }
    let z = match net.sources(i)[0] {
        Source::Input => state.input(),
        Source::Node(j) => state.feature_at(j),
    };
    let pre = match layer {
        LayerSpec::Dense { .. } => {
            let u = DenseMatrix::new(expected[0], expected[1], direction.data().to_vec())?;
            eval::dense_rows(z.data(), &u, None)
        }
        LayerSpec::Conv2D { stride, padding, .. } => conv2d(z, direction, *stride, *padding)?.into_data(),
        _ => unreachable!("weight_shape is only defined for dense and conv2d"),
    };
    let injected = Tensor::from_parts(stacked_shape(1, net.shape_at(i)), pre);
    let zero = Tensor::zeros(net.input_shape())?;
    let out = frozen_pass(
        net,
        state,
        stack(net.input_shape(), &[&zero]),
        FrozenMode::Linear,
        Some((i, injected)),
    )?;
    Ok(out.reshaped(net.output_shape().to_vec()))
}

pub fn jvp_weight(net: &Network, x: &Tensor, node_id: &str, direction: &Tensor) -> Result<Tensor> {
    let (_, state) = record_states(net, x)?;
    jvp_weight_with_state(net, &state, node_id, direction)
}

fn check_directions(net: &Network, directions: &DenseMatrix) -> Result<()> {
    if directions.rows() != net.input_len() {
        return Err(Error::ShapeMismatch {
            op: "jvp_batch",
            lhs: vec![directions.rows(), directions.cols()],
            rhs: vec![net.input_len()],
        });
    }
    Ok(())
}

/// Columns of `directions` (`D × m`) mapped through `A`, giving `K × m`.
pub fn jvp_batch_with_state(net: &Network, state: &FrozenState, directions: &DenseMatrix) -> Result<DenseMatrix> {
    check_directions(net, directions)?;
    let m = directions.cols();
    let k = net.output_len();
    if m == 0 {
        return Ok(DenseMatrix::zeros(k, 0));
    }
    // Stack columns as slices: row-major `m × D` is the transpose.
    let stacked = Tensor::from_parts(stacked_shape(m, net.input_shape()), directions.transpose().into_data());
    let out = frozen_pass(net, state, stacked, FrozenMode::Linear, None)?;
    Ok(DenseMatrix::new(m, k, out.into_data())?.transpose())
}

/// [`jvp_input`] for many directions sharing one recorded state.
pub fn jvp_batch(net: &Network, x: &Tensor, directions: &DenseMatrix) -> Result<DenseMatrix> {
    check_directions(net, directions)?;
    let (_, state) = record_states(net, x)?;
    jvp_batch_with_state(net, &state, directions)
}

/// One batched pass over `[x, branches…]`.
///
/// Each stateful layer derives its state from the leading `x` slice and tiles
/// it across the branches. Returns `f(x)` and the per-branch outputs `f_x(b)`.
pub fn concat_clone_pass(net: &Network, x: &Tensor, branches: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
    net.check_input("concat_clone_forward", x)?;
    for b in branches {
        net.check_input("concat_clone_forward", b)?;
    }
    let mut items = Vec::with_capacity(branches.len() + 1);
    items.push(x);
    items.extend_from_slice(branches);
    let out = eval::run(
        net,
        stack(net.input_shape(), &items),
        Pass {
            mode: FrozenMode::Affine,
            states: StateSource::Derive,
            record: false,
            inject: None,
        },
    )?;
    let mut outs = unstack(out.output, net.output_shape());
    let primal = outs.remove(0);
    Ok((primal, outs))
}

/// Per-branch outputs of [`concat_clone_pass`].
pub fn concat_clone_forward(net: &Network, x: &Tensor, branches: &[&Tensor]) -> Result<Vec<Tensor>> {
    Ok(concat_clone_pass(net, x, branches)?.1)
}

/// `Rop` through the concatenated-batch mode: `f_x(u) − f_x(0)` from one pass over `[x, u, 0]`.
pub fn jvp_concat(net: &Network, x: &Tensor, u: &Tensor) -> Result<Tensor> {
    let zero = Tensor::zeros(net.input_shape())?;
    let outs = concat_clone_forward(net, x, &[u, &zero])?;
    outs[0].sub(&outs[1])
}
