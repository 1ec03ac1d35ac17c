#![allow(dead_code)]

use clonejvp::affine::region_equal;
use clonejvp::clone::{frozen_forward, FrozenMode};
use clonejvp::fixtures::Builder;
use clonejvp::network::{FrozenState, LayerSpec, Network, Node, INPUT_ID};
use clonejvp::numerics::{rel_err, DenseMatrix, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::new(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn rel(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    rel_err(a.data(), b.data())
}

pub fn matrix_rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    rel_err(a.data(), b.data())
}

/// Relative error of two scalars, `0` when both vanish.
pub fn scalar_rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Weight JVP by perturbing one weight at a time through the frozen affine map.
///
/// With states fixed the output is affine in every weight, so a unit step gives
/// the exact partial derivative column.
pub fn weight_jvp_oracle(net: &Network, state: &FrozenState, node: &str, direction: &Tensor) -> Tensor {
    let x = state.input();
    let base = frozen_forward(net, state, x, FrozenMode::Affine).unwrap();
    let w = match &net.node(node).unwrap().layer {
        LayerSpec::Dense { weights, .. } => Tensor::new(vec![weights.rows(), weights.cols()], weights.data().to_vec()).unwrap(),
        LayerSpec::Conv2D { filters, .. } => filters.clone(),
        _ => panic!("not parametric"),
    };
    let mut acc = vec![0.0; base.len()];
    for j in 0..w.len() {
        let dj = direction.data()[j];
        if dj == 0.0 {
            continue;
        }
        let mut wj = w.clone();
        wj.data_mut()[j] += 1.0;
        let perturbed = net.with_weights(node, &wj).unwrap();
        let yj = frozen_forward(&perturbed, state, x, FrozenMode::Affine).unwrap();
        for (a, (p, b)) in acc.iter_mut().zip(yj.data().iter().zip(base.data())) {
            *a += dj * (p - b);
        }
    }
    Tensor::new(base.shape().to_vec(), acc).unwrap()
}

/// `Dense(M, b) → ReLU → Dense(Mᵀ, 0)`: every region matrix is `Mᵀ Q M`, symmetric PSD.
pub fn psd_network(seed: u64, d: usize, h: usize) -> Network {
    let mut r = rng(seed);
    let m = gaussian_matrix(&mut r, h, d);
    let b: Vec<f64> = (0..h).map(|_| r.random_range(-0.5..0.5)).collect();
    Network::new(
        vec![d],
        vec![
            Node::new("enc", LayerSpec::Dense { weights: m.clone(), bias: b }, &[INPUT_ID]),
            Node::new("relu", LayerSpec::Activation { leakiness: 0.0 }, &["enc"]),
            Node::new(
                "dec",
                LayerSpec::Dense {
                    weights: m.transpose(),
                    bias: vec![0.0; d],
                },
                &["relu"],
            ),
        ],
        "dec",
    )
    .unwrap()
}

/// Leaky MLP `d_in → hidden → d_out`; its region matrices are generic.
pub fn region_mlp(seed: u64, d_in: usize, hidden: usize, d_out: usize) -> Network {
    let mut b = Builder::new(seed);
    b.dense("fc1", INPUT_ID, hidden, d_in)
        .act("act1", "fc1", 0.3)
        .dense("fc2", "act1", hidden, hidden)
        .act("act2", "fc2", 0.1)
        .dense("out", "act2", d_out, hidden);
    b.build(vec![d_in], "out").unwrap()
}

/// Largest step (to bisection precision) that keeps `x + ε u` in the region of `x`.
pub fn region_step(net: &Network, x: &Tensor, u: &Tensor) -> Option<f64> {
    let moved = |eps: f64| x.add(&u.scale(eps)).unwrap();
    if region_equal(net, x, &moved(1.0)).unwrap() {
        return Some(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if region_equal(net, x, &moved(mid)).unwrap() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo > 0.0).then_some(lo)
}
