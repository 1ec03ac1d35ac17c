//! Subspace iteration and Monte-Carlo estimators against dense decompositions.

mod common;

use clonejvp::affine::materialize_affine_direct;
use clonejvp::network::record_states;
use clonejvp::numerics::{dense_eig_symmetric, dense_svd, matmul, DenseMatrix};
use clonejvp::spectral::{frobenius_norm_mc, top_k_eigen, top_k_svd, trace_mc, LinearProbe, SpectralOptions};
use common::*;

fn region_matrix(net: &clonejvp::Network, x: &clonejvp::Tensor) -> DenseMatrix {
    let (_, st) = record_states(net, x).unwrap();
    materialize_affine_direct(net, &st).unwrap().a
}

#[test]
fn eigen_matches_dense_on_psd_networks() {
    let opts = SpectralOptions { tol: 1e-10, max_iter: 200, seed: 3 };
    for seed in 0..12u64 {
        let d = 8 + (seed as usize * 5) % 25;
        let net = psd_network(seed, d, d);
        let x = gaussian(&mut rng(seed + 100), &[d]);
        let a = region_matrix(&net, &x);
        let (vals, _) = dense_eig_symmetric(&a).unwrap();
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let res = top_k_eigen(&probe, 3, &opts).unwrap();
        assert_eq!(res.rop_calls, 3 * (res.iterations + 1));
        assert_eq!(res.lop_calls, 0);
        assert!(res.iterations <= 200);
        for i in 0..3 {
            assert!(scalar_rel(res.values[i], vals[i]) <= 1e-6, "seed {seed} i {i}: {} vs {}", res.values[i], vals[i]);
        }
    }
}

#[test]
fn svd_matches_dense_on_region_matrices() {
    let opts = SpectralOptions { tol: 1e-10, max_iter: 500, seed: 5 };
    for seed in 0..12u64 {
        let d_in = 6 + (seed as usize * 7) % 27;
        let d_out = 6 + (seed as usize * 11) % 27;
        let net = region_mlp(seed, d_in, 24, d_out);
        let x = gaussian(&mut rng(seed + 7), &[d_in]);
        let a = region_matrix(&net, &x);
        let (_, s, _) = dense_svd(&a).unwrap();
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let res = top_k_svd(&probe, 3, &opts).unwrap();
        assert_eq!(res.rop_calls, 3 * (res.iterations + 1));
        assert_eq!(res.lop_calls, 3 * res.iterations);
        for i in 0..3 {
            assert!(scalar_rel(res.values[i], s[i]) <= 1e-6, "seed {seed} i {i}: {} vs {}", res.values[i], s[i]);
        }
    }
}

#[test]
fn singular_vectors_satisfy_the_relation() {
    let mut r = rng(1);
    let a = gaussian_matrix(&mut r, 12, 9);
    let probe = LinearProbe::from_matrix(a.clone()).unwrap();
    let res = top_k_svd(&probe, 2, &SpectralOptions::default()).unwrap();
    assert!(res.converged);
    let av = matmul(&a, &res.right_vectors).unwrap();
    let us = matmul(&res.left_vectors, &DenseMatrix::from_diag(&res.values)).unwrap();
    assert!(av.sub(&us).unwrap().frobenius_norm() <= 1e-7);
}

#[test]
fn estimators_bracket_exact_values() {
    for seed in 0..4u64 {
        let d = 10 + seed as usize;
        let net = region_mlp(seed, d, 16, d);
        let x = gaussian(&mut rng(seed), &[d]);
        let a = region_matrix(&net, &x);
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let fro = frobenius_norm_mc(&probe, 20_000, seed).unwrap();
        assert!((fro.estimate - a.frobenius_norm()).abs() <= 4.0 * fro.standard_error);
        let tr = trace_mc(&probe, 20_000, seed).unwrap();
        assert!((tr.estimate - a.trace()).abs() <= 4.0 * tr.standard_error);
        assert_eq!(probe.rop_calls(), 40_000);
    }
}

#[test]
fn estimators_are_seed_deterministic() {
    let net = region_mlp(2, 8, 8, 8);
    let x = gaussian(&mut rng(2), &[8]);
    let probe = LinearProbe::from_network(&net, &x).unwrap();
    assert_eq!(trace_mc(&probe, 100, 9).unwrap(), trace_mc(&probe, 100, 9).unwrap());
    assert_eq!(frobenius_norm_mc(&probe, 100, 9).unwrap(), frobenius_norm_mc(&probe, 100, 9).unwrap());
}

#[test]
fn mismatched_adjoint_is_rejected() {
    let bad = LinearProbe::new(3, 3, |u: &[f64]| Ok(u.to_vec()), |v: &[f64]| Ok(v.iter().map(|x| 2.0 * x).collect()));
    assert!(matches!(bad, Err(clonejvp::Error::AdjointCheck(_))));
}
