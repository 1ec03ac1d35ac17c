//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use clonejvp::affine::{materialize_affine_direct, materialize_affine_via_rop};
use clonejvp::bench::{run_benchmark, run_strategy, summarize, time_runs, BenchConfig, Strategy};
use clonejvp::clone::{concat_clone_pass, jvp_input, jvp_weight, jvp_with_state, vjp_with_state};
use clonejvp::fixtures::{generate, random_fixture, write_fixture, Arch, Builder};
use clonejvp::io::{decode_tensor, encode_tensor, parse_network, write_network};
use clonejvp::network::{forward, record_states, INPUT_ID};
use clonejvp::numerics::{dense_eig_symmetric, dense_svd, rel_err, Tensor};
use clonejvp::spectral::{frobenius_norm_mc, top_k_eigen, top_k_svd, trace_mc, LinearProbe, SpectralOptions};
use common::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut max_in, mut max_out) = (0.0f64, 0, 0);
    let n = 250u64;
    for seed in 0..n {
        let fx = random_fixture(seed).map_err(|e| e.to_string())?;
        ensure(fx.net.input_len() <= 256 && fx.net.output_len() <= 64, || format!("seed {seed}: dims out of range"))?;
        max_in = max_in.max(fx.net.input_len());
        max_out = max_out.max(fx.net.output_len());
        let (_, st) = record_states(&fx.net, &fx.x).unwrap();
        let a = materialize_affine_direct(&fx.net, &st).unwrap().a;
        let expected = a.matvec(fx.u.data()).unwrap();
        let got = jvp_input(&fx.net, &fx.x, &fx.u).unwrap();
        let e = rel_err(got.data(), &expected);
        worst = worst.max(e);
        ensure(e <= 1e-9, || format!("seed {seed}: rel err {e:.3e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!("{n} nets, max dims {max_in}->{max_out}, worst rel err {worst:.2e}, {secs:.2}s"))
}

fn cpa_exactness() -> Outcome {
    let (mut found, mut seed, mut worst) = (0, 0u64, 0.0f64);
    while found < 100 {
        let fx = random_fixture(10_000 + seed).unwrap();
        seed += 1;
        ensure(seed < 1000, || "too few instances with a non-degenerate region step".into())?;
        let Some(eps) = region_step(&fx.net, &fx.x, &fx.u) else { continue };
        let f0 = forward(&fx.net, &fx.x).unwrap();
        let f1 = forward(&fx.net, &fx.x.add(&fx.u.scale(eps)).unwrap()).unwrap();
        let rop = jvp_input(&fx.net, &fx.x, &fx.u).unwrap();
        let resid = f1.sub(&f0).unwrap().sub(&rop.scale(eps)).unwrap().norm();
        let ratio = resid / (1.0 + f0.norm());
        worst = worst.max(ratio);
        ensure(ratio <= 1e-8, || format!("instance {seed}: eps {eps:.3e}, scaled residual {ratio:.3e}"))?;
        found += 1;
    }
    Ok(format!("100 instances from {seed} draws, worst scaled residual {worst:.2e}"))
}

fn adjointness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..500u64 {
        let fx = random_fixture(20_000 + seed).unwrap();
        let (_, st) = record_states(&fx.net, &fx.x).unwrap();
        let lhs = jvp_with_state(&fx.net, &st, &fx.u).unwrap().dot(&fx.v).unwrap();
        let rhs = fx.u.dot(&vjp_with_state(&fx.net, &st, &fx.v).unwrap()).unwrap();
        let e = scalar_rel(lhs, rhs);
        worst = worst.max(e);
        ensure(e <= 1e-11, || format!("triple {seed}: {lhs} vs {rhs}, rel err {e:.3e}"))?;
    }
    Ok(format!("500 triples, worst rel err {worst:.2e}"))
}

fn strategy_agreement() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..100u64 {
        let fx = random_fixture(30_000 + seed).unwrap();
        let outs: Vec<_> = Strategy::ALL.iter().map(|&s| run_strategy(s, &fx.net, &fx.x, &fx.u).unwrap()).collect();
        for a in 0..outs.len() {
            for b in a + 1..outs.len() {
                let e = outs[a].jvp.rel_err(&outs[b].jvp).unwrap();
                worst = worst.max(e);
                ensure(e <= 1e-9, || format!("seed {seed}: {:?} vs {:?} rel err {e:.3e}", Strategy::ALL[a], Strategy::ALL[b]))?;
            }
        }
        checked += 1;
    }
    let cfg = BenchConfig { repetitions: 10, warmup: 1 };
    for arch in Arch::ALL {
        let fx = generate(arch, 7, 8).unwrap();
        run_benchmark(&fx.net, &fx.x, &fx.u, &Strategy::ALL, &cfg).map_err(|e| format!("{}: {e}", arch.name()))?;
    }
    Ok(format!("{checked} instances x 3 pairs plus 5 gated benchmarks, worst rel err {worst:.2e}"))
}

fn weight_jvp() -> Outcome {
    let (mut worst, mut nodes) = (0.0f64, 0);
    for seed in 0..50u64 {
        let fx = generate(Arch::ALL[(seed % 5) as usize], 40_000 + seed, 2 + (seed as usize % 5)).unwrap();
        let (_, st) = record_states(&fx.net, &fx.x).unwrap();
        let mut r = rng(seed);
        for node in fx.net.nodes().iter().filter(|n| n.layer.is_parametric()) {
            let dir = gaussian(&mut r, &node.layer.weight_shape().unwrap());
            let got = jvp_weight(&fx.net, &fx.x, &node.id, &dir).unwrap();
            let expected = weight_jvp_oracle(&fx.net, &st, &node.id, &dir);
            let e = rel(&got, &expected);
            worst = worst.max(e);
            nodes += 1;
            ensure(e <= 1e-9, || format!("seed {seed} node {}: rel err {e:.3e}", node.id))?;
        }
    }
    Ok(format!("50 nets, {nodes} dense/conv nodes, worst rel err {worst:.2e}"))
}

fn materialization_consistency() -> Outcome {
    let (mut wa, mut wb) = (0.0f64, 0.0f64);
    for seed in 0..60u64 {
        let fx = random_fixture(50_000 + seed).unwrap();
        let (_, st) = record_states(&fx.net, &fx.x).unwrap();
        let direct = materialize_affine_direct(&fx.net, &st).unwrap();
        let probed = materialize_affine_via_rop(&fx.net, &fx.x).unwrap();
        let ea = matrix_rel(&direct.a, &probed.a);
        let eb = rel_err(&direct.b, &probed.b);
        wa = wa.max(ea);
        wb = wb.max(eb);
        ensure(ea <= 1e-9 && eb <= 1e-12, || format!("seed {seed}: A err {ea:.3e}, b err {eb:.3e}"))?;
    }
    Ok(format!("60 nets, worst A err {wa:.2e}, worst b err {wb:.2e}"))
}

fn eigen_psd() -> Outcome {
    let opts = SpectralOptions { tol: 1e-10, max_iter: 200, seed: 11 };
    let (mut worst, mut max_it) = (0.0f64, 0);
    for seed in 0..20u64 {
        let d = 4 + (seed as usize * 7) % 29;
        let net = psd_network(60_000 + seed, d, d);
        let x = gaussian(&mut rng(seed), &[d]);
        let (_, st) = record_states(&net, &x).unwrap();
        let a = materialize_affine_direct(&net, &st).unwrap().a;
        let (vals, _) = dense_eig_symmetric(&a).unwrap();
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let res = top_k_eigen(&probe, 3, &opts).unwrap();
        ensure(res.iterations <= 200, || format!("seed {seed}: {} iterations", res.iterations))?;
        ensure(res.rop_calls == 3 * (res.iterations + 1) && res.lop_calls == 0, || {
            format!("seed {seed}: counters rop {} lop {} after {} iterations", res.rop_calls, res.lop_calls, res.iterations)
        })?;
        for i in 0..3 {
            let e = scalar_rel(res.values[i], vals[i]);
            worst = worst.max(e);
            ensure(e <= 1e-6, || format!("seed {seed} value {i}: {} vs {}", res.values[i], vals[i]))?;
        }
        max_it = max_it.max(res.iterations);
    }
    Ok(format!("20 PSD nets (D <= 32), worst rel err {worst:.2e}, max {max_it} iterations"))
}

fn svd_regions() -> Outcome {
    let opts = SpectralOptions { tol: 1e-10, max_iter: 500, seed: 13 };
    let (mut worst, mut max_it) = (0.0f64, 0);
    for seed in 0..20u64 {
        let d_in = 4 + (seed as usize * 5) % 29;
        let d_out = 4 + (seed as usize * 11) % 29;
        let net = region_mlp(70_000 + seed, d_in, 32, d_out);
        let x = gaussian(&mut rng(seed), &[d_in]);
        let (_, st) = record_states(&net, &x).unwrap();
        let (_, s, _) = dense_svd(&materialize_affine_direct(&net, &st).unwrap().a).unwrap();
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let res = top_k_svd(&probe, 3, &opts).unwrap();
        ensure(res.rop_calls == 3 * (res.iterations + 1) && res.lop_calls == 3 * res.iterations, || {
            format!("seed {seed}: counters rop {} lop {} after {} iterations", res.rop_calls, res.lop_calls, res.iterations)
        })?;
        for i in 0..3 {
            let e = scalar_rel(res.values[i], s[i]);
            worst = worst.max(e);
            ensure(e <= 1e-6, || format!("seed {seed} value {i}: {} vs {}", res.values[i], s[i]))?;
        }
        max_it = max_it.max(res.iterations);
    }
    Ok(format!("20 region matrices (<= 32x32), worst rel err {worst:.2e}, max {max_it} iterations"))
}

fn estimators() -> Outcome {
    let mut worst_z = 0.0f64;
    for seed in 0..20u64 {
        let d = 4 + (seed as usize * 3) % 13;
        let net = region_mlp(80_000 + seed, d, 12, d);
        let x = gaussian(&mut rng(seed), &[d]);
        let (_, st) = record_states(&net, &x).unwrap();
        let a = materialize_affine_direct(&net, &st).unwrap().a;
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let fro = frobenius_norm_mc(&probe, 100_000, 1).unwrap();
        let tr = trace_mc(&probe, 100_000, 1).unwrap();
        let zf = (fro.estimate - a.frobenius_norm()).abs() / fro.standard_error;
        let zt = (tr.estimate - a.trace()).abs() / tr.standard_error;
        worst_z = worst_z.max(zf).max(zt);
        ensure(zf <= 3.0 && zt <= 3.0, || format!("net {seed}: frobenius z {zf:.2}, trace z {zt:.2}"))?;
    }
    // Unbiasedness of the per-sample statistics, pooled over seeds.
    let mut pooled = Vec::new();
    for net_seed in 0..3u64 {
        let d = 6 + 3 * net_seed as usize;
        let net = region_mlp(90_000 + net_seed, d, 12, d);
        let x = gaussian(&mut rng(net_seed), &[d]);
        let (_, st) = record_states(&net, &x).unwrap();
        let a = materialize_affine_direct(&net, &st).unwrap().a;
        let probe = LinearProbe::from_network(&net, &x).unwrap();
        let fro2 = a.frobenius_norm().powi(2);
        let (mut bf, mut vf, mut bt, mut vt) = (0.0, 0.0, 0.0, 0.0);
        for s in 0..200u64 {
            let f = frobenius_norm_mc(&probe, 1000, s).unwrap();
            let t = trace_mc(&probe, 1000, s).unwrap();
            bf += f.sample_mean - fro2;
            vf += f.sample_mean_se.powi(2);
            bt += t.estimate - a.trace();
            vt += t.standard_error.powi(2);
        }
        let zf = (bf / 200.0).abs() / (vf.sqrt() / 200.0);
        let zt = (bt / 200.0).abs() / (vt.sqrt() / 200.0);
        ensure(zf <= 3.0 && zt <= 3.0, || format!("pooled net {net_seed}: squared-norm z {zf:.2}, trace z {zt:.2}"))?;
        pooled.push(zf.max(zt));
    }
    let pz = pooled.iter().cloned().fold(0.0, f64::max);
    Ok(format!("20 nets at n=1e5 worst |z| {worst_z:.2}; 200-seed pooled bias worst |z| {pz:.2}"))
}

fn sweep_net(k: usize) -> (clonejvp::Network, Tensor, Tensor) {
    let mut b = Builder::new(123);
    b.dense("fc1", INPUT_ID, 256, 512)
        .act("act1", "fc1", 0.0)
        .dense("fc2", "act1", 128, 256)
        .act("act2", "fc2", 0.0)
        .dense("out", "act2", k, 128);
    let net = b.build(vec![512], "out").unwrap();
    let mut r = rng(5);
    (net, gaussian(&mut r, &[512]), gaussian(&mut r, &[512]))
}

fn performance_trends() -> Outcome {
    let cfg = BenchConfig { repetitions: 30, warmup: 3 };
    let mut bj = Vec::new();
    let mut cl = Vec::new();
    let mut slow = 0.0f64;
    for k in [1usize, 16, 256] {
        let (net, x, u) = sweep_net(k);
        let median = |s: Strategy| summarize(&time_runs(&cfg, || run_strategy(s, &net, &x, &u)).unwrap()).0;
        bj.push(median(Strategy::BatchJacobian));
        cl.push(median(Strategy::Clone));
        let zero = Tensor::zeros(&[512]).unwrap();
        let fwd = summarize(&time_runs(&cfg, || forward(&net, &x)).unwrap()).0;
        let pass = summarize(&time_runs(&cfg, || concat_clone_pass(&net, &x, &[&u, &zero])).unwrap()).0;
        slow = slow.max(pass / fwd);
    }
    let growth = bj[2] / bj[0];
    let spread = cl.iter().cloned().fold(0.0, f64::max) / cl.iter().cloned().fold(f64::INFINITY, f64::min);
    let detail = format!("batch-jacobian K=256/K=1 {growth:.1}x, clone spread {spread:.2}x, clone/forward {slow:.2}x");
    ensure(growth >= 5.0 && spread <= 1.5 && slow <= 4.0, || detail.clone())?;
    Ok(detail)
}

fn format_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for (i, arch) in Arch::ALL.into_iter().enumerate() {
        let fx = generate(arch, 100 + i as u64, 7).unwrap();
        for t in [&fx.x, &fx.u, &fx.v] {
            let bytes = encode_tensor(t);
            let back = decode_tensor(&bytes, "mem").unwrap();
            ensure(encode_tensor(&back) == bytes && back == *t, || format!("{}: tensor bytes differ", arch.name()))?;
        }
        for inline in [true, false] {
            let p1 = dir.path().join(format!("{}-{inline}-1.json", arch.name()));
            let p2 = dir.path().join(format!("{}-{inline}-2.json", arch.name()));
            write_network(&p1, &fx.net, inline).unwrap();
            let back = parse_network(&p1).unwrap();
            write_network(&p2, &back, inline).unwrap();
            ensure(back == fx.net, || format!("{}: parsed network differs", arch.name()))?;
            ensure(std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap(), || format!("{}: JSON not stable", arch.name()))?;
        }
        let (a, b) = (dir.path().join(format!("gen-{i}-a")), dir.path().join(format!("gen-{i}-b")));
        write_fixture(&a, &generate(arch, 9, 5).unwrap()).unwrap();
        write_fixture(&b, &generate(arch, 9, 5).unwrap()).unwrap();
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let same = std::fs::read(a.join(&name)).unwrap() == std::fs::read(b.join(&name)).unwrap();
            ensure(same, || format!("{}: {name:?} not reproducible", arch.name()))?;
            files += 1;
        }
    }
    Ok(format!("5 families, inline and file-backed JSON stable, {files} generated files reproducible"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("piecewise-affine exactness", cpa_exactness),
        ("adjointness", adjointness),
        ("strategy agreement", strategy_agreement),
        ("weight jvp", weight_jvp),
        ("materialization consistency", materialization_consistency),
        ("top-k eigen on PSD regions", eigen_psd),
        ("top-k svd on regions", svd_regions),
        ("frobenius and trace estimators", estimators),
        ("performance trends", performance_trends),
        ("format fidelity", format_fidelity),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
