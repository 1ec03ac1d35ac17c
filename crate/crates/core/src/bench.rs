//! Three ways to compute a JVP, and a wall-clock harness comparing them.

use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::affine::DEFAULT_BUDGET;
use crate::clone::{concat_clone_pass, jvp_with_state, vjp_batch_with_state, vjp_with_state};
use crate::error::{Error, Result};
use crate::network::{forward, record_states, Network};
use crate::numerics::{dot, Tensor};

/// Relative tolerance of the pre-timing agreement check.
pub const AGREEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// All `K` Jacobian rows from `K` transposed passes, then a product with `u`.
    BatchJacobian,
    /// Transposed pass followed by the forward-linear pass that is its own Lop.
    DoubleVjp,
    /// One batched pass over `[x, u, 0]`.
    Clone,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::BatchJacobian, Strategy::DoubleVjp, Strategy::Clone];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BatchJacobian => "batch-jacobian",
            Strategy::DoubleVjp => "double-vjp",
            Strategy::Clone => "clone",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Number of network traversals a strategy performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCounts {
    /// Plain or recording forward passes (a concatenated batch counts once).
    pub forward: usize,
    /// Frozen forward passes.
    pub frozen: usize,
    /// Reverse (transposed) passes.
    pub transposed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutput {
    pub jvp: Tensor,
    /// `f(x)`, when the strategy produces it.
    pub primal: Option<Tensor>,
    pub passes: PassCounts,
}

pub fn strategy_batch_jacobian(net: &Network, x: &Tensor, u: &Tensor) -> Result<StrategyOutput> {
    strategy_batch_jacobian_with_budget(net, x, u, DEFAULT_BUDGET)
}

/// Builds every row `e_kᵀ A` with its own transposed pass, then returns `A u`.
pub fn strategy_batch_jacobian_with_budget(net: &Network, x: &Tensor, u: &Tensor, budget: usize) -> Result<StrategyOutput> {
    net.check_input("batch-jacobian", u)?;
    let k = net.output_len();
    let required = k.saturating_mul(net.input_len());
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let (primal, state) = record_states(net, x)?;
    let mut e = Tensor::zeros(net.output_shape())?;
    let mut out = Vec::with_capacity(k);
    for r in 0..k {
        e.data_mut()[r] = 1.0;
        let row = vjp_with_state(net, &state, &e)?;
        e.data_mut()[r] = 0.0;
        out.push(dot(row.data(), u.data()));
    }
    Ok(StrategyOutput {
        jvp: Tensor::new(net.output_shape().to_vec(), out)?,
        primal: Some(primal),
        passes: PassCounts {
            forward: 1,
            frozen: 0,
            transposed: k,
        },
    })
}

/// `Lop(Lop(f, x, v)ᵀ, v, u)ᵀ`.
///
/// The inner map `v ↦ Aᵀ v` is evaluated by a transposed pass (at `v = 0`);
/// it is linear in `v`, so its own Lop along `u` is the forward linear pass `A u`.
pub fn strategy_double_vjp(net: &Network, x: &Tensor, u: &Tensor) -> Result<StrategyOutput> {
    net.check_input("double-vjp", u)?;
    let (primal, state) = record_states(net, x)?;
    let v = Tensor::zeros(net.output_shape())?;
    black_box(vjp_with_state(net, &state, &v)?);
    let jvp = jvp_with_state(net, &state, u)?;
    Ok(StrategyOutput {
        jvp,
        primal: Some(primal),
        passes: PassCounts {
            forward: 1,
            frozen: 1,
            transposed: 1,
        },
    })
}

/// `f_x(u) − f_x(0)` from one concatenated pass; `f(x)` comes out as a side product.
pub fn strategy_clone(net: &Network, x: &Tensor, u: &Tensor) -> Result<StrategyOutput> {
    let zero = Tensor::zeros(net.input_shape())?;
    let (primal, outs) = concat_clone_pass(net, x, &[u, &zero])?;
    Ok(StrategyOutput {
        jvp: outs[0].sub(&outs[1])?,
        primal: Some(primal),
        passes: PassCounts {
            forward: 1,
            frozen: 0,
            transposed: 0,
        },
    })
}

pub fn run_strategy(strategy: Strategy, net: &Network, x: &Tensor, u: &Tensor) -> Result<StrategyOutput> {
    match strategy {
        Strategy::BatchJacobian => strategy_batch_jacobian(net, x, u),
        Strategy::DoubleVjp => strategy_double_vjp(net, x, u),
        Strategy::Clone => strategy_clone(net, x, u),
    }
}

/// Full Jacobian from one batched reverse pass over all `K` basis vectors.
pub fn jacobian_rows(net: &Network, x: &Tensor) -> Result<Vec<Tensor>> {
    let (_, state) = record_states(net, x)?;
    let k = net.output_len();
    let basis: Vec<Tensor> = (0..k)
        .map(|r| {
            let mut e = vec![0.0; k];
            e[r] = 1.0;
            Tensor::new(net.output_shape().to_vec(), e)
        })
        .collect::<Result<_>>()?;
    vjp_batch_with_state(net, &state, &basis.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 100,
            warmup: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub strategy: String,
    pub d_in: usize,
    pub d_out: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub passes: PassCounts,
}

/// Median, mean and sample standard deviation.
pub fn summarize(times: &[f64]) -> (f64, f64, f64) {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = times.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (median, mean, var.sqrt())
}

/// Times `f` after `warmup` discarded calls; returns per-call seconds.
pub fn time_runs<T>(config: &BenchConfig, mut f: impl FnMut() -> Result<T>) -> Result<Vec<f64>> {
    for _ in 0..config.warmup {
        black_box(f()?);
    }
    let mut times = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        let start = Instant::now();
        black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(times)
}

fn check_config(config: &BenchConfig) -> Result<()> {
    if config.repetitions < 10 {
        return Err(Error::InvalidArgument(format!(
            "repetitions must be >= 10, got {}",
            config.repetitions
        )));
    }
    Ok(())
}

/// Verifies that every strategy agrees, then times each one. Reports are sorted by median.
pub fn run_benchmark(
    net: &Network,
    x: &Tensor,
    u: &Tensor,
    strategies: &[Strategy],
    config: &BenchConfig,
) -> Result<Vec<BenchReport>> {
    check_config(config)?;
    if strategies.is_empty() {
        return Err(Error::InvalidArgument("no strategies selected".into()));
    }
    let outputs = strategies
        .iter()
        .map(|&s| run_strategy(s, net, x, u))
        .collect::<Result<Vec<_>>>()?;
    for a in 0..outputs.len() {
        for b in a + 1..outputs.len() {
            let rel_err = outputs[a].jvp.rel_err(&outputs[b].jvp)?;
            if !(rel_err <= AGREEMENT_TOL) {
                return Err(Error::StrategyDisagreement {
                    a: strategies[a].name().into(),
                    b: strategies[b].name().into(),
                    rel_err,
                });
            }
        }
    }
    let mut reports = Vec::with_capacity(strategies.len());
    for (&s, out) in strategies.iter().zip(&outputs) {
        let times = time_runs(config, || run_strategy(s, net, x, u))?;
        let (median_s, mean_s, std_s) = summarize(&times);
        reports.push(BenchReport {
            strategy: s.name().into(),
            d_in: net.input_len(),
            d_out: net.output_len(),
            repetitions: config.repetitions,
            warmup: config.warmup,
            median_s,
            mean_s,
            std_s,
            passes: out.passes,
        });
    }
    reports.sort_by(|a, b| a.median_s.total_cmp(&b.median_s));
    Ok(reports)
}

/// Median seconds of a plain forward pass and of the concatenated clone pass over `[x, u, 0]`.
pub fn clone_slowdown(net: &Network, x: &Tensor, u: &Tensor, config: &BenchConfig) -> Result<(f64, f64)> {
    check_config(config)?;
    let zero = Tensor::zeros(net.input_shape())?;
    let fwd = summarize(&time_runs(config, || forward(net, x))?).0;
    let cl = summarize(&time_runs(config, || concat_clone_pass(net, x, &[u, &zero]))?).0;
    Ok((fwd, cl))
}

pub const CSV_HEADER: [&str; 10] = [
    "strategy",
    "d_in",
    "d_out",
    "reps",
    "median_s",
    "mean_s",
    "std_s",
    "passes_forward",
    "passes_frozen",
    "passes_transposed",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    strategy: &'a str,
    d_in: usize,
    d_out: usize,
    reps: usize,
    median_s: f64,
    mean_s: f64,
    std_s: f64,
    passes_forward: usize,
    passes_frozen: usize,
    passes_transposed: usize,
}

pub fn write_csv<W: Write>(writer: W, reports: &[BenchReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.serialize(CsvRow {
            strategy: &r.strategy,
            d_in: r.d_in,
            d_out: r.d_out,
            reps: r.repetitions,
            median_s: r.median_s,
            mean_s: r.mean_s,
            std_s: r.std_s,
            passes_forward: r.passes.forward,
            passes_frozen: r.passes.frozen,
            passes_transposed: r.passes.transposed,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, reports: &[BenchReport]) -> Result<()> {
    write_csv(std::fs::File::create(path)?, reports)
}
