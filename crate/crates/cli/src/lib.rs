//! Command-line front end: argument parsing and dispatch onto the `clonejvp` operations.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use clonejvp::affine::{materialize_affine_direct_with_budget, DEFAULT_BUDGET};
use clonejvp::bench::{run_benchmark, write_csv_file, BenchConfig, BenchReport, Strategy};
use clonejvp::clone::{jvp_input, jvp_weight, vjp_input};
use clonejvp::fixtures::{append_dense_head, gaussian_tensor, generate, write_fixture, Arch, MAX_SCALE};
use clonejvp::io::{parse_network, read_tensor, write_tensor};
use clonejvp::network::record_states;
use clonejvp::spectral::{frobenius_norm_mc, top_k_eigen, top_k_svd, trace_mc, LinearProbe, McEstimate, SpectralOptions, SpectralResult};
use clonejvp::{DenseMatrix, Network, Tensor};
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_COMPUTE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "clonejvp", version, about = "Jacobian-vector products of piecewise-affine networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Input-space JVP `J(x) u`.
    Jvp {
        #[command(flatten)]
        at: AtPoint,
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Input-space VJP `vᵀ J(x)`.
    Vjp {
        #[command(flatten)]
        at: AtPoint,
        #[arg(long)]
        v: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// JVP with respect to one node's weights.
    JvpWeight {
        #[command(flatten)]
        at: AtPoint,
        /// Dense or conv node whose weights are perturbed.
        #[arg(long)]
        node: String,
        /// Weight-shaped direction.
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize the region's slope matrix `A` (`[K, D]`) and bias `b`.
    Affine {
        #[command(flatten)]
        at: AtPoint,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
        /// Maximum number of entries of `A`.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
    },
    /// Top-k eigenvalues of the region matrix by block power iteration.
    Eigen(SpectralArgs),
    /// Top-k singular values of the region matrix.
    Svd(SpectralArgs),
    /// Monte-Carlo Frobenius norm of the region matrix.
    Frobnorm(McArgs),
    /// Monte-Carlo (Hutchinson) trace of the region matrix.
    Trace(McArgs),
    /// Time the JVP strategies against each other.
    Bench(BenchArgs),
    /// Write a seeded random fixture: network JSON, weight files and sample tensors.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = parse_arch)]
        arch: Arch,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=MAX_SCALE as u64))]
        scale: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct AtPoint {
    /// Network JSON file.
    #[arg(long)]
    net: PathBuf,
    /// Point `x` at which the region is taken.
    #[arg(long)]
    x: PathBuf,
}

#[derive(Debug, Args)]
struct SpectralArgs {
    #[command(flatten)]
    at: AtPoint,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the values as a `.ten` file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the right vectors as a `[D, k]` tensor.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct McArgs {
    #[command(flatten)]
    at: AtPoint,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    net: PathBuf,
    /// Point; drawn from `--seed` when omitted.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Direction; drawn from `--seed` when omitted.
    #[arg(long)]
    u: Option<PathBuf>,
    /// Output widths: a fresh dense head of each width is appended to the network.
    #[arg(long, value_delimiter = ',')]
    k_sweep: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "batch-jacobian,double-vjp,clone")]
    strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    Arch::parse(s).ok_or_else(|| {
        let names: Vec<_> = Arch::ALL.iter().map(|a| a.name()).collect();
        format!("unknown architecture `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<_> = Strategy::ALL.iter().map(|a| a.name()).collect();
        format!("unknown strategy `{s}` (expected one of {})", names.join(", "))
    })
}

/// Parses `argv` (program name first), runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_COMPUTE
        }
    }
}

fn load_net(path: &Path) -> Result<Network> {
    parse_network(path).with_context(|| format!("loading network {}", path.display()))
}

fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(path).with_context(|| format!("reading tensor {}", path.display()))
}

fn load_point(at: &AtPoint) -> Result<(Network, Tensor)> {
    Ok((load_net(&at.net)?, load_tensor(&at.x)?))
}

fn emit_tensor(out: &mut impl Write, t: &Tensor, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_tensor(p, t).with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(out, "{}", json!({ "shape": t.shape(), "data": t.data() }))?,
    }
    Ok(())
}

fn matrix_tensor(m: &DenseMatrix) -> Result<Tensor> {
    Ok(Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec())?)
}

fn spectral(out: &mut impl Write, args: &SpectralArgs, svd: bool) -> Result<()> {
    let (net, x) = load_point(&args.at)?;
    let probe = LinearProbe::from_network(&net, &x)?;
    let opts = SpectralOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        seed: args.seed,
    };
    let res: SpectralResult = if svd {
        top_k_svd(&probe, args.k, &opts)?
    } else {
        top_k_eigen(&probe, args.k, &opts)?
    };
    if let Some(p) = &args.out {
        write_tensor(p, &Tensor::from_vec(res.values.clone())?)?;
    }
    if let Some(p) = &args.vectors {
        write_tensor(p, &matrix_tensor(&res.right_vectors)?)?;
    }
    let summary = json!({
        "values": res.values,
        "iterations": res.iterations,
        "converged": res.converged,
        "residual": res.residual,
        "rop_calls": res.rop_calls,
        "lop_calls": res.lop_calls,
    });
    writeln!(out, "{summary}")?;
    Ok(())
}

fn monte_carlo(out: &mut impl Write, args: &McArgs, trace: bool) -> Result<()> {
    let (net, x) = load_point(&args.at)?;
    let probe = LinearProbe::from_network(&net, &x)?;
    let est: McEstimate = if trace {
        trace_mc(&probe, args.samples, args.seed)?
    } else {
        frobenius_norm_mc(&probe, args.samples, args.seed)?
    };
    let summary = json!({
        "estimate": est.estimate,
        "standard_error": est.standard_error,
        "n_samples": est.n_samples,
    });
    writeln!(out, "{summary}")?;
    Ok(())
}

fn bench(out: &mut impl Write, args: &BenchArgs) -> Result<()> {
    let base = load_net(&args.net)?;
    let x = match &args.x {
        Some(p) => load_tensor(p)?,
        None => gaussian_tensor(base.input_shape(), args.seed, "bench/x")?,
    };
    let u = match &args.u {
        Some(p) => load_tensor(p)?,
        None => gaussian_tensor(base.input_shape(), args.seed, "bench/u")?,
    };
    let config = BenchConfig {
        repetitions: args.reps,
        warmup: args.warmup,
    };
    let nets = if args.k_sweep.is_empty() {
        vec![base]
    } else {
        args.k_sweep
            .iter()
            .map(|&k| append_dense_head(&base, k, args.seed))
            .collect::<clonejvp::Result<Vec<_>>>()?
    };
    let mut reports: Vec<BenchReport> = Vec::new();
    for net in &nets {
        reports.extend(run_benchmark(net, &x, &u, &args.strategies, &config)?);
    }
    writeln!(out, "{:<16} {:>6} {:>6} {:>12} {:>12} {:>12}", "strategy", "d_in", "d_out", "median_s", "mean_s", "std_s")?;
    for r in &reports {
        writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>12.3e} {:>12.3e} {:>12.3e}",
            r.strategy, r.d_in, r.d_out, r.median_s, r.mean_s, r.std_s
        )?;
    }
    if let Some(p) = &args.csv {
        write_csv_file(p, &reports).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::Jvp { at, u, out: path } => {
            let (net, x) = load_point(&at)?;
            emit_tensor(out, &jvp_input(&net, &x, &load_tensor(&u)?)?, path.as_deref())
        }
        Command::Vjp { at, v, out: path } => {
            let (net, x) = load_point(&at)?;
            emit_tensor(out, &vjp_input(&net, &x, &load_tensor(&v)?)?, path.as_deref())
        }
        Command::JvpWeight { at, node, u, out: path } => {
            let (net, x) = load_point(&at)?;
            emit_tensor(out, &jvp_weight(&net, &x, &node, &load_tensor(&u)?)?, path.as_deref())
        }
        Command::Affine { at, out_a, out_b, budget } => {
            let (net, x) = load_point(&at)?;
            let (_, state) = record_states(&net, &x)?;
            let map = materialize_affine_direct_with_budget(&net, &state, budget)?;
            write_tensor(&out_a, &matrix_tensor(&map.a)?)?;
            write_tensor(&out_b, &Tensor::from_vec(map.b)?)?;
            Ok(())
        }
        Command::Eigen(args) => spectral(out, &args, false),
        Command::Svd(args) => spectral(out, &args, true),
        Command::Frobnorm(args) => monte_carlo(out, &args, false),
        Command::Trace(args) => monte_carlo(out, &args, true),
        Command::Bench(args) => bench(out, &args),
        Command::Gen { seed, arch, scale, out: dir } => {
            let fx = generate(arch, seed, scale as usize)?;
            write_fixture(&dir, &fx).with_context(|| format!("writing fixture to {}", dir.display()))?;
            writeln!(out, "{}", dir.display())?;
            Ok(())
        }
    }
}
