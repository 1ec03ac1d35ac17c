//! Matrix-free spectral analysis of a slope matrix through Rop/Lop products only.

use std::cell::Cell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clone::{jvp_with_state, vjp_with_state};
use crate::error::{Error, Result};
use crate::network::{record_states, Network};
use crate::numerics::{dot, matmul, norm2, qr_householder, DenseMatrix, Tensor};

type MapFn<'a> = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a>;

/// Relative tolerance of the construction-time adjoint spot-check.
pub const ADJOINT_TOL: f64 = 1e-11;

/// A linear map given only by its forward (`u ↦ A u`) and transposed (`v ↦ Aᵀ v`) products.
pub struct LinearProbe<'a> {
    dim_in: usize,
    dim_out: usize,
    rop: MapFn<'a>,
    lop: MapFn<'a>,
    rop_calls: Cell<usize>,
    lop_calls: Cell<usize>,
}

impl<'a> LinearProbe<'a> {
    /// Wraps two closures after checking `⟨rop u, v⟩ = ⟨u, lop v⟩` on three random pairs.
    ///
    /// The check calls do not count towards the counters.
    pub fn new(
        dim_in: usize,
        dim_out: usize,
        rop: impl Fn(&[f64]) -> Result<Vec<f64>> + 'a,
        lop: impl Fn(&[f64]) -> Result<Vec<f64>> + 'a,
    ) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::InvalidArgument("probe dimensions must be positive".into()));
        }
        let probe = Self {
            dim_in,
            dim_out,
            rop: Box::new(rop),
            lop: Box::new(lop),
            rop_calls: Cell::new(0),
            lop_calls: Cell::new(0),
        };
        probe.spot_check()?;
        Ok(probe)
    }

    /// Probe of `A_ω(x)` for a network at `x`.
    pub fn from_network(net: &'a Network, x: &Tensor) -> Result<Self> {
        let (_, state) = record_states(net, x)?;
        let state = Rc::new(state);
        let (s1, s2) = (Rc::clone(&state), state);
        let in_shape = net.input_shape().to_vec();
        let out_shape = net.output_shape().to_vec();
        Self::new(
            net.input_len(),
            net.output_len(),
            move |u| Ok(jvp_with_state(net, &s1, &Tensor::new(in_shape.clone(), u.to_vec())?)?.into_data()),
            move |v| Ok(vjp_with_state(net, &s2, &Tensor::new(out_shape.clone(), v.to_vec())?)?.into_data()),
        )
    }

    /// Probe of an explicit matrix.
    pub fn from_matrix(a: DenseMatrix) -> Result<LinearProbe<'static>> {
        let at = a.transpose();
        let (rows, cols) = (a.rows(), a.cols());
        LinearProbe::new(cols, rows, move |u| a.matvec(u), move |v| at.matvec(v))
    }

    fn spot_check(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let u = gaussian(&mut rng, self.dim_in);
            let v = gaussian(&mut rng, self.dim_out);
            let au = self.apply_rop(&u)?;
            let atv = self.apply_lop(&v)?;
            let (lhs, rhs) = (dot(&au, &v), dot(&u, &atv));
            // Cauchy-Schwarz scale keeps the test meaningful when the inner product cancels.
            let scale = (norm2(&au) * norm2(&v)).max(norm2(&u) * norm2(&atv));
            if scale > 0.0 {
                worst = worst.max((lhs - rhs).abs() / scale);
            }
        }
        if worst > ADJOINT_TOL {
            return Err(Error::AdjointCheck(worst));
        }
        Ok(())
    }

    fn apply_rop(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim_in {
            return Err(Error::ShapeMismatch {
                op: "rop",
                lhs: vec![u.len()],
                rhs: vec![self.dim_in],
            });
        }
        let out = (self.rop)(u)?;
        check_len("rop", &out, self.dim_out)?;
        Ok(out)
    }

    fn apply_lop(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim_out {
            return Err(Error::ShapeMismatch {
                op: "lop",
                lhs: vec![v.len()],
                rhs: vec![self.dim_out],
            });
        }
        let out = (self.lop)(v)?;
        check_len("lop", &out, self.dim_in)?;
        Ok(out)
    }

    pub fn rop(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.rop_calls.set(self.rop_calls.get() + 1);
        self.apply_rop(u)
    }

    pub fn lop(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.lop_calls.set(self.lop_calls.get() + 1);
        self.apply_lop(v)
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn rop_calls(&self) -> usize {
        self.rop_calls.get()
    }

    pub fn lop_calls(&self) -> usize {
        self.lop_calls.get()
    }

    pub fn reset_counters(&self) {
        self.rop_calls.set(0);
        self.lop_calls.set(0);
    }

    /// One rop call per column.
    fn rop_columns(&self, v: &DenseMatrix) -> Result<DenseMatrix> {
        let cols = (0..v.cols()).map(|j| self.rop(&v.column(j))).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_columns(&cols)
    }

    fn lop_columns(&self, u: &DenseMatrix) -> Result<DenseMatrix> {
        let cols = (0..u.cols()).map(|j| self.lop(&u.column(j))).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_columns(&cols)
    }
}

fn check_len(op: &'static str, out: &[f64], expected: usize) -> Result<()> {
    if out.len() != expected {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![out.len()],
            rhs: vec![expected],
        });
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    /// Stop once the Frobenius residual is at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// Seed of the random initial block.
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    /// Descending eigen or singular values.
    pub values: Vec<f64>,
    pub left_vectors: DenseMatrix,
    pub right_vectors: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Stopping quantity at exit.
    pub residual: f64,
    pub rop_calls: usize,
    pub lop_calls: usize,
}

fn check_options(k: usize, limit: usize, opts: &SpectralOptions) -> Result<()> {
    if k == 0 || k > limit {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={limit}")));
    }
    if opts.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    if !(opts.tol >= 0.0) {
        return Err(Error::InvalidArgument("tol must be >= 0".into()));
    }
    Ok(())
}

/// Random `n × k` block with orthonormal columns.
fn initial_block(n: usize, k: usize, seed: u64) -> Result<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DenseMatrix::new(n, k, gaussian(&mut rng, n * k))?;
    Ok(qr_householder(&g)?.0)
}

/// Reorders values descending and permutes the columns of the vector blocks to match.
fn sort_descending(values: Vec<f64>, blocks: &mut [&mut DenseMatrix]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    for m in blocks.iter_mut() {
        let cols: Vec<Vec<f64>> = order.iter().map(|&j| m.column(j)).collect();
        for (j, c) in cols.iter().enumerate() {
            m.set_column(j, c);
        }
    }
    order.iter().map(|&j| values[j]).collect()
}

fn residual(c: &DenseMatrix, q: &DenseMatrix, sigma: &DenseMatrix) -> Result<f64> {
    Ok(c.sub(&matmul(q, sigma)?)?.frobenius_norm())
}

/// Block power iteration for the top-`k` eigenpairs of a square probe.
///
/// Each sweep orthonormalizes `C = A V` by QR, takes `V ← Q` and `Σ ← R`, then
/// recomputes `C`. Values are the diagonal of `Σ`, which has non-negative
/// diagonal under the QR sign convention, so correctness is claimed for
/// positive semi-definite maps.
pub fn top_k_eigen(probe: &LinearProbe<'_>, k: usize, opts: &SpectralOptions) -> Result<SpectralResult> {
    if probe.dim_in() != probe.dim_out() {
        return Err(Error::InvalidArgument(format!(
            "eigen decomposition needs a square probe, got {}x{}",
            probe.dim_out(),
            probe.dim_in()
        )));
    }
    check_options(k, probe.dim_in(), opts)?;
    let (rop0, lop0) = (probe.rop_calls(), probe.lop_calls());
    let mut v = initial_block(probe.dim_in(), k, opts.seed)?;
    let mut c = probe.rop_columns(&v)?;
    let mut sigma = DenseMatrix::zeros(k, k);
    let mut iterations = 0;
    let mut res = f64::INFINITY;
    let mut converged = false;
    while iterations < opts.max_iter {
        let (q, r) = qr_householder(&c)?;
        v = q;
        sigma = r;
        c = probe.rop_columns(&v)?;
        iterations += 1;
        res = residual(&c, &v, &sigma)?;
        if res <= opts.tol {
            converged = true;
            break;
        }
    }
    let mut left = v.clone();
    let mut right = v;
    let values = sort_descending(sigma.diag(), &mut [&mut left, &mut right]);
    Ok(SpectralResult {
        values,
        left_vectors: left,
        right_vectors: right,
        iterations,
        converged,
        residual: res,
        rop_calls: probe.rop_calls() - rop0,
        lop_calls: probe.lop_calls() - lop0,
    })
}

/// Block power iteration on `AᵀA` for the top-`k` singular triplets.
///
/// `C = A V`, `U ← Q(C)`, `B = Aᵀ U`, `(V, R) ← QR(B)`, `Σ ← R`, repeated until
/// `‖A V − U Σ‖_F ≤ tol`. The initial `U Σ` is zero, so the first residual is `‖A V₀‖_F`.
pub fn top_k_svd(probe: &LinearProbe<'_>, k: usize, opts: &SpectralOptions) -> Result<SpectralResult> {
    check_options(k, probe.dim_in().min(probe.dim_out()), opts)?;
    let (rop0, lop0) = (probe.rop_calls(), probe.lop_calls());
    let mut v = initial_block(probe.dim_in(), k, opts.seed)?;
    let mut u = DenseMatrix::zeros(probe.dim_out(), k);
    let mut sigma = DenseMatrix::zeros(k, k);
    let mut c = probe.rop_columns(&v)?;
    let mut res = residual(&c, &u, &sigma)?;
    let mut iterations = 0;
    while res > opts.tol && iterations < opts.max_iter {
        u = qr_householder(&c)?.0;
        let b = probe.lop_columns(&u)?;
        let (q, r) = qr_householder(&b)?;
        v = q;
        sigma = r.top_left(k, k);
        c = probe.rop_columns(&v)?;
        iterations += 1;
        res = residual(&c, &u, &sigma)?;
    }
    let converged = res <= opts.tol;
    let values = sort_descending(sigma.diag(), &mut [&mut u, &mut v]);
    Ok(SpectralResult {
        values,
        left_vectors: u,
        right_vectors: v,
        iterations,
        converged,
        residual: res,
        rop_calls: probe.rop_calls() - rop0,
        lop_calls: probe.lop_calls() - lop0,
    })
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    /// Mean of the per-sample statistic.
    pub sample_mean: f64,
    /// Standard error of `sample_mean`.
    pub sample_mean_se: f64,
    pub n_samples: usize,
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument("n_samples must be >= 2".into()));
    }
    Ok(())
}

/// `‖A‖_F ≈ sqrt(mean ‖A u‖²)` with `u ~ N(0, I)`; delta-method standard error.
pub fn frobenius_norm_mc(probe: &LinearProbe<'_>, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_samples(n_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|_| {
            let u = gaussian(&mut rng, probe.dim_in());
            probe.rop(&u).map(|y| dot(&y, &y))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, se) = mean_and_se(&samples);
    let estimate = mean.sqrt();
    let standard_error = if mean > 0.0 { se / (2.0 * estimate) } else { 0.0 };
    Ok(McEstimate {
        estimate,
        standard_error,
        sample_mean: mean,
        sample_mean_se: se,
        n_samples,
    })
}

/// Hutchinson trace estimate `mean uᵀ A u` with Rademacher probes.
pub fn trace_mc(probe: &LinearProbe<'_>, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if probe.dim_in() != probe.dim_out() {
        return Err(Error::InvalidArgument(format!(
            "trace needs a square probe, got {}x{}",
            probe.dim_out(),
            probe.dim_in()
        )));
    }
    check_samples(n_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|_| {
            let u: Vec<f64> = (0..probe.dim_in())
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            probe.rop(&u).map(|y| dot(&u, &y))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, se) = mean_and_se(&samples);
    Ok(McEstimate {
        estimate: mean,
        standard_error: se,
        sample_mean: mean,
        sample_mean_se: se,
        n_samples,
    })
}
