//! Nonlinear least-squares solver over keyed manifold values.
//!
//! Levenberg-Marquardt with three linear back ends chosen by problem shape:
//! dense Cholesky for small graphs, a Schur elimination of trailing scalar
//! states (inverse-depth corrections couple to poses but never to each other),
//! and a banded Cholesky for long chain graphs whose factors only span nearby
//! states (global trajectory smoothing).

use super::factors::{Factor, Linearization, MarginalPrior};
use super::values::{GraphError, Key, Values, Variable};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearStrategy {
    /// Band when the problem is a long pure-navigation chain, else dense.
    Auto,
    Dense,
    Banded,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_scale: f64,
    /// Relative cost-decrease threshold for convergence.
    pub cost_tolerance: f64,
    /// Step-norm threshold for convergence.
    pub step_tolerance: f64,
    pub strategy: LinearStrategy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 50,
            initial_lambda: 1e-4,
            lambda_scale: 10.0,
            cost_tolerance: 1e-8,
            step_tolerance: 1e-10,
            strategy: LinearStrategy::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

/// Column layout of the free variables touched by the factor set.
struct Ordering {
    keys: Vec<Key>,
    offsets: Vec<usize>,
    index: BTreeMap<Key, usize>,
    dim: usize,
    /// Dimension of the leading non-scalar block (scalars sort last).
    nonscalar_dim: usize,
}

fn build_ordering(factors: &[&dyn Factor], values: &Values) -> Result<Ordering, GraphError> {
    let mut touched: BTreeMap<Key, usize> = BTreeMap::new();
    for f in factors {
        for &k in f.keys() {
            let var = values.expect(k)?;
            if !values.is_fixed(k) {
                touched.insert(k, var.dim());
            }
        }
    }
    let mut keys = Vec::new();
    let mut offsets = Vec::new();
    let mut index = BTreeMap::new();
    let mut dim = 0;
    let mut nonscalar_dim = 0;
    for (k, d) in touched {
        index.insert(k, keys.len());
        keys.push(k);
        offsets.push(dim);
        dim += d;
        if !k.is_scalar() {
            nonscalar_dim = dim;
        }
    }
    Ok(Ordering {
        keys,
        offsets,
        index,
        dim,
        nonscalar_dim,
    })
}

enum NormalEq {
    Dense { h: DMatrix<f64> },
    /// Lower band storage: `band[(i, d)]` holds entry `(i, i - d)`.
    Band { band: DMatrix<f64>, bw: usize },
}

impl NormalEq {
    fn add(&mut self, i: usize, j: usize, v: f64) {
        match self {
            NormalEq::Dense { h } => h[(i, j)] += v,
            NormalEq::Band { band, bw } => {
                if i >= j {
                    let d = i - j;
                    assert!(d <= *bw, "entry outside the declared bandwidth");
                    band[(i, d)] += v;
                }
            }
        }
    }

    fn diagonal(&self, i: usize) -> f64 {
        match self {
            NormalEq::Dense { h } => h[(i, i)],
            NormalEq::Band { band, .. } => band[(i, 0)],
        }
    }

    fn add_diagonal(&mut self, i: usize, v: f64) {
        match self {
            NormalEq::Dense { h } => h[(i, i)] += v,
            NormalEq::Band { band, .. } => band[(i, 0)] += v,
        }
    }
}

/// Assemble normal equations from pre-computed linearizations.
fn assemble(
    factors: &[&dyn Factor],
    lins: &[Linearization],
    values: &Values,
    ordering: &Ordering,
    neq: &mut NormalEq,
    rhs: &mut DVector<f64>,
) {
    for (f, lin) in factors.iter().zip(lins.iter()) {
        let keys = f.keys();
        match lin {
            Linearization::Residual {
                jacobians,
                residual,
                ..
            } => {
                for (a, &ka) in keys.iter().enumerate() {
                    let Some(&ia) = ordering.index.get(&ka) else {
                        continue;
                    };
                    let oa = ordering.offsets[ia];
                    let ja = &jacobians[a];
                    let grad = ja.transpose() * residual;
                    for r in 0..grad.len() {
                        rhs[oa + r] -= grad[r];
                    }
                    for (b, &kb) in keys.iter().enumerate() {
                        let Some(&ib) = ordering.index.get(&kb) else {
                            continue;
                        };
                        let ob = ordering.offsets[ib];
                        let block = ja.transpose() * &jacobians[b];
                        for r in 0..block.nrows() {
                            for c in 0..block.ncols() {
                                neq.add(oa + r, ob + c, block[(r, c)]);
                            }
                        }
                    }
                }
            }
            Linearization::Quadratic { h, b, .. } => {
                // per-key offsets inside the factor's stacked tangent,
                // including fixed keys (their rows exist but are skipped)
                let mut local = Vec::with_capacity(keys.len());
                let mut off = 0;
                for &k in keys {
                    local.push(off);
                    off += values.get(k).map(|v| v.dim()).unwrap_or(0);
                }
                for (a, &ka) in keys.iter().enumerate() {
                    let Some(&ia) = ordering.index.get(&ka) else {
                        continue;
                    };
                    let oa = ordering.offsets[ia];
                    let la = local[a];
                    let da = key_dim(ordering, ia);
                    for r in 0..da {
                        rhs[oa + r] += b[la + r];
                    }
                    for (bk, &kb) in keys.iter().enumerate() {
                        let Some(&ib) = ordering.index.get(&kb) else {
                            continue;
                        };
                        let ob = ordering.offsets[ib];
                        let lb = local[bk];
                        let db = key_dim(ordering, ib);
                        for r in 0..da {
                            for c in 0..db {
                                neq.add(oa + r, ob + c, h[(la + r, lb + c)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn key_dim(ordering: &Ordering, i: usize) -> usize {
    let next = if i + 1 < ordering.offsets.len() {
        ordering.offsets[i + 1]
    } else {
        ordering.dim
    };
    next - ordering.offsets[i]
}

/// Banded Cholesky factorization in place; returns false if not positive
/// definite. `band[(i, d)]` holds entry `(i, i-d)`.
fn band_cholesky(band: &mut DMatrix<f64>, bw: usize) -> bool {
    let n = band.nrows();
    for j in 0..n {
        let lo = j.saturating_sub(bw);
        let mut d = band[(j, 0)];
        for k in lo..j {
            let l = band[(j, j - k)];
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let dj = d.sqrt();
        band[(j, 0)] = dj;
        let hi = (j + bw + 1).min(n);
        for i in (j + 1)..hi {
            let mut s = band[(i, i - j)];
            let lo_i = i.saturating_sub(bw).max(lo);
            for k in lo_i..j {
                s -= band[(i, i - k)] * band[(j, j - k)];
            }
            band[(i, i - j)] = s / dj;
        }
    }
    true
}

/// Solve `L L^T x = b` given the banded Cholesky factor.
fn band_solve(band: &DMatrix<f64>, bw: usize, b: &DVector<f64>) -> DVector<f64> {
    let n = band.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let lo = i.saturating_sub(bw);
        let mut s = y[i];
        for k in lo..i {
            s -= band[(i, i - k)] * y[k];
        }
        y[i] = s / band[(i, 0)];
    }
    let mut x = y;
    for i in (0..n).rev() {
        let hi = (i + bw + 1).min(n);
        let mut s = x[i];
        for k in (i + 1)..hi {
            s -= band[(k, k - i)] * x[k];
        }
        x[i] = s / band[(i, 0)];
    }
    x
}

/// Plain dense Cholesky solve.
pub(crate) fn dense_solve_plain(h: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Some(h.clone().cholesky()?.solve(b))
}

/// Dense solve with the trailing scalar block eliminated by Schur complement.
/// The scalar block must be diagonal (no factor couples two scalars).
pub(crate) fn dense_solve_schur(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    m: usize,
) -> Option<DVector<f64>> {
    let n = h.nrows();
    let s = n - m;
    if s == 0 {
        return dense_solve_plain(h, b);
    }
    let scale = h.amax();
    for i in 0..s {
        for j in 0..s {
            if i != j && h[(m + i, m + j)].abs() > 1e-9 * scale {
                // coupled scalars: fall back to the full factorization
                return dense_solve_plain(h, b);
            }
        }
    }
    let hpp = h.view((0, 0), (m, m));
    let hps = h.view((0, m), (m, s));
    let mut d_inv = DVector::zeros(s);
    for i in 0..s {
        let d = h[(m + i, m + i)];
        if d <= 0.0 {
            return None;
        }
        d_inv[i] = 1.0 / d;
    }
    // Hps * D^-1
    let mut hps_dinv = hps.clone_owned();
    for c in 0..s {
        let inv = d_inv[c];
        for r in 0..m {
            hps_dinv[(r, c)] *= inv;
        }
    }
    let h_red = hpp - &hps_dinv * hps.transpose();
    let h_red = (&h_red + h_red.transpose()) * 0.5;
    let b_p = b.rows(0, m);
    let b_s = b.rows(m, s);
    let rhs = b_p - &hps_dinv * b_s;
    let dp = h_red.cholesky()?.solve(&rhs);
    let ds_rhs = b_s - hps.transpose() * &dp;
    let mut x = DVector::zeros(n);
    x.rows_mut(0, m).copy_from(&dp);
    for i in 0..s {
        x[m + i] = ds_rhs[i] * d_inv[i];
    }
    Some(x)
}

/// Bandwidth needed so every factor's key span fits inside the band.
fn required_bandwidth(factors: &[&dyn Factor], ordering: &Ordering) -> usize {
    let mut bw = 0;
    for f in factors {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for &k in f.keys() {
            if let Some(&i) = ordering.index.get(&k) {
                lo = lo.min(ordering.offsets[i]);
                hi = hi.max(ordering.offsets[i] + key_dim(ordering, i));
            }
        }
        if lo != usize::MAX {
            bw = bw.max(hi - 1 - lo);
        }
    }
    bw
}

const DENSE_DIM_LIMIT: usize = 2000;

/// Run Levenberg-Marquardt over the factor set, updating `values` in place.
pub fn optimize(
    factors: &[&dyn Factor],
    values: &mut Values,
    opts: &SolverOptions,
) -> Result<OptimizeReport, GraphError> {
    let ordering = build_ordering(factors, values)?;
    if ordering.dim == 0 {
        return Ok(OptimizeReport {
            iterations: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
            converged: true,
        });
    }
    let use_band = match opts.strategy {
        LinearStrategy::Dense => false,
        LinearStrategy::Banded => true,
        LinearStrategy::Auto => {
            ordering.dim > DENSE_DIM_LIMIT && ordering.nonscalar_dim == ordering.dim
        }
    };
    let bw = if use_band {
        required_bandwidth(factors, &ordering)
    } else {
        0
    };

    let total_cost = |v: &Values| -> Result<f64, GraphError> {
        let mut c = 0.0;
        for f in factors {
            c += f.linearize(v)?.cost();
        }
        Ok(c)
    };

    let mut cost = total_cost(values)?;
    if !cost.is_finite() {
        return Err(GraphError::SolverDiverged);
    }
    let initial_cost = cost;
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        let lins: Vec<Linearization> = factors
            .iter()
            .map(|f| f.linearize(values))
            .collect::<Result<_, _>>()?;
        let mut neq = if use_band {
            NormalEq::Band {
                band: DMatrix::zeros(ordering.dim, bw + 1),
                bw,
            }
        } else {
            NormalEq::Dense {
                h: DMatrix::zeros(ordering.dim, ordering.dim),
            }
        };
        let mut rhs = DVector::zeros(ordering.dim);
        assemble(factors, &lins, values, &ordering, &mut neq, &mut rhs);
        let diag: Vec<f64> = (0..ordering.dim).map(|i| neq.diagonal(i)).collect();

        let mut accepted = false;
        for _ in 0..10 {
            // Marquardt damping on a copy of the diagonal
            for i in 0..ordering.dim {
                let target = diag[i] * (1.0 + lambda) + 1e-12;
                neq.add_diagonal(i, target - neq.diagonal(i));
            }
            let step = match &mut neq {
                NormalEq::Dense { h } => {
                    dense_solve_schur(h, &rhs, ordering.nonscalar_dim)
                }
                NormalEq::Band { band, bw } => {
                    let mut fac = band.clone();
                    if band_cholesky(&mut fac, *bw) {
                        Some(band_solve(&fac, *bw, &rhs))
                    } else {
                        None
                    }
                }
            };
            let Some(step) = step else {
                lambda *= opts.lambda_scale;
                continue;
            };
            let mut candidate = values.clone();
            for (i, &k) in ordering.keys.iter().enumerate() {
                let off = ordering.offsets[i];
                let d = key_dim(&ordering, i);
                candidate
                    .get_mut(k)
                    .unwrap()
                    .retract(&step.as_slice()[off..off + d]);
            }
            let new_cost = total_cost(&candidate)?;
            if new_cost.is_finite() && new_cost <= cost {
                let rel_drop = (cost - new_cost) / cost.abs().max(1.0);
                let small_step = step.norm() < opts.step_tolerance;
                *values = candidate;
                cost = new_cost;
                lambda = (lambda / opts.lambda_scale).max(1e-12);
                accepted = true;
                if rel_drop < opts.cost_tolerance || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= opts.lambda_scale;
        }
        if !accepted {
            // no downhill step found at any damping: treat as converged
            converged = true;
        }
        if converged {
            break;
        }
    }

    Ok(OptimizeReport {
        iterations,
        initial_cost,
        final_cost: cost,
        converged,
    })
}

/// Marginalize the `drop` keys out of the factor set at the current values.
///
/// The factors are linearized once, the dropped block is eliminated by Schur
/// complement (pseudo-inverse over a symmetric eigendecomposition, since the
/// dropped block of a gauge-deficient subgraph can be singular), and the
/// result is returned as a relinearizable Gaussian prior on the remaining
/// keys.
pub fn marginalize(
    factors: &[&dyn Factor],
    values: &Values,
    drop: &[Key],
) -> Result<MarginalPrior, GraphError> {
    let mut touched: BTreeMap<Key, usize> = BTreeMap::new();
    for f in factors {
        for &k in f.keys() {
            // a factor reaching outside the value set would couple the
            // dropped block to states the prior cannot represent
            let var = values.get(k).ok_or(GraphError::DanglingFactor(k))?;
            if !values.is_fixed(k) {
                touched.insert(k, var.dim());
            }
        }
    }
    let is_dropped = |k: &Key| drop.contains(k);
    let keep: Vec<Key> = touched.keys().copied().filter(|k| !is_dropped(k)).collect();
    let dropped: Vec<Key> = touched.keys().copied().filter(is_dropped).collect();

    // ordering: keep block first, dropped block last
    let mut ordering = Ordering {
        keys: Vec::new(),
        offsets: Vec::new(),
        index: BTreeMap::new(),
        dim: 0,
        nonscalar_dim: 0,
    };
    for &k in keep.iter().chain(dropped.iter()) {
        ordering.index.insert(k, ordering.keys.len());
        ordering.keys.push(k);
        ordering.offsets.push(ordering.dim);
        ordering.dim += touched[&k];
    }
    let keep_dim: usize = keep.iter().map(|k| touched[k]).sum();
    let drop_dim = ordering.dim - keep_dim;

    let lins: Vec<Linearization> = factors
        .iter()
        .map(|f| f.linearize(values))
        .collect::<Result<_, _>>()?;
    let mut neq = NormalEq::Dense {
        h: DMatrix::zeros(ordering.dim, ordering.dim),
    };
    let mut rhs = DVector::zeros(ordering.dim);
    assemble(factors, &lins, values, &ordering, &mut neq, &mut rhs);
    let h = match neq {
        NormalEq::Dense { h } => h,
        _ => unreachable!(),
    };

    let (h_keep, b_keep) = if drop_dim == 0 {
        (h, rhs)
    } else {
        let h_kk = h.view((0, 0), (keep_dim, keep_dim)).clone_owned();
        let h_kd = h.view((0, keep_dim), (keep_dim, drop_dim)).clone_owned();
        let h_dd = h
            .view((keep_dim, keep_dim), (drop_dim, drop_dim))
            .clone_owned();
        let h_dd = (&h_dd + h_dd.transpose()) * 0.5;
        let eig = h_dd.symmetric_eigen();
        let max_eig = eig.eigenvalues.amax().max(1e-300);
        let mut inv_vals = eig.eigenvalues.clone();
        for v in inv_vals.iter_mut() {
            *v = if *v > 1e-10 * max_eig { 1.0 / *v } else { 0.0 };
        }
        let mut h_dd_pinv = DMatrix::zeros(drop_dim, drop_dim);
        for i in 0..drop_dim {
            let col = eig.eigenvectors.column(i);
            h_dd_pinv += inv_vals[i] * &col * col.transpose();
        }
        let b_k = rhs.rows(0, keep_dim).clone_owned();
        let b_d = rhs.rows(keep_dim, drop_dim).clone_owned();
        let gain = &h_kd * &h_dd_pinv;
        let h_red = &h_kk - &gain * h_kd.transpose();
        let h_red = (&h_red + h_red.transpose()) * 0.5;
        (h_red, b_k - gain * b_d)
    };

    let lin: Vec<Variable> = keep
        .iter()
        .map(|&k| values.get(k).unwrap().clone())
        .collect();
    Ok(MarginalPrior::new(keep, lin, h_keep, b_keep))
}
