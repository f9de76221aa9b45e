//! Optimal-transport solvers.
//!
//! Three solvers live here. `mirror_descent_weights` learns a transport plan
//! with a *free* source marginal under negative-entropy regularization of the
//! row sums; its row sums are the sample weights used to align observational
//! units with experimental ones. `sinkhorn` solves the classic fixed-marginal
//! entropic problem. `exact_ot` is a small-instance exact solver
//! (transportation simplex, plus permutation enumeration for uniform square
//! instances) used as a test oracle.

use crate::scalar::Scalar;
use crate::tensor::{euclidean, ShapeError, Tensor};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cost matrix contains non-finite entries")]
    NonFiniteCost,
    #[error("numerical failure: {0}; try a smaller step size")]
    Numerical(String),
    #[error("invalid marginal: {0}")]
    MarginalInvalid(String),
    #[error("instance {rows}x{cols} too large for the exact solver (limit {limit} cells)")]
    InstanceTooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },
    #[error("batches do not partition the source index set: {0}")]
    NotAPartition(String),
    #[error("level {level} has mismatched mass between the two groups")]
    LevelMismatch { level: usize },
    #[error("transportation simplex did not terminate")]
    SimplexStalled,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

// ---- transport plans --------------------------------------------------------

/// Nonnegative coupling with explicit marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan<F: Scalar = f64> {
    pub gamma: Tensor<F>,
    pub source_marginal: Vec<F>,
    pub target_marginal: Vec<F>,
}

impl<F: Scalar> TransportPlan<F> {
    pub fn rows(&self) -> usize {
        self.gamma.rows()
    }

    pub fn cols(&self) -> usize {
        self.gamma.cols()
    }

    pub fn row_sums(&self) -> Vec<F> {
        (0..self.rows())
            .map(|i| self.gamma.row(i).iter().copied().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<F> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(self.gamma.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn total_mass(&self) -> F {
        self.gamma.sum()
    }

    pub fn transport_cost(&self, cost: &Tensor<F>) -> Result<F, OtError> {
        Ok(self.gamma.dot(cost)?)
    }

    /// Check the box constraint and both marginals against `tol`.
    pub fn validate(&self, tol: F) -> Result<(), OtError> {
        if self
            .gamma
            .data()
            .iter()
            .any(|&v| v < F::zero() || v > F::one() || !v.is_finite())
        {
            return Err(OtError::MarginalInvalid(
                "plan entries outside [0, 1]".into(),
            ));
        }
        for (i, (got, want)) in self
            .row_sums()
            .iter()
            .zip(&self.source_marginal)
            .enumerate()
        {
            if (*got - *want).abs() > tol {
                return Err(OtError::MarginalInvalid(format!(
                    "row {i}: sum {got} vs marginal {want}"
                )));
            }
        }
        for (j, (got, want)) in self
            .col_sums()
            .iter()
            .zip(&self.target_marginal)
            .enumerate()
        {
            if (*got - *want).abs() > tol {
                return Err(OtError::MarginalInvalid(format!(
                    "column {j}: sum {got} vs marginal {want}"
                )));
            }
        }
        Ok(())
    }

    /// Debug export: one `row,col,mass` line per entry.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "row,col,mass")?;
        for i in 0..self.rows() {
            for (j, &v) in self.gamma.row(i).iter().enumerate() {
                writeln!(out, "{i},{j},{v}")?;
            }
        }
        Ok(())
    }
}

// ---- cost matrix ------------------------------------------------------------

/// Component weights of the transport cost.
#[derive(Debug, Clone, Copy)]
pub struct CostBetas<F: Scalar = f64> {
    pub embedding: F,
    pub covariate: F,
    pub treatment: F,
}

impl<F: Scalar> Default for CostBetas<F> {
    fn default() -> Self {
        CostBetas {
            embedding: F::from_f64_const(10.0),
            covariate: F::from_f64_const(0.1),
            treatment: F::from_f64_const(0.1),
        }
    }
}

/// One group's inputs to the cost matrix: mean sequence embeddings (one row
/// per unit), raw covariates and treatments.
pub struct CostFeatures<'a, F: Scalar = f64> {
    pub embeddings: &'a Tensor<F>,
    pub covariates: &'a Tensor<F>,
    pub treatments: &'a [F],
}

/// `C_ij = beta_r d(rbar_i, rbar_j) + beta_x d(x_i, x_j) + beta_a d(a_i, a_j)`
/// with `d` the Euclidean distance.
pub fn build_cost_matrix<F: Scalar>(
    obs: &CostFeatures<F>,
    exp: &CostFeatures<F>,
    betas: &CostBetas<F>,
) -> Result<Tensor<F>, OtError> {
    if obs.embeddings.cols() != exp.embeddings.cols() {
        return Err(ShapeError::Incompatible {
            op: "build_cost_matrix (embeddings)",
            left: obs.embeddings.shape().to_vec(),
            right: exp.embeddings.shape().to_vec(),
        }
        .into());
    }
    if obs.covariates.cols() != exp.covariates.cols() {
        return Err(ShapeError::Incompatible {
            op: "build_cost_matrix (covariates)",
            left: obs.covariates.shape().to_vec(),
            right: exp.covariates.shape().to_vec(),
        }
        .into());
    }
    let (b, ne) = (obs.treatments.len(), exp.treatments.len());
    if obs.embeddings.rows() != b || obs.covariates.rows() != b {
        return Err(OtError::InvalidConfig(
            "observational feature row counts disagree".into(),
        ));
    }
    if exp.embeddings.rows() != ne || exp.covariates.rows() != ne {
        return Err(OtError::InvalidConfig(
            "experimental feature row counts disagree".into(),
        ));
    }
    let mut data = Vec::with_capacity(b * ne);
    for i in 0..b {
        for j in 0..ne {
            let dr = euclidean(obs.embeddings.row(i), exp.embeddings.row(j));
            let dx = euclidean(obs.covariates.row(i), exp.covariates.row(j));
            let da = (obs.treatments[i] - exp.treatments[j]).abs();
            data.push(betas.embedding * dr + betas.covariate * dx + betas.treatment * da);
        }
    }
    Ok(Tensor::new(vec![b, ne], data)?)
}

// ---- projected mirror descent ------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MirrorDescentConfig<F: Scalar = f64> {
    /// Strength of the negative-entropy penalty on the row sums.
    pub entropy_strength: F,
    /// Multiplicative step size.
    pub step_size: F,
    /// Fixed iteration count (no early stopping).
    pub iterations: usize,
    /// Record the objective after every iteration (used by the property
    /// tests; the training loop turns it off).
    pub track_objective: bool,
}

impl<F: Scalar> Default for MirrorDescentConfig<F> {
    fn default() -> Self {
        MirrorDescentConfig {
            entropy_strength: F::from_f64_const(100.0),
            step_size: F::from_f64_const(1e-3),
            iterations: 50,
            track_objective: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MirrorDescentOutput<F: Scalar = f64> {
    pub plan: TransportPlan<F>,
    /// Learned source weights (row sums of the plan); strictly positive and
    /// summing to one.
    pub weights: Vec<F>,
    /// Objective `<gamma, C> + lambda_e * sum_i w_i (log w_i - 1)` after each
    /// iteration, starting with the initial plan's value; empty when tracking
    /// is disabled.
    pub objective_trace: Vec<F>,
    /// Largest column-marginal deviation observed after any projection.
    pub max_column_violation: F,
}

/// Alternate a multiplicative proximal step `upsilon = gamma .* exp(-eta *
/// (C + lambda_e log(rowsum)))` with the closed-form column projection
/// `gamma_ij = upsilon_ij / (n_e sum_i upsilon_ij)`. Exponents above the
/// overflow guard switch the iteration into log space.
pub fn mirror_descent_weights<F: Scalar>(
    cost: &Tensor<F>,
    cfg: &MirrorDescentConfig<F>,
) -> Result<MirrorDescentOutput<F>, OtError> {
    if cfg.entropy_strength < F::zero() {
        return Err(OtError::InvalidConfig(
            "entropy strength must be nonnegative".into(),
        ));
    }
    if cfg.step_size <= F::zero() || cfg.iterations == 0 {
        return Err(OtError::InvalidConfig(
            "step size must be positive and iterations >= 1".into(),
        ));
    }
    if !cost.all_finite() {
        return Err(OtError::NonFiniteCost);
    }
    let (b, ne) = (cost.rows(), cost.cols());
    if b == 0 || ne == 0 {
        return Err(OtError::InvalidConfig("empty cost matrix".into()));
    }

    let guard = F::from_f64_const(50.0);
    let floor = F::from_f64_const(1e-300);
    let inv_ne = F::one() / F::from_f64_const(ne as f64);
    let mut gamma = vec![F::one() / F::from_f64_const((b * ne) as f64); b * ne];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut max_violation = F::zero();

    let objective = |g: &[F]| -> F {
        let cost_term: F = g.iter().zip(cost.data()).map(|(&x, &c)| x * c).sum();
        let mut ent = F::zero();
        for i in 0..b {
            let w: F = g[i * ne..(i + 1) * ne].iter().copied().sum();
            ent += w * (w.ln() - F::one());
        }
        cost_term + cfg.entropy_strength * ent
    };
    if cfg.track_objective {
        trace.push(objective(&gamma));
    }

    // the cost part of the proximal factor is constant across iterations;
    // hoist it so each iteration pays one exponential per row, not per cell
    let cost_factor: Vec<F> = cost
        .data()
        .iter()
        .map(|&c| (-cfg.step_size * c).exp())
        .collect();
    let cost_factor_safe = cost
        .data()
        .iter()
        .all(|&c| (cfg.step_size * c).abs() <= guard);

    let mut exponent = vec![F::zero(); b * ne];
    let mut row_factor = vec![F::zero(); b];
    for _ in 0..cfg.iterations {
        let mut direct = cost_factor_safe;
        for (i, rf) in row_factor.iter_mut().enumerate() {
            let w: F = gamma[i * ne..(i + 1) * ne].iter().copied().sum();
            let e = -cfg.step_size * cfg.entropy_strength * w.ln();
            if e.abs() > guard {
                direct = false;
            }
            *rf = e.exp();
        }
        if direct {
            for i in 0..b {
                let rf = row_factor[i];
                for (g, &k) in gamma[i * ne..(i + 1) * ne]
                    .iter_mut()
                    .zip(&cost_factor[i * ne..(i + 1) * ne])
                {
                    *g = *g * k * rf;
                }
            }
            for j in 0..ne {
                let mut s = F::zero();
                for i in 0..b {
                    s += gamma[i * ne + j];
                }
                if !(s.is_finite() && s > F::zero()) {
                    return Err(OtError::Numerical(format!("column {j} mass degenerate")));
                }
                let scale = inv_ne / s;
                for i in 0..b {
                    let g = &mut gamma[i * ne + j];
                    *g = (*g * scale).max(floor);
                }
            }
        } else {
            for i in 0..b {
                let w: F = gamma[i * ne..(i + 1) * ne].iter().copied().sum();
                let log_w = w.ln();
                for j in 0..ne {
                    exponent[i * ne + j] =
                        -cfg.step_size * (cost.get2(i, j) + cfg.entropy_strength * log_w);
                }
            }
            // log-space proximal step and projection
            for (e, &g) in exponent.iter_mut().zip(gamma.iter()) {
                *e += g.ln();
            }
            for j in 0..ne {
                let mut mx = F::neg_infinity();
                for i in 0..b {
                    mx = mx.max(exponent[i * ne + j]);
                }
                if !mx.is_finite() {
                    return Err(OtError::Numerical(format!(
                        "column {j} log-mass degenerate"
                    )));
                }
                let mut s = F::zero();
                for i in 0..b {
                    s += (exponent[i * ne + j] - mx).exp();
                }
                let log_norm = mx + s.ln();
                for i in 0..b {
                    let lg = exponent[i * ne + j] - log_norm + inv_ne.ln();
                    gamma[i * ne + j] = lg.exp().max(floor);
                }
            }
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(OtError::Numerical("plan became non-finite".into()));
        }
        for j in 0..ne {
            let mut s = F::zero();
            for i in 0..b {
                s += gamma[i * ne + j];
            }
            max_violation = max_violation.max((s - inv_ne).abs());
        }
        if cfg.track_objective {
            trace.push(objective(&gamma));
        }
    }

    let gamma = Tensor::new(vec![b, ne], gamma)?;
    let weights: Vec<F> = (0..b)
        .map(|i| gamma.row(i).iter().copied().sum())
        .collect();
    let plan = TransportPlan {
        gamma,
        source_marginal: weights.clone(),
        target_marginal: vec![inv_ne; ne],
    };
    Ok(MirrorDescentOutput {
        plan,
        weights,
        objective_trace: trace,
        max_column_violation: max_violation,
    })
}

// ---- Sinkhorn ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SinkhornResult<F: Scalar = f64> {
    pub plan: TransportPlan<F>,
    /// Transport cost `<gamma, C>` of the entropic plan.
    pub cost: F,
    pub converged: bool,
    pub iterations: usize,
}

/// Entropic OT with both marginals fixed. `epsilon` is relative to the mean
/// cost entry, which keeps the kernel exponents in a sane range across cost
/// scales. Returns the best iterate with `converged = false` when `tol` is
/// not reached within `max_iters`.
pub fn sinkhorn<F: Scalar>(
    cost: &Tensor<F>,
    row_marginal: &[F],
    col_marginal: &[F],
    epsilon: F,
    max_iters: usize,
    tol: F,
) -> Result<SinkhornResult<F>, OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    validate_marginal(row_marginal, m, "row")?;
    validate_marginal(col_marginal, n, "column")?;
    if epsilon <= F::zero() {
        return Err(OtError::InvalidConfig("epsilon must be positive".into()));
    }
    if !cost.all_finite() {
        return Err(OtError::NonFiniteCost);
    }

    let mean = cost.data().iter().map(|&c| c.abs()).sum::<F>()
        / F::from_f64_const((m * n).max(1) as f64);
    let eps_abs = if mean > F::zero() {
        epsilon * mean
    } else {
        epsilon
    };

    // kernel in plain space; fall back to log-domain stabilization if the
    // scaling degenerates
    let kernel: Vec<F> = cost.data().iter().map(|&c| (-c / eps_abs).exp()).collect();
    let mut u = vec![F::one(); m];
    let mut v = vec![F::one(); n];
    let mut converged = false;
    let mut iterations = 0;
    let mut degenerate = false;

    for it in 0..max_iters {
        iterations = it + 1;
        for i in 0..m {
            let mut s = F::zero();
            for j in 0..n {
                s += kernel[i * n + j] * v[j];
            }
            if s <= F::zero() || !s.is_finite() {
                degenerate = true;
                break;
            }
            u[i] = row_marginal[i] / s;
        }
        if degenerate {
            break;
        }
        for j in 0..n {
            let mut s = F::zero();
            for i in 0..m {
                s += kernel[i * n + j] * u[i];
            }
            if s <= F::zero() || !s.is_finite() {
                degenerate = true;
                break;
            }
            v[j] = col_marginal[j] / s;
        }
        if degenerate {
            break;
        }
        // columns were scaled last and are exact; row violation measures
        // convergence
        let mut err = F::zero();
        for i in 0..m {
            let mut s = F::zero();
            for j in 0..n {
                s += u[i] * kernel[i * n + j] * v[j];
            }
            err = err.max((s - row_marginal[i]).abs());
        }
        if err <= tol {
            converged = true;
            break;
        }
    }

    if degenerate {
        return sinkhorn_log_domain(cost, row_marginal, col_marginal, eps_abs, max_iters, tol);
    }

    let mut gamma = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            gamma.push(u[i] * kernel[i * n + j] * v[j]);
        }
    }
    finish_sinkhorn(cost, row_marginal, col_marginal, gamma, converged, iterations)
}

/// Log-domain Sinkhorn used when the plain kernel underflows.
fn sinkhorn_log_domain<F: Scalar>(
    cost: &Tensor<F>,
    row_marginal: &[F],
    col_marginal: &[F],
    eps_abs: F,
    max_iters: usize,
    tol: F,
) -> Result<SinkhornResult<F>, OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    let mut f = vec![F::zero(); m];
    let mut g = vec![F::zero(); n];
    let log_r: Vec<F> = row_marginal.iter().map(|&r| r.ln()).collect();
    let log_c: Vec<F> = col_marginal.iter().map(|&c| c.ln()).collect();
    let mut converged = false;
    let mut iterations = 0;

    fn lse<F: Scalar>(vals: impl Iterator<Item = F>) -> F {
        let collected: Vec<F> = vals.collect();
        let mx = collected.iter().copied().fold(F::neg_infinity(), F::max);
        if !mx.is_finite() {
            return mx;
        }
        let s: F = collected.iter().map(|&x| (x - mx).exp()).sum();
        mx + s.ln()
    }

    for it in 0..max_iters {
        iterations = it + 1;
        for i in 0..m {
            let l = lse((0..n).map(|j| (g[j] - cost.get2(i, j)) / eps_abs));
            f[i] = eps_abs * (log_r[i] - l);
        }
        for j in 0..n {
            let l = lse((0..m).map(|i| (f[i] - cost.get2(i, j)) / eps_abs));
            g[j] = eps_abs * (log_c[j] - l);
        }
        let mut err = F::zero();
        for i in 0..m {
            let mut s = F::zero();
            for j in 0..n {
                s += ((f[i] + g[j] - cost.get2(i, j)) / eps_abs).exp();
            }
            err = err.max((s - row_marginal[i]).abs());
        }
        if err <= tol {
            converged = true;
            break;
        }
    }
    let mut gamma = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            gamma.push(((f[i] + g[j] - cost.get2(i, j)) / eps_abs).exp());
        }
    }
    finish_sinkhorn(cost, row_marginal, col_marginal, gamma, converged, iterations)
}

fn finish_sinkhorn<F: Scalar>(
    cost: &Tensor<F>,
    row_marginal: &[F],
    col_marginal: &[F],
    gamma: Vec<F>,
    converged: bool,
    iterations: usize,
) -> Result<SinkhornResult<F>, OtError> {
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(OtError::Numerical("sinkhorn plan non-finite".into()));
    }
    let gamma = Tensor::new(vec![row_marginal.len(), col_marginal.len()], gamma)?;
    let cost_value = gamma.dot(cost)?;
    Ok(SinkhornResult {
        plan: TransportPlan {
            gamma,
            source_marginal: row_marginal.to_vec(),
            target_marginal: col_marginal.to_vec(),
        },
        cost: cost_value,
        converged,
        iterations,
    })
}

fn validate_marginal<F: Scalar>(m: &[F], len: usize, side: &str) -> Result<(), OtError> {
    if m.len() != len {
        return Err(OtError::MarginalInvalid(format!(
            "{side} marginal length {} vs matrix {len}",
            m.len()
        )));
    }
    if m.iter().any(|&v| v <= F::zero() || !v.is_finite()) {
        return Err(OtError::MarginalInvalid(format!(
            "{side} marginal must be strictly positive"
        )));
    }
    let total: F = m.iter().copied().sum();
    if (total - F::one()).abs() > F::from_f64_const(1e-8) {
        return Err(OtError::MarginalInvalid(format!(
            "{side} marginal sums to {total}, expected 1"
        )));
    }
    Ok(())
}

// ---- exact solver (test oracle) ------------------------------------------------

pub const EXACT_CELL_LIMIT: usize = 512;

#[derive(Debug, Clone)]
pub struct ExactOt<F: Scalar = f64> {
    pub cost: F,
    pub plan: TransportPlan<F>,
}

/// Exact Kantorovich optimum for small instances. Uniform square instances up
/// to 6x6 are solved by permutation enumeration; everything else within the
/// cell limit goes through the transportation simplex.
pub fn exact_ot<F: Scalar>(
    cost: &Tensor<F>,
    row_marginal: &[F],
    col_marginal: &[F],
) -> Result<ExactOt<F>, OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    validate_marginal(row_marginal, m, "row")?;
    validate_marginal(col_marginal, n, "column")?;
    if m * n > EXACT_CELL_LIMIT {
        return Err(OtError::InstanceTooLarge {
            rows: m,
            cols: n,
            limit: EXACT_CELL_LIMIT,
        });
    }
    if m == n && n <= 6 && is_uniform(row_marginal) && is_uniform(col_marginal) {
        return Ok(exact_ot_permutations(cost));
    }
    transport_simplex(cost, row_marginal, col_marginal)
}

fn is_uniform<F: Scalar>(m: &[F]) -> bool {
    let expect = F::one() / F::from_f64_const(m.len() as f64);
    let tol = F::from_f64_const(1e-12);
    m.iter().all(|&v| (v - expect).abs() <= tol)
}

/// With uniform marginals on a square instance some optimal plan is a
/// permutation matrix scaled by `1/n` (Birkhoff), so enumeration is exact.
fn exact_ot_permutations<F: Scalar>(cost: &Tensor<F>) -> ExactOt<F> {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(F, Vec<usize>)> = None;
    permute(&mut perm, 0, &mut |p| {
        let total: F = p.iter().enumerate().map(|(i, &j)| cost.get2(i, j)).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p.to_vec()));
        }
    });
    let (total, p) = best.expect("n >= 1");
    let inv_n = F::one() / F::from_f64_const(n as f64);
    let mut gamma = Tensor::zeros(&[n, n]);
    for (i, &j) in p.iter().enumerate() {
        gamma.set2(i, j, inv_n);
    }
    ExactOt {
        cost: total * inv_n,
        plan: TransportPlan {
            gamma,
            source_marginal: vec![inv_n; n],
            target_marginal: vec![inv_n; n],
        },
    }
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Dense transportation simplex with explicit basis tree and dual recovery.
fn transport_simplex<F: Scalar>(
    cost: &Tensor<F>,
    row_marginal: &[F],
    col_marginal: &[F],
) -> Result<ExactOt<F>, OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    let mut alloc = vec![F::zero(); m * n];
    let mut basic = vec![false; m * n];

    // northwest-corner initial basis: exactly m + n - 1 basic cells, some
    // possibly at zero allocation
    {
        let mut supply: Vec<F> = row_marginal.to_vec();
        let mut demand: Vec<F> = col_marginal.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let q = supply[i].min(demand[j]);
            alloc[i * n + j] = q;
            basic[i * n + j] = true;
            supply[i] -= q;
            demand[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if supply[i] <= F::zero() && i < m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let tol = F::from_f64_const(1e-11);
    let max_pivots = 200 * (m + n);
    let mut u = vec![F::zero(); m];
    let mut v = vec![F::zero(); n];

    for _pivot in 0..max_pivots {
        compute_duals(cost, &basic, m, n, &mut u, &mut v)?;
        let mut entering: Option<(usize, usize, F)> = None;
        for i in 0..m {
            for j in 0..n {
                if basic[i * n + j] {
                    continue;
                }
                let red = cost.get2(i, j) - u[i] - v[j];
                if red < -tol && entering.as_ref().is_none_or(|&(_, _, b)| red < b) {
                    entering = Some((i, j, red));
                }
            }
        }
        let Some((ei, ej, _)) = entering else {
            // optimal; duals certify it and feasibility is re-checked
            let gamma = Tensor::new(vec![m, n], alloc)?;
            let plan = TransportPlan {
                gamma,
                source_marginal: row_marginal.to_vec(),
                target_marginal: col_marginal.to_vec(),
            };
            plan.validate(F::from_f64_const(1e-9))?;
            let cost_value = plan.transport_cost(cost)?;
            return Ok(ExactOt {
                cost: cost_value,
                plan,
            });
        };

        // unique cycle through the basis tree from row ei to column ej;
        // cells alternate -, +, -, ... starting at (ei, path[0])
        let path = basis_path(&basic, m, n, ei, ej).ok_or(OtError::SimplexStalled)?;
        let mut cells = Vec::with_capacity(path.len());
        let mut prev_row = ei;
        for pair in path.chunks(2) {
            let col = pair[0];
            cells.push((prev_row, col, true));
            if let Some(&row) = pair.get(1) {
                cells.push((row, col, false));
                prev_row = row;
            }
        }
        let mut theta: Option<(F, usize, usize)> = None;
        for &(i, j, minus) in &cells {
            if minus {
                let a = alloc[i * n + j];
                if theta.as_ref().is_none_or(|&(t, _, _)| a < t) {
                    theta = Some((a, i, j));
                }
            }
        }
        let (theta, li, lj) = theta.ok_or(OtError::SimplexStalled)?;
        alloc[ei * n + ej] += theta;
        basic[ei * n + ej] = true;
        for &(i, j, minus) in &cells {
            if minus {
                alloc[i * n + j] = (alloc[i * n + j] - theta).max(F::zero());
            } else {
                alloc[i * n + j] += theta;
            }
        }
        basic[li * n + lj] = false;
    }
    Err(OtError::SimplexStalled)
}

/// Duals satisfying `u_i + v_j = C_ij` on basic cells, via traversal of the
/// basis spanning tree rooted at row 0.
fn compute_duals<F: Scalar>(
    cost: &Tensor<F>,
    basic: &[bool],
    m: usize,
    n: usize,
    u: &mut [F],
    v: &mut [F],
) -> Result<(), OtError> {
    let mut u_set = vec![false; m];
    let mut v_set = vec![false; n];
    u[0] = F::zero();
    u_set[0] = true;
    let mut frontier: Vec<(bool, usize)> = vec![(true, 0)];
    while let Some((is_row, idx)) = frontier.pop() {
        if is_row {
            for j in 0..n {
                if basic[idx * n + j] && !v_set[j] {
                    v[j] = cost.get2(idx, j) - u[idx];
                    v_set[j] = true;
                    frontier.push((false, j));
                }
            }
        } else {
            for i in 0..m {
                if basic[i * n + idx] && !u_set[i] {
                    u[i] = cost.get2(i, idx) - v[idx];
                    u_set[i] = true;
                    frontier.push((true, i));
                }
            }
        }
    }
    if u_set.iter().all(|&s| s) && v_set.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(OtError::SimplexStalled)
    }
}

/// Alternating column/row path from row `ei` to column `ej` through basic
/// cells, excluding the entering cell. Returned as `[c0, r1, c1, ..., ej]`.
fn basis_path(basic: &[bool], m: usize, n: usize, ei: usize, ej: usize) -> Option<Vec<usize>> {
    let total = m + n;
    let mut parent = vec![usize::MAX; total];
    let mut visited = vec![false; total];
    let start = ei;
    let goal = m + ej;
    visited[start] = true;
    let mut stack = vec![start];
    while let Some(vtx) = stack.pop() {
        if vtx == goal {
            break;
        }
        if vtx < m {
            for j in 0..n {
                if basic[vtx * n + j] && !visited[m + j] {
                    visited[m + j] = true;
                    parent[m + j] = vtx;
                    stack.push(m + j);
                }
            }
        } else {
            let j = vtx - m;
            for i in 0..m {
                if basic[i * n + j] && !visited[i] {
                    visited[i] = true;
                    parent[i] = vtx;
                    stack.push(i);
                }
            }
        }
    }
    if !visited[goal] {
        return None;
    }
    let mut rev = Vec::new();
    let mut cur = goal;
    while cur != start {
        rev.push(cur);
        cur = parent[cur];
    }
    rev.reverse();
    Some(
        rev.into_iter()
            .map(|vtx| if vtx < m { vtx } else { vtx - m })
            .collect(),
    )
}

// ---- mini-batch padding ---------------------------------------------------------

/// Average per-batch plans (each over a disjoint index set of the source)
/// into a full coupling. Every batch must share the target marginal and carry
/// a uniform `1/b` source marginal.
pub fn pad_and_average<F: Scalar>(
    batches: &[(Vec<usize>, TransportPlan<F>)],
    n_source: usize,
) -> Result<TransportPlan<F>, OtError> {
    if batches.is_empty() {
        return Err(OtError::NotAPartition("no batches".into()));
    }
    let k = batches.len();
    let b = batches[0].0.len();
    if b * k != n_source {
        return Err(OtError::NotAPartition(format!(
            "{k} batches of {b} cannot cover {n_source} rows"
        )));
    }
    let ne = batches[0].1.cols();
    let mut seen = vec![false; n_source];
    for (indices, plan) in batches {
        if indices.len() != b || plan.rows() != b || plan.cols() != ne {
            return Err(OtError::NotAPartition(
                "batch sizes or plan shapes disagree".into(),
            ));
        }
        for &idx in indices {
            if idx >= n_source || seen[idx] {
                return Err(OtError::NotAPartition(format!(
                    "index {idx} repeated or out of range"
                )));
            }
            seen[idx] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(OtError::NotAPartition("indices do not cover source".into()));
    }

    let inv_k = F::one() / F::from_f64_const(k as f64);
    let mut gamma = Tensor::zeros(&[n_source, ne]);
    for (indices, plan) in batches {
        for (bi, &src) in indices.iter().enumerate() {
            for j in 0..ne {
                let cur = gamma.get2(src, j);
                gamma.set2(src, j, cur + inv_k * plan.gamma.get2(bi, j));
            }
        }
    }
    let target = batches[0].1.target_marginal.clone();
    let inv_n = F::one() / F::from_f64_const(n_source as f64);
    Ok(TransportPlan {
        gamma,
        source_marginal: vec![inv_n; n_source],
        target_marginal: target,
    })
}

// ---- conditional OT ------------------------------------------------------------

/// Unit of a grouped instance: a discrete `(x, a)` level plus an outcome
/// vector.
#[derive(Debug, Clone)]
pub struct GroupedUnit<F: Scalar = f64> {
    pub level: usize,
    pub outcome: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct ConditionalOtOutput<F: Scalar = f64> {
    /// Mass-weighted sum over levels of the exact OT between the two groups'
    /// conditional outcome distributions.
    pub conditional_sum: F,
    /// Exact OT between the two joint distributions under the separable cost.
    pub joint_cost: F,
}

/// Conditional-versus-joint OT under a separable Euclidean cost
/// `C = d(s, s') + d(x, x') + d(a, a')`.
///
/// Levels must be present in both groups with equal probability mass; the
/// level-wise couplings then compose into a feasible plan for the joint
/// problem. Each level's term is the exact OT between the restricted
/// (mass-carrying) conditional measures.
pub fn conditional_ot_sum<F: Scalar>(
    levels: &[(Vec<F>, F)],
    obs: &[GroupedUnit<F>],
    exp: &[GroupedUnit<F>],
) -> Result<ConditionalOtOutput<F>, OtError> {
    if obs.is_empty() || exp.is_empty() {
        return Err(OtError::InvalidConfig("empty group".into()));
    }
    let n_o = obs.len();
    let n_e = exp.len();
    for (name, group) in [("observational", obs), ("experimental", exp)] {
        for unit in group {
            if unit.level >= levels.len() {
                return Err(OtError::InvalidConfig(format!(
                    "{name} unit references unknown level {}",
                    unit.level
                )));
            }
        }
    }

    let mut conditional_sum = F::zero();
    for level in 0..levels.len() {
        let o_idx: Vec<usize> = (0..n_o).filter(|&i| obs[i].level == level).collect();
        let e_idx: Vec<usize> = (0..n_e).filter(|&j| exp[j].level == level).collect();
        if o_idx.is_empty() && e_idx.is_empty() {
            continue;
        }
        // equal mass per level in both groups, checked in integer arithmetic
        if o_idx.len() * n_e != e_idx.len() * n_o {
            return Err(OtError::LevelMismatch { level });
        }
        let mass = F::from_f64_const(o_idx.len() as f64 / n_o as f64);
        let mut cost = Vec::with_capacity(o_idx.len() * e_idx.len());
        for &i in &o_idx {
            for &j in &e_idx {
                cost.push(euclidean(&obs[i].outcome, &exp[j].outcome));
            }
        }
        let cost = Tensor::new(vec![o_idx.len(), e_idx.len()], cost)?;
        let ru = vec![F::one() / F::from_f64_const(o_idx.len() as f64); o_idx.len()];
        let cu = vec![F::one() / F::from_f64_const(e_idx.len() as f64); e_idx.len()];
        let level_ot = exact_ot(&cost, &ru, &cu)?;
        conditional_sum += mass * level_ot.cost;
    }

    let mut joint = Vec::with_capacity(n_o * n_e);
    for o in obs {
        let (ox, oa) = &levels[o.level];
        for e in exp {
            let (ex, ea) = &levels[e.level];
            let c = euclidean(&o.outcome, &e.outcome) + euclidean(ox, ex) + (*oa - *ea).abs();
            joint.push(c);
        }
    }
    let joint = Tensor::new(vec![n_o, n_e], joint)?;
    let ru = vec![F::one() / F::from_f64_const(n_o as f64); n_o];
    let cu = vec![F::one() / F::from_f64_const(n_e as f64); n_e];
    let joint_cost = exact_ot(&joint, &ru, &cu)?.cost;

    Ok(ConditionalOtOutput {
        conditional_sum,
        joint_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn uniform<F: Scalar>(n: usize) -> Vec<F> {
        vec![F::one() / F::from_f64_const(n as f64); n]
    }

    #[test]
    fn mirror_descent_single_cell_is_forced() {
        let cost: Tensor<f64> = Tensor::new(vec![1, 1], vec![7.3]).unwrap();
        let out = mirror_descent_weights(&cost, &MirrorDescentConfig::default()).unwrap();
        assert!((out.plan.gamma.data()[0] - 1.0).abs() < 1e-12);
        assert!((out.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mirror_descent_reaches_free_marginal_optimum() {
        // with negligible entropy the optimum puts each column's 1/n_e on its
        // cheapest row; for this cost the optimum value is 0 and w = (.5, .5)
        let cost = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let cfg = MirrorDescentConfig {
            entropy_strength: 1e-6,
            step_size: 0.05,
            iterations: 5000,
            ..Default::default()
        };
        let out = mirror_descent_weights(&cost, &cfg).unwrap();
        let transport: f64 = out.plan.transport_cost(&cost).unwrap();
        assert!(transport.abs() < 0.02, "cost {transport}");
        assert!((out.weights[0] - 0.5).abs() < 1e-2);
        assert!((out.weights[1] - 0.5).abs() < 1e-2);
    }

    #[test]
    fn mirror_descent_entropy_dominated_weights_are_uniform() {
        let mut rng = StdRng::seed_from_u64(2);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let cost = Tensor::new(vec![3, 4], data).unwrap();
        let lambda = 1e6;
        let cfg = MirrorDescentConfig {
            entropy_strength: lambda,
            // stability of the multiplicative update needs eta * lambda <= 1
            step_size: 0.5 / lambda,
            iterations: 200,
            ..Default::default()
        };
        let out = mirror_descent_weights(&cost, &cfg).unwrap();
        for &w in &out.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-2, "w {w}");
        }
    }

    #[test]
    fn mirror_descent_objective_is_monotone_and_columns_projected() {
        let mut rng = StdRng::seed_from_u64(3);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..5.0)).collect();
        let cost = Tensor::new(vec![8, 5], data).unwrap();
        let out = mirror_descent_weights(&cost, &MirrorDescentConfig::default()).unwrap();
        for pair in out.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-7, "{} -> {}", pair[0], pair[1]);
        }
        assert!(out.max_column_violation <= 1e-9);
        assert!(out.plan.gamma.data().iter().all(|&g| g > 0.0));
        let total: f64 = out.weights.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
        out.plan.validate(1e-9).unwrap();
    }

    #[test]
    fn mirror_descent_rejects_bad_inputs() {
        let cost = Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            mirror_descent_weights(&cost, &MirrorDescentConfig::default()),
            Err(OtError::NonFiniteCost)
        ));
        let ok = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let cfg = MirrorDescentConfig {
            entropy_strength: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            mirror_descent_weights(&ok, &cfg),
            Err(OtError::InvalidConfig(_))
        ));
    }

    #[test]
    fn sinkhorn_zero_cost_gives_outer_product() {
        let cost = Tensor::zeros(&[3, 4]);
        let r = vec![0.5, 0.3, 0.2];
        let c = uniform::<f64>(4);
        let res = sinkhorn(&cost, &r, &c, 0.1, 500, 1e-12).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = r[i] * c[j];
                assert!((res.plan.gamma.get2(i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sinkhorn_concentrates_on_diagonal() {
        let cost = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = uniform::<f64>(2);
        let c = uniform::<f64>(2);
        let res = sinkhorn(&cost, &r, &c, 0.01, 5000, 1e-13).unwrap();
        assert!((res.plan.gamma.get2(0, 0) - 0.5).abs() < 1e-3);
        assert!((res.plan.gamma.get2(1, 1) - 0.5).abs() < 1e-3);
        assert!(res.cost < 1e-2);
    }

    #[test]
    fn sinkhorn_satisfies_marginals_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..3 {
            let data: Vec<f64> = (0..35).map(|_| rng.random_range(0.0..3.0)).collect();
            let cost = Tensor::new(vec![5, 7], data).unwrap();
            let mut r: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
            let rs: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= rs);
            let mut c: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..1.0)).collect();
            let cs: f64 = c.iter().sum();
            c.iter_mut().for_each(|v| *v /= cs);
            let res = sinkhorn(&cost, &r, &c, 0.1, 10_000, 1e-8).unwrap();
            assert!(res.converged);
            for (got, want) in res.plan.row_sums().iter().zip(&r) {
                assert!((got - want).abs() <= 1e-6);
            }
            for (got, want) in res.plan.col_sums().iter().zip(&c) {
                assert!((got - want).abs() <= 1e-6);
            }
            // entropic cost upper-bounds the exact optimum
            let exact = exact_ot(&cost, &r, &c).unwrap();
            assert!(res.cost >= exact.cost - 1e-9);
        }
    }

    #[test]
    fn exact_identity_permutation_is_free() {
        let mut cost = Tensor::full(&[3, 3], 1.0);
        for i in 0..3 {
            cost.set2(i, i, 0.0);
        }
        let res = exact_ot(&cost, &uniform::<f64>(3), &uniform::<f64>(3)).unwrap();
        assert_eq!(res.cost, 0.0);
    }

    #[test]
    fn exact_two_by_two_enumeration() {
        let cost = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        let res = exact_ot(&cost, &uniform::<f64>(2), &uniform::<f64>(2)).unwrap();
        assert!((res.cost - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_single_row_is_forced() {
        let cost: Tensor<f64> = Tensor::new(vec![1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let c = vec![0.2, 0.3, 0.5];
        let res = exact_ot(&cost, &[1.0], &c).unwrap();
        let expect = 0.2 * 2.0 + 0.3 * 4.0 + 0.5 * 6.0;
        assert!((res.cost - expect).abs() < 1e-12);
    }

    #[test]
    fn simplex_agrees_with_permutation_enumeration() {
        let mut rng = StdRng::seed_from_u64(11);
        for n in [3usize, 4, 5] {
            for _ in 0..5 {
                let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..2.0)).collect();
                let cost = Tensor::new(vec![n, n], data).unwrap();
                let by_perm = exact_ot_permutations(&cost);
                let by_simplex =
                    transport_simplex(&cost, &uniform::<f64>(n), &uniform::<f64>(n)).unwrap();
                assert!(
                    (by_perm.cost - by_simplex.cost).abs() < 1e-9,
                    "n={n}: {} vs {}",
                    by_perm.cost,
                    by_simplex.cost
                );
            }
        }
    }

    #[test]
    fn pad_and_average_single_batch_is_identity() {
        let cost = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let res = exact_ot(&cost, &uniform::<f64>(3), &uniform::<f64>(2)).unwrap();
        let avg = pad_and_average(&[((0..3).collect(), res.plan.clone())], 3).unwrap();
        for (a, b) in avg.gamma.data().iter().zip(res.plan.gamma.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pad_and_average_has_exact_marginals() {
        // arbitrary valid per-batch plans on n_o = 4, b = 2, n_e = 2
        let gamma1 = Tensor::new(vec![2, 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        let gamma2 = Tensor::new(vec![2, 2], vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let mk = |g: Tensor<f64>| TransportPlan {
            gamma: g,
            source_marginal: vec![0.5, 0.5],
            target_marginal: vec![0.5, 0.5],
        };
        let avg = pad_and_average(
            &[(vec![0, 2], mk(gamma1)), (vec![1, 3], mk(gamma2))],
            4,
        )
        .unwrap();
        for s in avg.row_sums() {
            assert!((s - 0.25).abs() <= 1e-12);
        }
        for s in avg.col_sums() {
            assert!((s - 0.5).abs() <= 1e-12);
        }
    }

    #[test]
    fn pad_and_average_rejects_non_partition() {
        let gamma = Tensor::new(vec![2, 2], vec![0.25; 4]).unwrap();
        let plan = TransportPlan {
            gamma,
            source_marginal: vec![0.5, 0.5],
            target_marginal: vec![0.5, 0.5],
        };
        let err = pad_and_average(&[(vec![0, 1], plan.clone()), (vec![1, 2], plan)], 4)
            .unwrap_err();
        assert!(matches!(err, OtError::NotAPartition(_)));
    }

    #[test]
    fn minibatch_cost_upper_bounds_full_ot() {
        let mut rng = StdRng::seed_from_u64(23);
        let (n_o, b, n_e) = (8usize, 4usize, 3usize);
        let data: Vec<f64> = (0..n_o * n_e).map(|_| rng.random_range(0.0..1.0)).collect();
        let cost = Tensor::new(vec![n_o, n_e], data).unwrap();
        let col = uniform::<f64>(n_e);
        let full = exact_ot(&cost, &uniform::<f64>(n_o), &col).unwrap();

        let mut indices: Vec<usize> = (0..n_o).collect();
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);
        let mut batches = Vec::new();
        let mut m_ot = 0.0;
        let k = n_o / b;
        for chunk in indices.chunks(b) {
            let sub: Vec<f64> = chunk.iter().flat_map(|&i| cost.row(i).to_vec()).collect();
            let sub = Tensor::new(vec![b, n_e], sub).unwrap();
            let res = exact_ot(&sub, &uniform::<f64>(b), &col).unwrap();
            m_ot += res.cost / k as f64;
            batches.push((chunk.to_vec(), res.plan));
        }
        assert!(m_ot >= full.cost - 1e-9);
        let avg = pad_and_average(&batches, n_o).unwrap();
        avg.validate(1e-12).unwrap();
        let avg_cost: f64 = avg.transport_cost(&cost).unwrap();
        assert!((avg_cost - m_ot).abs() < 1e-9);
    }

    fn grouped_instance(
        rng: &mut StdRng,
        n_levels: usize,
        per_o: usize,
        per_e: usize,
    ) -> (
        Vec<(Vec<f64>, f64)>,
        Vec<GroupedUnit<f64>>,
        Vec<GroupedUnit<f64>>,
    ) {
        // level coordinates far apart relative to outcome spread, so the
        // optimal joint plan never crosses levels
        let levels: Vec<(Vec<f64>, f64)> = (0..n_levels)
            .map(|l| {
                (
                    vec![50.0 * l as f64, rng.random_range(-1.0..1.0)],
                    l as f64 * 25.0,
                )
            })
            .collect();
        let mk = |rng: &mut StdRng, n: usize| -> Vec<GroupedUnit<f64>> {
            (0..n_levels)
                .flat_map(|level| {
                    (0..n)
                        .map(|_| GroupedUnit {
                            level,
                            outcome: vec![
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                            ],
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let obs = mk(rng, per_o);
        let exp = mk(rng, per_e);
        (levels, obs, exp)
    }

    #[test]
    fn conditional_single_level_equals_plain_ot() {
        let mut rng = StdRng::seed_from_u64(31);
        let (levels, obs, exp) = grouped_instance(&mut rng, 1, 4, 3);
        let out = conditional_ot_sum(&levels, &obs, &exp).unwrap();
        let mut cost = Vec::new();
        for o in &obs {
            for e in &exp {
                cost.push(euclidean(&o.outcome, &e.outcome));
            }
        }
        let cost = Tensor::new(vec![4, 3], cost).unwrap();
        let plain = exact_ot(&cost, &uniform::<f64>(4), &uniform::<f64>(3)).unwrap();
        assert!((out.conditional_sum - plain.cost).abs() < 1e-12);
    }

    #[test]
    fn conditional_identical_distributions_are_free() {
        let levels = vec![(vec![0.0], 0.1), (vec![60.0], 0.9)];
        let outcome = vec![1.0, 2.0];
        let obs: Vec<GroupedUnit<f64>> = (0..2)
            .map(|level| GroupedUnit {
                level,
                outcome: outcome.clone(),
            })
            .collect();
        let exp = obs.clone();
        let out = conditional_ot_sum(&levels, &obs, &exp).unwrap();
        assert!(out.conditional_sum.abs() < 1e-12);
    }

    #[test]
    fn conditional_sum_bounded_by_joint() {
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..5 {
            let (levels, obs, exp) = grouped_instance(&mut rng, 2, 3, 2);
            let out = conditional_ot_sum(&levels, &obs, &exp).unwrap();
            assert!(
                out.conditional_sum <= out.joint_cost + 1e-9,
                "{} vs {}",
                out.conditional_sum,
                out.joint_cost
            );
        }
    }

    #[test]
    fn conditional_rejects_one_sided_level() {
        let levels = vec![(vec![0.0], 0.1), (vec![50.0], 0.9)];
        let obs = vec![
            GroupedUnit {
                level: 0,
                outcome: vec![0.0],
            },
            GroupedUnit {
                level: 1,
                outcome: vec![0.0],
            },
        ];
        let exp = vec![GroupedUnit {
            level: 0,
            outcome: vec![0.0],
        }];
        assert!(matches!(
            conditional_ot_sum(&levels, &obs, &exp),
            Err(OtError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn cost_matrix_components() {
        let emb_o: Tensor<f64> = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let emb_e = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let x_o = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let x_e = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let betas = CostBetas {
            embedding: 10.0,
            covariate: 0.1,
            treatment: 0.1,
        };
        let c = build_cost_matrix(
            &CostFeatures {
                embeddings: &emb_o,
                covariates: &x_o,
                treatments: &[0.5],
            },
            &CostFeatures {
                embeddings: &emb_e,
                covariates: &x_e,
                treatments: &[0.5, 0.7],
            },
            &betas,
        )
        .unwrap();
        // identical unit on both sides costs zero
        assert!(c.get2(0, 0).abs() < 1e-15);
        // second column: 10*5 + 0.1*1 + 0.1*0.2
        assert!((c.get2(0, 1) - (50.0 + 0.1 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn cost_matrix_matches_pairwise_oracle_on_random_instance() {
        let mut rng = StdRng::seed_from_u64(41);
        let emb_o =
            Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let emb_e =
            Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let x_o = Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let x_e = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let a_o: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let a_e: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
        let betas = CostBetas::default();
        let c = build_cost_matrix(
            &CostFeatures {
                embeddings: &emb_o,
                covariates: &x_o,
                treatments: &a_o,
            },
            &CostFeatures {
                embeddings: &emb_e,
                covariates: &x_e,
                treatments: &a_e,
            },
            &betas,
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..2 {
                // independent per-pair computation
                let sq = |p: &[f64], q: &[f64]| -> f64 {
                    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let dr = sq(emb_o.row(i), emb_e.row(j)).sqrt();
                let dx = sq(x_o.row(i), x_e.row(j)).sqrt();
                let da = (a_o[i] - a_e[j]).abs();
                let expect = 10.0 * dr + 0.1 * dx + 0.1 * da;
                assert!((c.get2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cost_matrix_scalar_treatment_only() {
        let emb: Tensor<f64> = Tensor::zeros(&[2, 3]);
        let emb_e = Tensor::zeros(&[2, 3]);
        let x = Tensor::zeros(&[2, 2]);
        let x_e = Tensor::zeros(&[2, 2]);
        let betas = CostBetas {
            embedding: 0.0,
            covariate: 0.0,
            treatment: 0.5,
        };
        let c = build_cost_matrix(
            &CostFeatures {
                embeddings: &emb,
                covariates: &x,
                treatments: &[0.1, 0.9],
            },
            &CostFeatures {
                embeddings: &emb_e,
                covariates: &x_e,
                treatments: &[0.3, 0.4],
            },
            &betas,
        )
        .unwrap();
        assert!((c.get2(0, 0) - 0.5 * 0.2).abs() < 1e-15);
        assert!((c.get2(1, 1) - 0.5 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn plan_csv_export() {
        let plan = TransportPlan {
            gamma: Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap(),
            source_marginal: vec![1.0],
            target_marginal: vec![0.25, 0.75],
        };
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "row,col,mass\n0,0,0.25\n0,1,0.75\n");
    }
}
