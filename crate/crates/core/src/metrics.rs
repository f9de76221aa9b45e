//! Evaluation metrics: integrated squared error of dose-response curves,
//! kernel dependence (HSIC) and kernel conditional dependence, plus the
//! reduction ratios reported by the experiment harness.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("baseline value must be positive, got {0}")]
    NonPositiveBefore(f64),
    #[error("sample sizes disagree: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("regularized Gram matrix is numerically singular; increase the ridge")]
    SingularGram,
}

// ---- treatment grid and MISE ---------------------------------------------------

/// Evaluation grid over the treatment interval, endpoints included.
#[derive(Debug, Clone)]
pub struct TreatmentGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for TreatmentGrid {
    fn default() -> Self {
        TreatmentGrid {
            lo: 0.0,
            hi: 1.0,
            points: 65,
        }
    }
}

impl TreatmentGrid {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self, MetricError> {
        if lo >= hi || points < 2 {
            return Err(MetricError::Config(format!(
                "grid [{lo}, {hi}] with {points} points"
            )));
        }
        Ok(TreatmentGrid { lo, hi, points })
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64)
            .collect()
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
}

/// Trapezoid-rule integral of per-point values over the grid.
pub fn trapezoid(values: &[f64], grid: &TreatmentGrid) -> f64 {
    debug_assert_eq!(values.len(), grid.points);
    let h = grid.step();
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (0.5 * values[0] + inner + 0.5 * values[values.len() - 1])
}

/// Mean integrated squared error between predicted and oracle curves, both
/// sampled on `grid`.
pub fn mise(
    predicted: &[Vec<f64>],
    oracle: &[Vec<f64>],
    grid: &TreatmentGrid,
) -> Result<f64, MetricError> {
    if predicted.len() != oracle.len() {
        return Err(MetricError::SizeMismatch(predicted.len(), oracle.len()));
    }
    if predicted.is_empty() {
        return Err(MetricError::Config("no curves to evaluate".into()));
    }
    let mut total = 0.0;
    for (p, o) in predicted.iter().zip(oracle) {
        if p.len() != grid.points || o.len() != grid.points {
            return Err(MetricError::SizeMismatch(p.len(), grid.points));
        }
        let sq: Vec<f64> = p
            .iter()
            .zip(o)
            .map(|(&a, &b)| (a - b) * (a - b))
            .collect();
        total += trapezoid(&sq, grid);
    }
    Ok(total / predicted.len() as f64)
}

// ---- kernels --------------------------------------------------------------------

/// Gaussian-kernel configuration; the bandwidth itself comes from the median
/// heuristic per variable block.
#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    /// Ridge added as `n * ridge * I` when normalizing Gram matrices.
    pub ridge: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { ridge: 1e-3 }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Median of pairwise Euclidean distances; `None` when every point coincides.
fn median_bandwidth(points: &[Vec<f64>]) -> Option<f64> {
    let n = points.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let positive_from = dists.partition_point(|&d| d <= 0.0);
    if positive_from == dists.len() {
        return None;
    }
    let slice = &dists[..];
    let med = slice[slice.len() / 2];
    if med > 0.0 {
        Some(med)
    } else {
        // median is zero but some distances are positive; fall back to the
        // median of the positive ones
        let pos = &dists[positive_from..];
        Some(pos[pos.len() / 2])
    }
}

/// Gram matrix `exp(-d^2 / (2 sigma^2))` as a flat row-major buffer.
fn gram(points: &[Vec<f64>], sigma: f64) -> Vec<f64> {
    let n = points.len();
    let denom = 2.0 * sigma * sigma;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let k = (-sq_dist(&points[i], &points[j]) / denom).exp();
            out[i * n + j] = k;
            out[j * n + i] = k;
        }
    }
    out
}

/// `H K H` with the centering matrix `H = I - 11^T / n`, done in place.
fn center(k: &mut [f64], n: usize) {
    let mut row_means = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += k[i * n + j];
        }
        row_means[i] = s / n as f64;
        total += s;
    }
    let grand = total / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - row_means[i] - row_means[j];
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DependenceEstimate {
    pub value: f64,
    /// Set when an input block had zero variance; the statistic is then 0 by
    /// convention.
    pub degenerate: bool,
}

/// Biased V-statistic `(1/n^2) tr(K H L H)` with Gaussian kernels and
/// median-heuristic bandwidths.
pub fn hsic(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    _cfg: &KernelConfig,
) -> Result<DependenceEstimate, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::SizeMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 5 {
        return Err(MetricError::Config(format!("need >= 5 samples, got {n}")));
    }
    let (Some(sx), Some(sy)) = (median_bandwidth(xs), median_bandwidth(ys)) else {
        return Ok(DependenceEstimate {
            value: 0.0,
            degenerate: true,
        });
    };
    let mut k = gram(xs, sx);
    let l = gram(ys, sy);
    center(&mut k, n);
    let mut acc = 0.0;
    for (kv, lv) in k.iter().zip(&l) {
        acc += kv * lv;
    }
    // tr(K H L H) = sum_ij (H K H)_ij L_ij by symmetry of H
    Ok(DependenceEstimate {
        value: (acc / (n * n) as f64).max(0.0),
        degenerate: false,
    })
}

/// Quantile of the permutation null of `hsic` (ys permuted, xs fixed).
pub fn hsic_null_quantile(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    _cfg: &KernelConfig,
    permutations: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(MetricError::Config(format!("quantile {quantile}")));
    }
    let n = xs.len();
    if n != ys.len() || n < 5 {
        return Err(MetricError::SizeMismatch(n, ys.len()));
    }
    let (Some(sx), Some(sy)) = (median_bandwidth(xs), median_bandwidth(ys)) else {
        return Ok(0.0);
    };
    let mut k = gram(xs, sx);
    let l = gram(ys, sy);
    center(&mut k, n);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stats = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let mut acc = 0.0;
        for i in 0..n {
            let pi = perm[i] * n;
            let ki = i * n;
            for j in 0..n {
                acc += k[ki + j] * l[pi + perm[j]];
            }
        }
        stats.push((acc / (n * n) as f64).max(0.0));
    }
    stats.sort_by(f64::total_cmp);
    let idx = ((stats.len() as f64 - 1.0) * quantile).round() as usize;
    Ok(stats[idx])
}

/// Kernel conditional dependence of `xs` and `ys` given `zs`: the squared
/// Hilbert-Schmidt norm of the normalized conditional cross-covariance
/// estimate, computed from ridge-normalized Gram matrices of the augmented
/// variables `(x, z)` and `(y, z)`.
pub fn hsconic(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    zs: &[Vec<f64>],
    cfg: &KernelConfig,
) -> Result<DependenceEstimate, MetricError> {
    let n = xs.len();
    if ys.len() != n || zs.len() != n {
        return Err(MetricError::SizeMismatch(n, ys.len().min(zs.len())));
    }
    if n < 5 {
        return Err(MetricError::Config(format!("need >= 5 samples, got {n}")));
    }
    if cfg.ridge <= 0.0 {
        return Err(MetricError::Config("ridge must be positive".into()));
    }
    let augment = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, z)| x.iter().chain(z.iter()).copied().collect())
            .collect()
    };
    let x_aug = augment(xs, zs);
    let y_aug = augment(ys, zs);
    let (bx, by, bz) = (
        median_bandwidth(&x_aug),
        median_bandwidth(&y_aug),
        median_bandwidth(zs),
    );
    let (Some(bx), Some(by), Some(bz)) = (bx, by, bz) else {
        return Ok(DependenceEstimate {
            value: 0.0,
            degenerate: true,
        });
    };

    let normalized = |points: &[Vec<f64>], sigma: f64| -> Result<Vec<f64>, MetricError> {
        let mut g = gram(points, sigma);
        center(&mut g, n);
        // R = G (G + n ridge I)^{-1}, computed as the solution of
        // (G + n ridge I) R^T = G^T with symmetric G
        let mut reg = g.clone();
        for i in 0..n {
            reg[i * n + i] += n as f64 * cfg.ridge;
        }
        let chol = cholesky(reg, n).ok_or(MetricError::SingularGram)?;
        Ok(cholesky_solve_matrix(&chol, &g, n))
    };
    let rx = normalized(&x_aug, bx)?;
    let ry = normalized(&y_aug, by)?;
    let rz = normalized(zs, bz)?;

    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        crate::tensor::matmul_into(a, b, n, n, n, &mut out);
        out
    };
    let trace = |a: &[f64]| -> f64 { (0..n).map(|i| a[i * n + i]).sum() };

    let ryx = prod(&ry, &rx);
    let t1 = trace(&ryx);
    let ryxz = prod(&ryx, &rz);
    let t2 = trace(&ryxz);
    let rzx = prod(&rz, &rx);
    let rzxz = prod(&rzx, &rz);
    let t3 = trace(&prod(&ry, &rzxz));
    Ok(DependenceEstimate {
        value: (t1 - 2.0 * t2 + t3).max(0.0),
        degenerate: false,
    })
}

/// Weighted-measure variant of [`hsconic`]: Gram matrices are centered
/// against the weighted mean and normalized as `M (M + eps I)^{-1}` with
/// `M = D^{1/2} (H_w K H_w^T) D^{1/2}`, `D = diag(w)`. With uniform weights
/// this reduces exactly to the unweighted estimator (the `n * ridge` there is
/// this `ridge` after the `1/n` folds into `D`).
pub fn hsconic_weighted(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    zs: &[Vec<f64>],
    weights: &[f64],
    cfg: &KernelConfig,
) -> Result<DependenceEstimate, MetricError> {
    let n = xs.len();
    if ys.len() != n || zs.len() != n || weights.len() != n {
        return Err(MetricError::SizeMismatch(n, ys.len().min(zs.len())));
    }
    if n < 5 {
        return Err(MetricError::Config(format!("need >= 5 samples, got {n}")));
    }
    if cfg.ridge <= 0.0 {
        return Err(MetricError::Config("ridge must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || total <= 0.0 {
        return Err(MetricError::Config("weights must be nonnegative".into()));
    }
    let w: Vec<f64> = weights.iter().map(|v| v / total).collect();
    let augment = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, z)| x.iter().chain(z.iter()).copied().collect())
            .collect()
    };
    let x_aug = augment(xs, zs);
    let y_aug = augment(ys, zs);
    let (bx, by, bz) = (
        median_bandwidth(&x_aug),
        median_bandwidth(&y_aug),
        median_bandwidth(zs),
    );
    let (Some(bx), Some(by), Some(bz)) = (bx, by, bz) else {
        return Ok(DependenceEstimate {
            value: 0.0,
            degenerate: true,
        });
    };

    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let normalized = |points: &[Vec<f64>], sigma: f64| -> Result<Vec<f64>, MetricError> {
        let mut g = gram(points, sigma);
        center_weighted(&mut g, &w, n);
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] *= sqrt_w[i] * sqrt_w[j];
            }
        }
        let mut reg = g.clone();
        for i in 0..n {
            reg[i * n + i] += cfg.ridge;
        }
        let chol = cholesky(reg, n).ok_or(MetricError::SingularGram)?;
        Ok(cholesky_solve_matrix(&chol, &g, n))
    };
    let rx = normalized(&x_aug, bx)?;
    let ry = normalized(&y_aug, by)?;
    let rz = normalized(zs, bz)?;

    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        crate::tensor::matmul_into(a, b, n, n, n, &mut out);
        out
    };
    let trace = |a: &[f64]| -> f64 { (0..n).map(|i| a[i * n + i]).sum() };
    let ryx = prod(&ry, &rx);
    let t1 = trace(&ryx);
    let t2 = trace(&prod(&ryx, &rz));
    let rzx = prod(&rz, &rx);
    let t3 = trace(&prod(&ry, &prod(&rzx, &rz)));
    Ok(DependenceEstimate {
        value: (t1 - 2.0 * t2 + t3).max(0.0),
        degenerate: false,
    })
}

/// `H_w K H_w^T` with `H_w = I - 1 w^T`, in place.
fn center_weighted(k: &mut [f64], w: &[f64], n: usize) {
    let mut row_means = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += w[j] * k[i * n + j];
        }
        row_means[i] = s;
    }
    let grand: f64 = (0..n).map(|i| w[i] * row_means[i]).sum();
    // K is symmetric, so the weighted column means equal the row means
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - row_means[i] - row_means[j];
        }
    }
}

/// Quantile of the conditional permutation null: `ys` shuffled within
/// quantile bins of the first coordinate of `zs`.
#[allow(clippy::too_many_arguments)]
pub fn hsconic_null_quantile(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    zs: &[Vec<f64>],
    cfg: &KernelConfig,
    bins: usize,
    permutations: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64, MetricError> {
    let n = xs.len();
    if n != ys.len() || n != zs.len() {
        return Err(MetricError::SizeMismatch(n, ys.len().min(zs.len())));
    }
    // order units by the first z coordinate, then bin
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| zs[i][0].total_cmp(&zs[j][0]));
    let mut rng = StdRng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(permutations);
    let bin_size = n.div_ceil(bins);
    for _ in 0..permutations {
        let mut permuted_ys = ys.to_vec();
        for chunk in order.chunks(bin_size) {
            let mut shuffled: Vec<usize> = chunk.to_vec();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            for (&from, &to) in chunk.iter().zip(&shuffled) {
                permuted_ys[to] = ys[from].clone();
            }
        }
        stats.push(hsconic(xs, &permuted_ys, zs, cfg)?.value);
    }
    stats.sort_by(f64::total_cmp);
    let idx = ((stats.len() as f64 - 1.0) * quantile).round() as usize;
    Ok(stats[idx])
}

/// `(before - after) / before`; negative when dependence got worse.
pub fn reduction_ratio(before: f64, after: f64) -> Result<f64, MetricError> {
    if before <= 0.0 {
        return Err(MetricError::NonPositiveBefore(before));
    }
    Ok((before - after) / before)
}

/// Deterministic systematic resampling: `n_out` indices drawn proportional to
/// `weights` with a single seeded offset.
pub fn systematic_resample(weights: &[f64], n_out: usize, seed: u64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut rng = StdRng::seed_from_u64(seed);
    let start: f64 = rng.random_range(0.0..1.0) / n_out as f64;
    let mut out = Vec::with_capacity(n_out);
    let mut cum = 0.0;
    let mut i = 0;
    for k in 0..n_out {
        let target = (start + k as f64 / n_out as f64) * total;
        while cum + weights[i] < target && i + 1 < weights.len() {
            cum += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

// ---- small dense Cholesky ---------------------------------------------------------

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix;
/// `None` if a pivot degenerates.
fn cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    // zero the strict upper triangle for cleanliness
    for i in 0..n {
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Some(a)
}

/// Solve `A X = B` for symmetric `B` given the Cholesky factor of `A`,
/// returning `X` (here used with symmetric inputs so `X = B A^{-1}` too).
fn cholesky_solve_matrix(chol: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n * n];
    for col in 0..n {
        // forward solve L y = b[:, col]
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i * n + col];
            for k in 0..i {
                s -= chol[i * n + k] * y[k];
            }
            y[i] = s / chol[i * n + i];
        }
        // back solve L^T x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= chol[k * n + i] * x[k * n + col];
            }
            x[i * n + col] = s / chol[i * n + i];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mise_of_perfect_predictor_is_zero() {
        let grid = TreatmentGrid::default();
        let curve: Vec<f64> = grid.values().iter().map(|a| a * 2.0 + 1.0).collect();
        let m = mise(&[curve.clone()], &[curve], &grid).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn constant_offset_integrates_to_c_squared() {
        let grid = TreatmentGrid::default();
        let oracle: Vec<f64> = grid.values().iter().map(|a| a.sin()).collect();
        let c = 0.7;
        let pred: Vec<f64> = oracle.iter().map(|v| v + c).collect();
        let m = mise(&[pred], &[oracle], &grid).unwrap();
        assert!((m - c * c).abs() < 1e-12, "got {m}");
    }

    #[test]
    fn linear_offset_integrates_to_one_third() {
        let grid = TreatmentGrid::default();
        let oracle = vec![0.0; grid.points];
        let pred = grid.values();
        let m = mise(&[pred], &[oracle], &grid).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-3, "got {m}");
    }

    #[test]
    fn translation_identity_holds_algebraically() {
        // mise(pred + c) = mise(pred) + 2 c trapz(err) + c^2, exactly under
        // the trapezoid rule
        let grid = TreatmentGrid {
            points: 17,
            ..Default::default()
        };
        let oracle: Vec<f64> = grid.values().iter().map(|a| a * a).collect();
        let pred: Vec<f64> = grid.values().iter().map(|a| 0.5 * a + 0.1).collect();
        let err: Vec<f64> = pred.iter().zip(&oracle).map(|(p, o)| p - o).collect();
        let c = -0.3;
        let shifted: Vec<f64> = pred.iter().map(|v| v + c).collect();
        let lhs = mise(&[shifted], &[oracle.clone()], &grid).unwrap();
        let rhs = mise(&[pred], &[oracle], &grid).unwrap()
            + 2.0 * c * trapezoid(&err, &grid)
            + c * c;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn scalar_points(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn hsic_detects_equality_and_accepts_independence() {
        let mut rng = StdRng::seed_from_u64(100);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y_equal = x.clone();
        let mut y_indep = x.clone();
        use rand::seq::SliceRandom;
        y_indep.shuffle(&mut rng);

        let cfg = KernelConfig::default();
        let xs = scalar_points(&x);

        let equal_stat = hsic(&xs, &scalar_points(&y_equal), &cfg).unwrap().value;
        let q99 = hsic_null_quantile(&xs, &scalar_points(&y_equal), &cfg, 200, 0.99, 1).unwrap();
        assert!(equal_stat > q99, "{equal_stat} vs {q99}");

        let indep_stat = hsic(&xs, &scalar_points(&y_indep), &cfg).unwrap().value;
        let q95 = hsic_null_quantile(&xs, &scalar_points(&y_indep), &cfg, 200, 0.95, 2).unwrap();
        assert!(indep_stat < q95, "{indep_stat} vs {q95}");
    }

    #[test]
    fn hsic_of_constant_input_is_zero_with_flag() {
        let xs = scalar_points(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let ys = scalar_points(&[2.0; 5]);
        let est = hsic(&xs, &ys, &KernelConfig::default()).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.degenerate);
    }

    #[test]
    fn hsconic_detects_conditional_dependence() {
        // x, y functions of z plus independent noise => conditionally
        // independent given z; y = x keeps dependence after conditioning
        let mut rng = StdRng::seed_from_u64(7);
        let n = 60;
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = z
            .iter()
            .map(|&zv| zv + 0.3 * rng.random_range(-1.0..1.0f64))
            .collect();
        let y_ci: Vec<f64> = z
            .iter()
            .map(|&zv| zv * zv + 0.3 * rng.random_range(-1.0..1.0f64))
            .collect();
        let cfg = KernelConfig::default();
        let (xs, zs) = (scalar_points(&x), scalar_points(&z));

        let ci_stat = hsconic(&xs, &scalar_points(&y_ci), &zs, &cfg).unwrap().value;
        let ci_null = hsconic_null_quantile(
            &xs,
            &scalar_points(&y_ci),
            &zs,
            &cfg,
            6,
            100,
            0.95,
            3,
        )
        .unwrap();
        assert!(ci_stat < ci_null, "{ci_stat} vs {ci_null}");

        let y_dep = x.clone();
        let dep_stat = hsconic(&xs, &scalar_points(&y_dep), &zs, &cfg).unwrap().value;
        let dep_null = hsconic_null_quantile(
            &xs,
            &scalar_points(&y_dep),
            &zs,
            &cfg,
            6,
            100,
            0.95,
            4,
        )
        .unwrap();
        assert!(dep_stat > dep_null, "{dep_stat} vs {dep_null}");
    }

    #[test]
    fn weighted_hsconic_reduces_to_unweighted_at_uniform() {
        let mut rng = StdRng::seed_from_u64(21);
        let n = 30;
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = z.iter().map(|&v| v + 0.2 * rng.random_range(-1.0..1.0f64)).collect();
        let y: Vec<f64> = x.iter().map(|&v| v * v).collect();
        let cfg = KernelConfig::default();
        let (xs, ys, zs) = (scalar_points(&x), scalar_points(&y), scalar_points(&z));
        let plain = hsconic(&xs, &ys, &zs, &cfg).unwrap().value;
        let uniform = vec![1.0 / n as f64; n];
        let weighted = hsconic_weighted(&xs, &ys, &zs, &uniform, &cfg).unwrap().value;
        assert!(
            (plain - weighted).abs() <= 1e-10 * plain.max(1.0),
            "{plain} vs {weighted}"
        );
        // unnormalized weights are normalized internally
        let scaled = vec![3.0; n];
        let weighted2 = hsconic_weighted(&xs, &ys, &zs, &scaled, &cfg).unwrap().value;
        assert!((plain - weighted2).abs() <= 1e-10 * plain.max(1.0));
    }

    #[test]
    fn hsconic_degenerate_point_is_zero() {
        let xs = scalar_points(&[1.0; 8]);
        let ys = scalar_points(&[1.0; 8]);
        let zs = scalar_points(&[1.0; 8]);
        let est = hsconic(&xs, &ys, &zs, &KernelConfig::default()).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.degenerate);
    }

    #[test]
    fn reduction_ratio_cases() {
        assert_eq!(reduction_ratio(0.4, 0.0).unwrap(), 1.0);
        assert_eq!(reduction_ratio(0.4, 0.4).unwrap(), 0.0);
        let r = reduction_ratio(0.36, 0.05).unwrap();
        assert!((r - 0.8611).abs() < 1e-4);
        assert!(reduction_ratio(0.0, 0.1).is_err());
    }

    #[test]
    fn resampling_is_deterministic_and_tracks_weights() {
        let w = vec![0.7, 0.1, 0.1, 0.1];
        let idx = systematic_resample(&w, 1000, 5);
        assert_eq!(idx, systematic_resample(&w, 1000, 5));
        let heavy = idx.iter().filter(|&&i| i == 0).count();
        assert!((heavy as f64 / 1000.0 - 0.7).abs() < 0.05);
    }

    #[test]
    fn cholesky_solves_identity() {
        // (A)(X) = A with A spd => X = I
        let a = vec![4.0, 1.0, 1.0, 3.0];
        let chol = cholesky(a.clone(), 2).unwrap();
        let x = cholesky_solve_matrix(&chol, &a, 2);
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12);
        assert!(x[2].abs() < 1e-12);
        assert!((x[3] - 1.0).abs() < 1e-12);
    }
}
