//! Synthetic and semi-synthetic dataset generation, splitting, and file IO.
//!
//! Estimators only ever see the public view (`Dataset`): treatment, observed
//! covariates, short-term outcomes, and the long-term outcome for
//! observational units. Unobserved covariates and counterfactual curves live
//! in a separate `OracleData` that is written to `.oracle` files and consumed
//! exclusively by evaluation code.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution, Normal};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("dataset invalid: {0}")]
    Validation(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---- records ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Observational,
    Experimental,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Observational => write!(f, "o"),
            Group::Experimental => write!(f, "e"),
        }
    }
}

/// Public view of one unit. Estimators never see more than this.
#[derive(Debug, Clone)]
pub struct Unit {
    pub treatment: f64,
    pub covariates: Vec<f64>,
    pub short_term: Vec<f64>,
    /// Present exactly for observational units.
    pub long_term: Option<f64>,
    pub group: Group,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub units: Vec<Unit>,
    pub covariate_dim: usize,
    pub horizon: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (i, u) in self.units.iter().enumerate() {
            if u.covariates.len() != self.covariate_dim {
                return Err(DataError::Validation(format!(
                    "unit {i}: covariate dim {}",
                    u.covariates.len()
                )));
            }
            if u.short_term.len() != self.horizon {
                return Err(DataError::Validation(format!(
                    "unit {i}: horizon {}",
                    u.short_term.len()
                )));
            }
            let has_y = u.long_term.is_some();
            if has_y != (u.group == Group::Observational) {
                return Err(DataError::Validation(format!(
                    "unit {i}: long-term outcome present iff observational"
                )));
            }
            if !(u.treatment > 0.0 && u.treatment < 1.0) {
                return Err(DataError::Validation(format!(
                    "unit {i}: treatment {} outside (0, 1)",
                    u.treatment
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            covariate_dim: self.covariate_dim,
            horizon: self.horizon,
        }
    }

    pub fn covariate_matrix(&self) -> Tensor<f64> {
        let mut data = Vec::with_capacity(self.len() * self.covariate_dim);
        for u in &self.units {
            data.extend_from_slice(&u.covariates);
        }
        Tensor::new(vec![self.len(), self.covariate_dim], data).expect("consistent dims")
    }

    pub fn treatments(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.treatment).collect()
    }

    pub fn short_term_matrix(&self) -> Tensor<f64> {
        let mut data = Vec::with_capacity(self.len() * self.horizon);
        for u in &self.units {
            data.extend_from_slice(&u.short_term);
        }
        Tensor::new(vec![self.len(), self.horizon], data).expect("consistent dims")
    }

    pub fn long_terms(&self) -> Vec<Option<f64>> {
        self.units.iter().map(|u| u.long_term).collect()
    }
}

/// Evaluation-only companions to a dataset, aligned by index.
#[derive(Debug, Clone)]
pub struct OracleUnit {
    /// Unobserved covariates; diagnostics only, never fed to estimators.
    pub unobserved: Vec<f64>,
    /// Noiseless potential short-term outcomes at the reference treatment 0.5.
    pub short_term_mid: Vec<f64>,
    /// Noiseless long-term potential outcome on the evaluation grid.
    pub long_term_curve: Vec<f64>,
    /// Factual long-term outcome withheld from the public view
    /// (experimental units only).
    pub withheld_long_term: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleData {
    pub units: Vec<OracleUnit>,
    pub grid: Vec<f64>,
}

impl OracleData {
    pub fn subset(&self, indices: &[usize]) -> OracleData {
        OracleData {
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            grid: self.grid.clone(),
        }
    }

    pub fn curves(&self) -> Vec<Vec<f64>> {
        self.units
            .iter()
            .map(|u| u.long_term_curve.clone())
            .collect()
    }
}

pub fn evaluation_grid(points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect()
}

// ---- synthetic generator -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_obs: usize,
    pub n_exp: usize,
    pub covariate_dim: usize,
    pub unobserved_dim: usize,
    pub confounding_strength: f64,
    pub horizon: usize,
    pub long_horizon: usize,
    pub oracle_grid_points: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_obs: 10_000,
            n_exp: 500,
            covariate_dim: 15,
            unobserved_dim: 5,
            confounding_strength: 1.0,
            horizon: 7,
            long_horizon: 14,
            oracle_grid_points: 65,
            seed: 0,
        }
    }
}

pub struct SyntheticOutput {
    pub obs: Dataset,
    pub exp: Dataset,
    pub obs_oracle: OracleData,
    pub exp_oracle: OracleData,
    /// Structural coefficients, exposed so tests can re-derive the formulas.
    pub weights_treatment: Vec<f64>,
    pub weights_outcome: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Structural pieces of one unit's outcome process: `y_t = base + (t + 5) a
/// slope + beta_u t a / 5 * u_term + 0.25 ybar + noise`.
struct OutcomeCoeffs {
    base: f64,
    slope: f64,
    u_term: f64,
    beta_u: f64,
}

impl OutcomeCoeffs {
    fn step(&self, t: usize, a: f64, running_mean: f64, noise: f64) -> f64 {
        self.base
            + (t as f64 + 5.0) * a * self.slope
            + self.beta_u * t as f64 * a / 5.0 * self.u_term
            + 0.25 * running_mean
            + noise
    }

    /// Trajectory under treatment `a`; `noise` supplies one draw per step
    /// (zeros give the noiseless potential-outcome path).
    fn trajectory(&self, a: f64, horizon: usize, noise: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(horizon);
        let mut sum = 0.0;
        for t in 1..=horizon {
            let running_mean = if t == 1 { 0.0 } else { sum / (t - 1) as f64 };
            let y = self.step(t, a, running_mean, noise[t - 1]);
            out.push(y);
            sum += y;
        }
        out
    }
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticOutput, DataError> {
    if !cfg.covariate_dim.is_multiple_of(3) {
        return Err(DataError::Config(format!(
            "covariate dim {} must be divisible by 3",
            cfg.covariate_dim
        )));
    }
    if cfg.horizon >= cfg.long_horizon {
        return Err(DataError::Config(
            "short horizon must precede the long horizon".into(),
        ));
    }
    if cfg.oracle_grid_points < 2 {
        return Err(DataError::Config("oracle grid needs >= 2 points".into()));
    }
    let p = cfg.covariate_dim;
    let q = cfg.unobserved_dim;
    let third = p / 3;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let noise = Normal::new(0.0, 0.5f64.sqrt()).expect("valid");

    // structural coefficients drawn once and shared by both groups
    let w_t: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..0.5)).collect();
    let w_y: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.0)).collect();
    let grid = evaluation_grid(cfg.oracle_grid_points);

    let gen_group = |n: usize, group: Group, rng: &mut StdRng| -> (Dataset, OracleData) {
        let x_mean = match group {
            Group::Observational => 0.1,
            Group::Experimental => 0.5,
        };
        let mut units = Vec::with_capacity(n);
        let mut oracle_units = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..p)
                .map(|_| x_mean + std_normal.sample(rng))
                .collect();
            let u: Vec<f64> = (0..q).map(|_| 0.25 + std_normal.sample(rng)).collect();
            let u_bar = u.iter().sum::<f64>() / q as f64;

            let mut score = 0.0;
            for j in 0..third {
                score += w_t[j] * x[j].sin();
            }
            for j in third..2 * third {
                score += w_t[j] * x[j] * x[j];
            }
            if group == Group::Observational {
                score += cfg.confounding_strength * u_bar;
            }
            let a = sigmoid(score);

            let coeffs = OutcomeCoeffs {
                base: (third..2 * third).map(|j| w_y[j] * x[j] * x[j]).sum(),
                slope: (2 * third..p).map(|j| w_y[j] * x[j]).sum(),
                u_term: (0..q).map(|j| w_y[j] * u[j].cos()).sum(),
                beta_u: cfg.confounding_strength,
            };
            let noise_draws: Vec<f64> = (0..cfg.long_horizon).map(|_| noise.sample(rng)).collect();
            let traj = coeffs.trajectory(a, cfg.long_horizon, &noise_draws);
            let short_term = traj[..cfg.horizon].to_vec();
            let y_long = traj[cfg.long_horizon - 1];

            let zeros = vec![0.0; cfg.long_horizon];
            let long_term_curve: Vec<f64> = grid
                .iter()
                .map(|&ga| coeffs.trajectory(ga, cfg.long_horizon, &zeros)[cfg.long_horizon - 1])
                .collect();
            let short_term_mid = coeffs.trajectory(0.5, cfg.long_horizon, &zeros)
                [..cfg.horizon]
                .to_vec();

            units.push(Unit {
                treatment: a,
                covariates: x,
                short_term,
                long_term: (group == Group::Observational).then_some(y_long),
                group,
            });
            oracle_units.push(OracleUnit {
                unobserved: u,
                short_term_mid,
                long_term_curve,
                withheld_long_term: (group == Group::Experimental).then_some(y_long),
            });
        }
        (
            Dataset {
                units,
                covariate_dim: p,
                horizon: cfg.horizon,
            },
            OracleData {
                units: oracle_units,
                grid: grid.clone(),
            },
        )
    };

    let (obs, obs_oracle) = gen_group(cfg.n_obs, Group::Observational, &mut rng);
    let (exp, exp_oracle) = gen_group(cfg.n_exp, Group::Experimental, &mut rng);
    obs.validate()?;
    exp.validate()?;
    Ok(SyntheticOutput {
        obs,
        exp,
        obs_oracle,
        exp_oracle,
        weights_treatment: w_t,
        weights_outcome: w_y,
    })
}

// ---- semi-synthetic generator ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct SemiSyntheticConfig {
    pub horizon: usize,
    pub long_horizon: usize,
    pub oracle_grid_points: usize,
    pub seed: u64,
}

impl Default for SemiSyntheticConfig {
    fn default() -> Self {
        SemiSyntheticConfig {
            horizon: 7,
            long_horizon: 14,
            oracle_grid_points: 65,
            seed: 0,
        }
    }
}

pub struct SemiSyntheticOutput {
    pub obs: Dataset,
    pub exp: Dataset,
    pub obs_oracle: OracleData,
    pub exp_oracle: OracleData,
    /// Normalized projection vectors (observed block), exposed for tests.
    pub v_obs: [Vec<f64>; 3],
    /// Normalized projection vectors (unobserved block).
    pub v_unobs: [Vec<f64>; 3],
}

const DENOM_FLOOR: f64 = 1e-6;

fn clamped(denominator: f64) -> f64 {
    if denominator.abs() >= DENOM_FLOOR {
        denominator
    } else if denominator < 0.0 {
        -DENOM_FLOOR
    } else {
        DENOM_FLOOR
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reuse a supplied covariate matrix: rows are partitioned 9:1 into
/// observational and experimental groups, columns 8:2 into observed and
/// unobserved blocks, then treatments and outcomes are simulated.
pub fn gen_semisynthetic(
    covariates: &[Vec<f64>],
    cfg: &SemiSyntheticConfig,
) -> Result<SemiSyntheticOutput, DataError> {
    if covariates.len() < 100 {
        return Err(DataError::Config(format!(
            "need at least 100 covariate rows, got {}",
            covariates.len()
        )));
    }
    let dim = covariates[0].len();
    if dim < 5 {
        return Err(DataError::Config("need at least 5 covariate columns".into()));
    }
    if covariates.iter().any(|r| r.len() != dim) {
        return Err(DataError::Config("ragged covariate matrix".into()));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let noise = Normal::new(0.0, 0.5f64.sqrt()).expect("valid");

    // column split 8:2 observed/unobserved after a seeded shuffle
    let mut cols: Vec<usize> = (0..dim).collect();
    cols.shuffle(&mut rng);
    let n_obs_cols = (dim as f64 * 0.8).floor() as usize;
    let obs_cols = cols[..n_obs_cols].to_vec();
    let unobs_cols = cols[n_obs_cols..].to_vec();

    // row split 9:1 observational/experimental
    let mut rows: Vec<usize> = (0..covariates.len()).collect();
    rows.shuffle(&mut rng);
    let n_obs_rows = (covariates.len() as f64 * 0.9).floor() as usize;

    let draw_unit = |rng: &mut StdRng, dim: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..dim).map(|_| std_normal.sample(rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        raw.into_iter().map(|v| v / norm).collect()
    };
    let v_obs: [Vec<f64>; 3] = std::array::from_fn(|_| draw_unit(&mut rng, obs_cols.len()));
    let v_unobs: [Vec<f64>; 3] = std::array::from_fn(|_| draw_unit(&mut rng, unobs_cols.len()));

    let grid = evaluation_grid(cfg.oracle_grid_points);
    let gen_rows = |row_ids: &[usize], group: Group, rng: &mut StdRng| -> (Dataset, OracleData) {
        let mut units = Vec::with_capacity(row_ids.len());
        let mut oracle_units = Vec::with_capacity(row_ids.len());
        for &r in row_ids {
            let x: Vec<f64> = obs_cols.iter().map(|&c| covariates[r][c]).collect();
            let u: Vec<f64> = unobs_cols.iter().map(|&c| covariates[r][c]).collect();

            let mut d_star = dot(&v_obs[2], &x) / clamped(2.0 * dot(&v_obs[1], &x));
            if group == Group::Observational {
                d_star += dot(&v_unobs[2], &u) / clamped(2.0 * dot(&v_unobs[1], &u));
            }
            let d_star = d_star.abs().max(DENOM_FLOOR);
            // gamma = 2, so beta = (gamma - 1) / d*
            let beta = 1.0 / d_star;
            let a = Beta::new(2.0, beta)
                .expect("positive parameters")
                .sample(rng)
                .clamp(1e-9, 1.0 - 1e-9);

            let inner = dot(&v_obs[1], &x) / clamped(dot(&v_obs[2], &x))
                + dot(&v_unobs[1], &u) / clamped(dot(&v_unobs[2], &u))
                - 0.3;
            let factor = (-2.0f64).max(inner.exp());
            let linear = dot(&v_obs[0], &x) + dot(&v_unobs[0], &u);

            let mu = |a: f64, running_mean: f64| -> f64 {
                4.0 * (a - 0.5) * (a - 0.5)
                    * (std::f64::consts::PI / 2.0 * a).sin()
                    * 2.0
                    * factor
                    + 20.0 * a * linear
                    + 0.5 * running_mean
            };
            let trajectory = |a: f64, noise_draws: &[f64]| -> Vec<f64> {
                let mut out = Vec::with_capacity(cfg.long_horizon);
                let mut sum = 0.0;
                for t in 1..=cfg.long_horizon {
                    let running = if t == 1 { 0.0 } else { sum / (t - 1) as f64 };
                    let y = mu(a, running) + noise_draws[t - 1];
                    out.push(y);
                    sum += y;
                }
                out
            };

            let noise_draws: Vec<f64> =
                (0..cfg.long_horizon).map(|_| noise.sample(rng)).collect();
            let traj = trajectory(a, &noise_draws);
            let zeros = vec![0.0; cfg.long_horizon];
            let long_term_curve: Vec<f64> = grid
                .iter()
                .map(|&ga| trajectory(ga, &zeros)[cfg.long_horizon - 1])
                .collect();
            let short_term_mid = trajectory(0.5, &zeros)[..cfg.horizon].to_vec();
            let y_long = traj[cfg.long_horizon - 1];

            units.push(Unit {
                treatment: a,
                covariates: x,
                short_term: traj[..cfg.horizon].to_vec(),
                long_term: (group == Group::Observational).then_some(y_long),
                group,
            });
            oracle_units.push(OracleUnit {
                unobserved: u,
                short_term_mid,
                long_term_curve,
                withheld_long_term: (group == Group::Experimental).then_some(y_long),
            });
        }
        (
            Dataset {
                units,
                covariate_dim: obs_cols.len(),
                horizon: cfg.horizon,
            },
            OracleData {
                units: oracle_units,
                grid: grid.clone(),
            },
        )
    };

    let (obs, obs_oracle) = gen_rows(&rows[..n_obs_rows], Group::Observational, &mut rng);
    let (exp, exp_oracle) = gen_rows(&rows[n_obs_rows..], Group::Experimental, &mut rng);
    obs.validate()?;
    exp.validate()?;
    Ok(SemiSyntheticOutput {
        obs,
        exp,
        obs_oracle,
        exp_oracle,
        v_obs,
        v_unobs,
    })
}

// ---- splitting --------------------------------------------------------------

/// Disjoint 60/20/20 split of `0..n` with a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (n as f64 * 0.6).floor() as usize;
    let n_val = (n as f64 * 0.2).floor() as usize;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    (train, val, test)
}

pub fn split_dataset(data: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let (tr, va, te) = split_indices(data.len(), seed);
    (data.subset(&tr), data.subset(&va), data.subset(&te))
}

// ---- file IO ------------------------------------------------------------------

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = String::from("group,a");
    for j in 1..=data.covariate_dim {
        header.push_str(&format!(",x_{j}"));
    }
    for t in 1..=data.horizon {
        header.push_str(&format!(",s_{t}"));
    }
    header.push_str(",y");
    writeln!(out, "{header}").map_err(|e| io_err(path, e))?;
    for u in &data.units {
        let mut line = format!("{},{}", u.group, u.treatment);
        for v in &u.covariates {
            line.push_str(&format!(",{v}"));
        }
        for v in &u.short_term {
            line.push_str(&format!(",{v}"));
        }
        match u.long_term {
            Some(y) => line.push_str(&format!(",{y}")),
            None => line.push(','),
        }
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "empty file".into(),
        })?
        .1
        .map_err(|e| io_err(path, e))
        .map(|h| (0usize, h))?;
    let cols: Vec<&str> = header.split(',').collect();
    let covariate_dim = cols.iter().filter(|c| c.starts_with("x_")).count();
    let horizon = cols.iter().filter(|c| c.starts_with("s_")).count();
    if covariate_dim == 0 || horizon == 0 {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "header must contain x_* and s_* columns".into(),
        });
    }
    let mut units = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |tok: &str, what: &str| -> Result<f64, DataError> {
            tok.parse::<f64>().map_err(|_| DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("bad {what}: {tok:?}"),
            })
        };
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 3 + covariate_dim + horizon {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("expected {} fields, got {}", 3 + covariate_dim + horizon, toks.len()),
            });
        }
        let group = match toks[0] {
            "o" => Group::Observational,
            "e" => Group::Experimental,
            other => {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: format!("unknown group {other:?}"),
                })
            }
        };
        let treatment = parse(toks[1], "treatment")?;
        let covariates = toks[2..2 + covariate_dim]
            .iter()
            .map(|t| parse(t, "covariate"))
            .collect::<Result<Vec<_>, _>>()?;
        let short_term = toks[2 + covariate_dim..2 + covariate_dim + horizon]
            .iter()
            .map(|t| parse(t, "short-term outcome"))
            .collect::<Result<Vec<_>, _>>()?;
        let y_tok = toks[2 + covariate_dim + horizon];
        let long_term = if y_tok.is_empty() {
            None
        } else {
            Some(parse(y_tok, "long-term outcome")?)
        };
        units.push(Unit {
            treatment,
            covariates,
            short_term,
            long_term,
            group,
        });
    }
    let data = Dataset {
        units,
        covariate_dim,
        horizon,
    };
    data.validate()?;
    Ok(data)
}

pub fn write_oracle(oracle: &OracleData, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let q = oracle.units.first().map_or(0, |u| u.unobserved.len());
    let t0 = oracle.units.first().map_or(0, |u| u.short_term_mid.len());
    let g = oracle.grid.len();
    let mut header = String::new();
    for j in 1..=q {
        header.push_str(&format!("u_{j},"));
    }
    for t in 1..=t0 {
        header.push_str(&format!("smid_{t},"));
    }
    for k in 0..g {
        header.push_str(&format!("ycf_{k},"));
    }
    header.push_str("y_factual");
    writeln!(out, "{header}").map_err(|e| io_err(path, e))?;
    // grid line prefixed so the file is self-describing
    let grid_line: Vec<String> = oracle.grid.iter().map(|v| v.to_string()).collect();
    writeln!(out, "#grid,{}", grid_line.join(",")).map_err(|e| io_err(path, e))?;
    for u in &oracle.units {
        let mut fields: Vec<String> = Vec::new();
        fields.extend(u.unobserved.iter().map(|v| v.to_string()));
        fields.extend(u.short_term_mid.iter().map(|v| v.to_string()));
        fields.extend(u.long_term_curve.iter().map(|v| v.to_string()));
        fields.push(u.withheld_long_term.map(|v| v.to_string()).unwrap_or_default());
        writeln!(out, "{}", fields.join(",")).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_oracle(path: &Path) -> Result<OracleData, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file).lines().enumerate();
    let header = reader
        .next()
        .ok_or_else(|| DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "empty file".into(),
        })?
        .1
        .map_err(|e| io_err(path, e))?;
    let cols: Vec<&str> = header.split(',').collect();
    let q = cols.iter().filter(|c| c.starts_with("u_")).count();
    let t0 = cols.iter().filter(|c| c.starts_with("smid_")).count();
    let g = cols.iter().filter(|c| c.starts_with("ycf_")).count();
    let grid_line = reader
        .next()
        .ok_or_else(|| DataError::Parse {
            path: path.display().to_string(),
            line: 2,
            detail: "missing grid line".into(),
        })?
        .1
        .map_err(|e| io_err(path, e))?;
    let grid: Vec<f64> = grid_line
        .strip_prefix("#grid,")
        .ok_or_else(|| DataError::Parse {
            path: path.display().to_string(),
            line: 2,
            detail: "grid line must start with #grid".into(),
        })?
        .split(',')
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: 2,
            detail: e.to_string(),
        })?;
    let mut units = Vec::new();
    for (lineno, line) in reader {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != q + t0 + g + 1 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("expected {} fields, got {}", q + t0 + g + 1, toks.len()),
            });
        }
        let parse_slice = |range: std::ops::Range<usize>| -> Result<Vec<f64>, DataError> {
            toks[range]
                .iter()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| DataError::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        detail: e.to_string(),
                    })
                })
                .collect()
        };
        let unobserved = parse_slice(0..q)?;
        let short_term_mid = parse_slice(q..q + t0)?;
        let long_term_curve = parse_slice(q + t0..q + t0 + g)?;
        let y_tok = toks[q + t0 + g];
        let withheld_long_term = if y_tok.is_empty() {
            None
        } else {
            Some(y_tok.parse::<f64>().map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: e.to_string(),
            })?)
        };
        units.push(OracleUnit {
            unobserved,
            short_term_mid,
            long_term_curve,
            withheld_long_term,
        });
    }
    Ok(OracleData { units, grid })
}

/// Covariate matrix from delimited text (comma or whitespace); a first line
/// that fails to parse as numbers is treated as a header.
pub fn load_covariate_matrix(path: &Path) -> Result<Vec<Vec<f64>>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = if trimmed.contains(',') {
            trimmed.split(',').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        let parsed: Result<Vec<f64>, _> = toks.iter().map(|t| t.parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(e) => {
                if lineno == 0 {
                    continue; // header
                }
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: e.to_string(),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "no data rows".into(),
        });
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(DataError::Validation("ragged covariate matrix".into()));
    }
    Ok(rows)
}
