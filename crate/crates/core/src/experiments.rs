//! Experiment orchestration: deterministic run plans for the result tables
//! and sweeps, a worker pool for independent runs, and CSV/manifest output.
//!
//! Every run is fully determined by a master seed: dataset seeds derive from
//! the dataset parameters (so all variants of one replication share data and
//! initialization), and results are emitted in plan order regardless of
//! worker scheduling.

use crate::data::{gen_synthetic, split_indices, Dataset, OracleData, SyntheticConfig};
use crate::metrics::{
    hsic, hsconic_weighted, mise, reduction_ratio, KernelConfig, TreatmentGrid,
};
use crate::model::{
    content_hash, train, LearnModel, ModelDims, RunManifest, TrainConfig, TrainError, Variant,
};
use crate::ot::{
    build_cost_matrix, mirror_descent_weights, CostBetas, CostFeatures, MirrorDescentConfig,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Budget {
    /// Paper-scale settings (10000 observational units, 400 training epochs,
    /// 10 replications).
    Full,
    /// Shrunk profile that preserves the qualitative trends: 2000
    /// observational units, 200 experimental units, 100 + 100 epochs, 5
    /// replications, narrower layers.
    Desk,
}

impl FromStr for Budget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Budget::Full),
            "desk" => Ok(Budget::Desk),
            other => Err(format!("unknown budget {other:?} (desk|full)")),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Full => write!(f, "full"),
            Budget::Desk => write!(f, "desk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Table1,
    Table2,
    Table3,
    Fig3,
}

impl FromStr for TableKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table1" | "1" => Ok(TableKind::Table1),
            "table2" | "2" => Ok(TableKind::Table2),
            "table3" | "3" => Ok(TableKind::Table3),
            "fig3" => Ok(TableKind::Fig3),
            other => Err(format!("unknown table {other:?} (table1|table2|table3|fig3)")),
        }
    }
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableKind::Table1 => write!(f, "table1"),
            TableKind::Table2 => write!(f, "table2"),
            TableKind::Table3 => write!(f, "table3"),
            TableKind::Fig3 => write!(f, "fig3"),
        }
    }
}

// ---- profiles ------------------------------------------------------------------

pub fn dataset_profile(budget: Budget, beta_u: f64, n_exp: usize, data_seed: u64) -> SyntheticConfig {
    let (n_obs, grid) = match budget {
        Budget::Full => (10_000, 65),
        Budget::Desk => (2_000, 65),
    };
    SyntheticConfig {
        n_obs,
        n_exp,
        confounding_strength: beta_u,
        oracle_grid_points: grid,
        seed: data_seed,
        ..Default::default()
    }
}

pub fn default_n_exp(budget: Budget) -> usize {
    match budget {
        Budget::Full => 500,
        Budget::Desk => 200,
    }
}

pub fn dims_profile(budget: Budget, covariate_dim: usize, horizon: usize) -> ModelDims {
    match budget {
        Budget::Full => ModelDims::standard(covariate_dim, horizon),
        Budget::Desk => ModelDims::desk(covariate_dim, horizon),
    }
}

pub fn train_profile(budget: Budget, seed: u64) -> TrainConfig {
    match budget {
        Budget::Full => TrainConfig {
            batch_size: 500,
            pretrain_epochs: 100,
            train_epochs: 400,
            val_grid_points: 17,
            val_max_units: 400,
            seed,
            ..Default::default()
        },
        Budget::Desk => TrainConfig {
            batch_size: 400,
            pretrain_epochs: 100,
            train_epochs: 100,
            val_grid_points: 9,
            val_max_units: 80,
            ipm_iterations: 20,
            seed,
            ..Default::default()
        },
    }
}

pub fn replications(budget: Budget) -> usize {
    match budget {
        Budget::Full => 10,
        Budget::Desk => 5,
    }
}

// ---- run plans --------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub label: String,
    pub budget: Budget,
    pub beta_u: f64,
    pub n_exp: usize,
    pub variant: Variant,
    pub replication: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub overrides: Option<TrainConfig>,
    pub dependence_metrics: bool,
}

fn seed_of(parts: &str) -> u64 {
    u64::from_str_radix(&content_hash(parts.as_bytes()), 16).unwrap_or(0)
}

impl RunSpec {
    fn new(
        label: impl Into<String>,
        budget: Budget,
        master_seed: u64,
        beta_u: f64,
        n_exp: usize,
        variant: Variant,
        replication: usize,
    ) -> Self {
        // dataset seed excludes the variant, so all variants of one
        // replication are trained on identical data; the model seed excludes
        // the variant too, giving identical initializations
        let data_seed = seed_of(&format!("{master_seed}:data:{beta_u}:{n_exp}:{replication}"));
        let model_seed = seed_of(&format!("{master_seed}:model:{replication}"));
        RunSpec {
            label: label.into(),
            budget,
            beta_u,
            n_exp,
            variant,
            replication,
            data_seed,
            model_seed,
            overrides: None,
            dependence_metrics: false,
        }
    }
}

/// Deterministic run plan for one result table at one budget.
pub fn table_plan(kind: TableKind, budget: Budget, master_seed: u64) -> Vec<RunSpec> {
    let reps = replications(budget);
    let n_exp = default_n_exp(budget);
    let mut plan = Vec::new();
    match kind {
        TableKind::Table1 => {
            let betas: &[f64] = match budget {
                Budget::Full => &[1.0, 1.25, 1.5, 1.75, 2.0],
                Budget::Desk => &[1.0, 2.0],
            };
            for &beta_u in betas {
                for variant in [Variant::None, Variant::Ipm, Variant::Full] {
                    for rep in 0..reps {
                        plan.push(RunSpec::new(
                            "table1", budget, master_seed, beta_u, n_exp, variant, rep,
                        ));
                    }
                }
            }
        }
        TableKind::Table2 => {
            for rep in 0..reps {
                let mut spec = RunSpec::new(
                    "table2",
                    budget,
                    master_seed,
                    1.0,
                    n_exp,
                    Variant::Full,
                    rep,
                );
                spec.dependence_metrics = true;
                plan.push(spec);
            }
        }
        TableKind::Table3 => {
            let sizes: &[usize] = match budget {
                Budget::Full => &[100, 250, 500, 1000, 2000],
                Budget::Desk => &[100, 500, 2000],
            };
            for &n_exp in sizes {
                for rep in 0..reps {
                    plan.push(RunSpec::new(
                        "table3",
                        budget,
                        master_seed,
                        1.0,
                        n_exp,
                        Variant::Full,
                        rep,
                    ));
                }
            }
        }
        TableKind::Fig3 => {
            let lambda_b = [50.0, 100.0, 150.0, 200.0];
            let lambda_o = [0.25, 0.5, 0.75];
            let lambda_e = [1.0, 10.0, 100.0, 1000.0];
            let mut push = |tag: &str, value: f64, cfg: TrainConfig, rep: usize| {
                let mut spec = RunSpec::new(
                    format!("fig3:{tag}={value}"),
                    budget,
                    master_seed,
                    1.0,
                    n_exp,
                    Variant::Full,
                    rep,
                );
                spec.overrides = Some(cfg);
                plan.push(spec);
            };
            for rep in 0..reps {
                let base = train_profile(budget, 0);
                for &v in &lambda_b {
                    push("lambda_b", v, TrainConfig { lambda_b: v, ..base.clone() }, rep);
                }
                for &v in &lambda_o {
                    push("lambda_o", v, TrainConfig { lambda_o: v, ..base.clone() }, rep);
                }
                for &v in &lambda_e {
                    push("lambda_e", v, TrainConfig { lambda_e: v, ..base.clone() }, rep);
                }
            }
        }
    }
    plan
}

// ---- execution ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceMetrics {
    pub hsic_covariates_treatment: f64,
    pub hsic_representation_treatment: f64,
    pub hsconic_short_before: f64,
    pub hsconic_short_after: f64,
    pub hsconic_long_before: f64,
    pub hsconic_long_after: f64,
    pub hsic_reduction: f64,
    pub hsconic_short_reduction: f64,
    pub hsconic_long_reduction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub budget: String,
    pub beta_u: f64,
    pub n_exp: usize,
    pub variant: String,
    pub replication: usize,
    pub mise: f64,
    pub epochs_run: usize,
    pub early_stopped_at: Option<usize>,
    pub dependence: Option<DependenceMetrics>,
    #[serde(skip)]
    pub manifest: Option<RunManifest>,
}

/// Generate data, train, and evaluate one run.
pub fn execute_run(spec: &RunSpec) -> Result<RunRecord, TrainError> {
    let data_cfg = dataset_profile(spec.budget, spec.beta_u, spec.n_exp, spec.data_seed);
    let out = gen_synthetic(&data_cfg).map_err(|e| TrainError::Data(e.to_string()))?;
    run_on_data(spec, &out.obs, &out.obs_oracle, &out.exp)
}

/// Train and evaluate against pre-generated data (shared across variants).
pub fn run_on_data(
    spec: &RunSpec,
    obs: &Dataset,
    obs_oracle: &OracleData,
    exp: &Dataset,
) -> Result<RunRecord, TrainError> {
    let split_seed = spec.data_seed ^ 0x9e37_79b9_7f4a_7c15;
    let (tr, va, te) = split_indices(obs.len(), split_seed);
    let train_set = obs.subset(&tr);
    let val_set = obs.subset(&va);
    let val_oracle = obs_oracle.subset(&va);
    let test_set = obs.subset(&te);
    let test_oracle = obs_oracle.subset(&te);

    let mut cfg = spec
        .overrides
        .clone()
        .unwrap_or_else(|| train_profile(spec.budget, 0));
    cfg.seed = spec.model_seed;
    let dims = dims_profile(spec.budget, obs.covariate_dim, obs.horizon);

    let outcome = train(
        &train_set,
        &val_set,
        Some(&val_oracle),
        exp,
        &dims,
        &cfg,
        spec.variant,
    )?;

    let grid = TreatmentGrid {
        lo: test_oracle.grid[0],
        hi: *test_oracle.grid.last().expect("nonempty grid"),
        points: test_oracle.grid.len(),
    };
    let pred = outcome.model.predict_hdrc(&test_set.covariate_matrix(), &test_oracle.grid)?;
    let mise_value = mise(&pred, &test_oracle.curves(), &grid)?;

    let dependence = if spec.dependence_metrics {
        Some(dependence_metrics(
            &outcome.model,
            &test_set,
            &test_oracle,
            exp,
            &cfg,
            spec.model_seed,
        )?)
    } else {
        None
    };

    Ok(RunRecord {
        label: spec.label.clone(),
        budget: spec.budget.to_string(),
        beta_u: spec.beta_u,
        n_exp: spec.n_exp,
        variant: spec.variant.to_string(),
        replication: spec.replication,
        mise: mise_value,
        epochs_run: outcome.manifest.epochs.len(),
        early_stopped_at: outcome.manifest.early_stopped_at,
        dependence,
        manifest: Some(outcome.manifest),
    })
}

/// Kernel dependence diagnostics on the test split.
///
/// Observed-confounding reduction compares HSIC between raw covariates and
/// treatment against HSIC between the learned representation and treatment.
/// Unobserved-confounding reduction compares weighted kernel conditional
/// dependence of the fixed-intervention potential outcomes (at a = 0.5, from
/// the oracle) with the treatment given covariates: uniform weights before,
/// transport weights after. Kernels and bandwidths are shared between the
/// two, so only the measure changes.
pub fn dependence_metrics(
    model: &LearnModel,
    test: &Dataset,
    oracle: &OracleData,
    exp: &Dataset,
    cfg: &TrainConfig,
    _seed: u64,
) -> Result<DependenceMetrics, TrainError> {
    let x = test.covariate_matrix();
    let a = test.treatments();
    let x_points: Vec<Vec<f64>> = (0..test.len()).map(|i| x.row(i).to_vec()).collect();
    let a_points: Vec<Vec<f64>> = a.iter().map(|&v| vec![v]).collect();

    let fwd = model.forward(&x, &a)?;
    let z_points: Vec<Vec<f64>> = (0..test.len())
        .map(|i| fwd.representation.row(i).to_vec())
        .collect();

    // the quadratic-cost statistic runs on the whole split
    let kcfg = KernelConfig::default();
    let hsic_x = hsic(&x_points, &a_points, &kcfg)?.value;
    let hsic_z = hsic(&z_points, &a_points, &kcfg)?.value;

    // cubic-cost conditional statistics run on a capped prefix
    let cap = 240.min(test.len());
    let keep: Vec<usize> = (0..cap).collect();
    let test = test.subset(&keep);
    let oracle = oracle.subset(&keep);
    let x = test.covariate_matrix();
    let a = test.treatments();
    let x_points: Vec<Vec<f64>> = (0..cap).map(|i| x.row(i).to_vec()).collect();
    let a_points: Vec<Vec<f64>> = a.iter().map(|&v| vec![v]).collect();
    let fwd = model.forward(&x, &a)?;

    // transport weights for the capped test units against the experimental
    // set; the long iteration budget is cheap here and fully converges the
    // weight profile
    let exp_x = exp.covariate_matrix();
    let exp_a = exp.treatments();
    let exp_fwd = model.forward(&exp_x, &exp_a)?;
    let cost = build_cost_matrix(
        &CostFeatures {
            embeddings: &fwd.mean_embedding,
            covariates: &x,
            treatments: &a,
        },
        &CostFeatures {
            embeddings: &exp_fwd.mean_embedding,
            covariates: &exp_x,
            treatments: &exp_a,
        },
        &CostBetas {
            embedding: cfg.beta_embedding,
            covariate: cfg.beta_covariate,
            treatment: cfg.beta_treatment,
        },
    )?;
    let md = mirror_descent_weights(
        &cost,
        &MirrorDescentConfig {
            entropy_strength: cfg.lambda_e,
            step_size: cfg.ot_step_size,
            iterations: 500,
            track_objective: false,
        },
    )?;

    // potential outcomes under the fixed mid-grid intervention
    let mid = oracle
        .grid
        .iter()
        .position(|&g| (g - 0.5).abs() < 1e-9)
        .unwrap_or(oracle.grid.len() / 2);
    let s_points: Vec<Vec<f64>> = oracle.units.iter().map(|u| u.short_term_mid.clone()).collect();
    let y_points: Vec<Vec<f64>> = oracle
        .units
        .iter()
        .map(|u| vec![u.long_term_curve[mid]])
        .collect();

    let uniform = vec![1.0 / cap as f64; cap];
    let s_before = hsconic_weighted(&s_points, &a_points, &x_points, &uniform, &kcfg)?.value;
    let y_before = hsconic_weighted(&y_points, &a_points, &x_points, &uniform, &kcfg)?.value;
    let s_after = hsconic_weighted(&s_points, &a_points, &x_points, &md.weights, &kcfg)?.value;
    let y_after = hsconic_weighted(&y_points, &a_points, &x_points, &md.weights, &kcfg)?.value;

    Ok(DependenceMetrics {
        hsic_covariates_treatment: hsic_x,
        hsic_representation_treatment: hsic_z,
        hsconic_short_before: s_before,
        hsconic_short_after: s_after,
        hsconic_long_before: y_before,
        hsconic_long_after: y_after,
        hsic_reduction: reduction_ratio(hsic_x, hsic_z).unwrap_or(f64::NAN),
        hsconic_short_reduction: reduction_ratio(s_before, s_after).unwrap_or(f64::NAN),
        hsconic_long_reduction: reduction_ratio(y_before, y_after).unwrap_or(f64::NAN),
    })
}

/// Execute a plan on a bounded worker pool. Results come back in plan order;
/// datasets are generated once per `(beta_u, n_exp, replication)` group and
/// shared by the variants trained on them.
pub fn run_plan(plan: &[RunSpec], workers: usize) -> Result<Vec<RunRecord>, TrainError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::Data(format!("worker pool: {e}")))?;

    // group runs sharing a dataset to avoid regenerating it
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    for (idx, spec) in plan.iter().enumerate() {
        match groups.iter_mut().find(|(seed, _)| *seed == spec.data_seed) {
            Some((_, members)) => members.push(idx),
            None => groups.push((spec.data_seed, vec![idx])),
        }
    }

    let results: Vec<Vec<(usize, Result<RunRecord, TrainError>)>> = pool.install(|| {
        groups
            .par_iter()
            .map(|(_, members)| {
                let first = &plan[members[0]];
                let data_cfg =
                    dataset_profile(first.budget, first.beta_u, first.n_exp, first.data_seed);
                let data = match gen_synthetic(&data_cfg) {
                    Ok(d) => d,
                    Err(e) => {
                        return members
                            .iter()
                            .map(|&i| (i, Err(TrainError::Data(e.to_string()))))
                            .collect()
                    }
                };
                members
                    .iter()
                    .map(|&i| {
                        (
                            i,
                            run_on_data(&plan[i], &data.obs, &data.obs_oracle, &data.exp),
                        )
                    })
                    .collect()
            })
            .collect()
    });

    let mut ordered: Vec<Option<RunRecord>> = (0..plan.len()).map(|_| None).collect();
    for group in results {
        for (idx, res) in group {
            ordered[idx] = Some(res?);
        }
    }
    Ok(ordered.into_iter().map(|r| r.expect("all runs placed")).collect())
}

// ---- output ---------------------------------------------------------------------------

pub fn records_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(
        "label,budget,beta_u,n_exp,variant,replication,mise,epochs_run,early_stopped_at,\
         hsic_x_a,hsic_z_a,hsic_reduction,hsconic_s_before,hsconic_s_after,hsconic_s_reduction,\
         hsconic_y_before,hsconic_y_after,hsconic_y_reduction\n",
    );
    for r in records {
        let dep = r.dependence.as_ref();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.budget,
            r.beta_u,
            r.n_exp,
            r.variant,
            r.replication,
            r.mise,
            r.epochs_run,
            r.early_stopped_at.map(|e| e.to_string()).unwrap_or_default(),
            opt(dep.map(|d| d.hsic_covariates_treatment)),
            opt(dep.map(|d| d.hsic_representation_treatment)),
            opt(dep.map(|d| d.hsic_reduction)),
            opt(dep.map(|d| d.hsconic_short_before)),
            opt(dep.map(|d| d.hsconic_short_after)),
            opt(dep.map(|d| d.hsconic_short_reduction)),
            opt(dep.map(|d| d.hsconic_long_before)),
            opt(dep.map(|d| d.hsconic_long_after)),
            opt(dep.map(|d| d.hsconic_long_reduction)),
        ));
    }
    out
}

/// Mean and std grouped by `(label, beta_u, n_exp, variant)`, formatted the
/// way result tables report them.
pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut keys: Vec<(String, String, String, String)> = Vec::new();
    for r in records {
        let key = (
            r.label.clone(),
            r.beta_u.to_string(),
            r.n_exp.to_string(),
            r.variant.clone(),
        );
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = String::from("label,beta_u,n_exp,variant,replications,mise_mean,mise_std,mise\n");
    for key in keys {
        let group: Vec<f64> = records
            .iter()
            .filter(|r| {
                r.label == key.0
                    && r.beta_u.to_string() == key.1
                    && r.n_exp.to_string() == key.2
                    && r.variant == key.3
            })
            .map(|r| r.mise)
            .collect();
        let n = group.len() as f64;
        let mean = group.iter().sum::<f64>() / n;
        let var = group.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.2}±{:.2}\n",
            key.0,
            key.1,
            key.2,
            key.3,
            group.len(),
            mean,
            std,
            mean,
            std
        ));
    }
    out
}

/// Run one table end to end, writing `<table>_runs.csv`, `<table>_summary.csv`
/// and per-run manifests under `out_dir`.
pub fn reproduce(
    kind: TableKind,
    budget: Budget,
    master_seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<(PathBuf, PathBuf, Vec<RunRecord>), TrainError> {
    let plan = table_plan(kind, budget, master_seed);
    let records = run_plan(&plan, workers)?;
    fs::create_dir_all(out_dir).map_err(|e| TrainError::Data(e.to_string()))?;
    let runs_path = out_dir.join(format!("{kind}_runs.csv"));
    let summary_path = out_dir.join(format!("{kind}_summary.csv"));
    fs::write(&runs_path, records_csv(&records)).map_err(|e| TrainError::Data(e.to_string()))?;
    fs::write(&summary_path, summary_csv(&records))
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let manifest_dir = out_dir.join("manifests");
    fs::create_dir_all(&manifest_dir).map_err(|e| TrainError::Data(e.to_string()))?;
    for (i, r) in records.iter().enumerate() {
        if let Some(m) = &r.manifest {
            let path = manifest_dir.join(format!(
                "{}_{}_{}_{}_rep{}.json",
                kind, r.variant, r.beta_u, r.n_exp, i
            ));
            fs::write(&path, serde_json::to_string_pretty(m).unwrap())
                .map_err(|e| TrainError::Data(e.to_string()))?;
        }
    }
    Ok((runs_path, summary_path, records))
}
