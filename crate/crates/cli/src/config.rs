//! Experiment configuration file: TOML with `[dataset]`, `[model]`, `[train]`
//! and `[experiment]` sections. Every field has a default mirroring the
//! standard hyperparameters, so a minimal file only overrides what changes.

use hdrc_core::data::{SemiSyntheticConfig, SyntheticConfig};
use hdrc_core::model::{ModelDims, TrainConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: String,
    /// Directory for generated dataset files.
    pub dir: PathBuf,
    pub n_obs: usize,
    pub n_exp: usize,
    pub covariate_dim: usize,
    pub unobserved_dim: usize,
    pub beta_u: f64,
    /// Generate one dataset per confounding level instead of a single file.
    pub beta_u_sweep: bool,
    pub horizon: usize,
    pub long_horizon: usize,
    pub grid_points: usize,
    pub seed: u64,
    /// Covariate matrix file for the semi-synthetic generator.
    pub covariates: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "synthetic".into(),
            dir: PathBuf::from("data"),
            n_obs: 10_000,
            n_exp: 500,
            covariate_dim: 15,
            unobserved_dim: 5,
            beta_u: 1.0,
            beta_u_sweep: false,
            horizon: 7,
            long_horizon: 14,
            grid_points: 65,
            seed: 0,
            covariates: None,
        }
    }
}

impl DatasetSection {
    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_obs: self.n_obs,
            n_exp: self.n_exp,
            covariate_dim: self.covariate_dim,
            unobserved_dim: self.unobserved_dim,
            confounding_strength: self.beta_u,
            horizon: self.horizon,
            long_horizon: self.long_horizon,
            oracle_grid_points: self.grid_points,
            seed: self.seed,
        }
    }

    pub fn semisynthetic_config(&self) -> SemiSyntheticConfig {
        SemiSyntheticConfig {
            horizon: self.horizon,
            long_horizon: self.long_horizon,
            oracle_grid_points: self.grid_points,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub rep_dim: usize,
    pub phi_hidden: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub attn_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            rep_dim: 50,
            phi_hidden: 50,
            gru_hidden: 50,
            head_hidden: 50,
            attn_dim: 50,
        }
    }
}

impl ModelSection {
    pub fn dims(&self, covariate_dim: usize, horizon: usize) -> ModelDims {
        ModelDims {
            covariate_dim,
            rep_dim: self.rep_dim,
            phi_hidden: self.phi_hidden,
            gru_hidden: self.gru_hidden,
            head_hidden: self.head_hidden,
            attn_dim: self.attn_dim,
            horizon,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda_o: f64,
    pub lambda_b: f64,
    pub lambda_e: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ot_iterations: usize,
    pub ot_step_size: f64,
    pub ipm_epsilon: f64,
    pub ipm_iterations: usize,
    pub patience: usize,
    pub val_grid_points: usize,
    pub val_max_units: usize,
    pub beta_embedding: f64,
    pub beta_covariate: f64,
    pub beta_treatment: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lambda_o: d.lambda_o,
            lambda_b: d.lambda_b,
            lambda_e: d.lambda_e,
            batch_size: d.batch_size,
            pretrain_epochs: d.pretrain_epochs,
            train_epochs: d.train_epochs,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            ot_iterations: d.ot_iterations,
            ot_step_size: d.ot_step_size,
            ipm_epsilon: d.ipm_epsilon,
            ipm_iterations: d.ipm_iterations,
            patience: d.patience,
            val_grid_points: d.val_grid_points,
            val_max_units: d.val_max_units,
            beta_embedding: d.beta_embedding,
            beta_covariate: d.beta_covariate,
            beta_treatment: d.beta_treatment,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda_o: self.lambda_o,
            lambda_b: self.lambda_b,
            lambda_e: self.lambda_e,
            batch_size: self.batch_size,
            pretrain_epochs: self.pretrain_epochs,
            train_epochs: self.train_epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ot_iterations: self.ot_iterations,
            ot_step_size: self.ot_step_size,
            ipm_epsilon: self.ipm_epsilon,
            ipm_iterations: self.ipm_iterations,
            patience: self.patience,
            val_grid_points: self.val_grid_points,
            val_max_units: self.val_max_units,
            beta_embedding: self.beta_embedding,
            beta_covariate: self.beta_covariate,
            beta_treatment: self.beta_treatment,
            seed,
            force_uniform_ot_weights: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub replications: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            variants: vec!["none".into(), "ipm".into(), "full".into()],
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            replications: 10,
        }
    }
}

pub fn load(path: &Path) -> Result<ExperimentFile, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let file: ExperimentFile =
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
    if file.dataset.kind != "synthetic" && file.dataset.kind != "semi-synthetic" {
        return Err(format!(
            "config {}: dataset.kind must be synthetic or semi-synthetic",
            path.display()
        ));
    }
    if file.experiment.seeds.is_empty() {
        return Err("config: experiment.seeds must be nonempty".into());
    }
    let mut seen = file.experiment.seeds.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != file.experiment.seeds.len() {
        return Err("config: experiment.seeds must be distinct".into());
    }
    Ok(file)
}
