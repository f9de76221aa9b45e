//! Experiment command line: dataset generation, training, evaluation, and
//! reproduction of the result tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! divergence. Worker count for multi-run commands comes from the
//! `HDRC_WORKERS` environment variable (default: available parallelism).

mod config;

use clap::{Parser, Subcommand};
use hdrc_core::checkpoint;
use hdrc_core::data::{
    gen_semisynthetic, gen_synthetic, load_covariate_matrix, read_dataset, read_oracle,
    split_indices, write_dataset, write_oracle, DataError,
};
use hdrc_core::experiments::{reproduce, Budget, RunSpec, TableKind};
use hdrc_core::metrics::{mise, TreatmentGrid};
use hdrc_core::model::{content_hash, train, LearnModel, TrainError, Variant};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "hdrc",
    about = "Long-term heterogeneous dose-response estimation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset files (and their oracle companions) from a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's dataset.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on previously generated data and evaluate it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of generated data.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `train`; a freshly initialized model is
        /// evaluated when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reproduce a result table at the chosen compute budget.
    Reproduce {
        #[arg(long, default_value = "table1")]
        table: String,
        #[arg(long, default_value = "desk")]
        budget: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Hyperparameter sweeps (the sensitivity-study grid).
    Sweep {
        /// One of lambda_b, lambda_o, lambda_e; runs all three when omitted.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, default_value = "desk")]
        budget: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// Process-level error with its exit code.
enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn workers() -> usize {
    std::env::var("HDRC_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate { config, out, seed } => cmd_generate(&config, out, seed),
        Command::Train {
            config,
            variant,
            seed,
            out,
        } => cmd_train(&config, &variant, seed, out),
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => cmd_eval(&config, checkpoint.as_deref(), seed, out),
        Command::Reproduce {
            table,
            budget,
            seed,
            out,
        } => cmd_reproduce(&table, &budget, seed, &out),
        Command::Sweep {
            param,
            budget,
            seed,
            out,
        } => cmd_sweep(param.as_deref(), &budget, seed, &out),
    }
}

fn dataset_paths(dir: &Path, beta_u: Option<f64>) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let tag = beta_u.map(|b| format!("_bu{b}")).unwrap_or_default();
    (
        dir.join(format!("obs{tag}.csv")),
        dir.join(format!("obs{tag}.oracle")),
        dir.join(format!("exp{tag}.csv")),
        dir.join(format!("exp{tag}.oracle")),
    )
}

fn cmd_generate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let file = config::load(config).map_err(CliError::Config)?;
    let dir = out.unwrap_or_else(|| file.dataset.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(e.to_string()))?;

    let levels: Vec<Option<f64>> = if file.dataset.beta_u_sweep {
        [1.0, 1.25, 1.5, 1.75, 2.0].iter().map(|&b| Some(b)).collect()
    } else {
        vec![None]
    };

    let mut checksums = String::new();
    for level in levels {
        let mut ds = file.dataset.clone();
        if let Some(b) = level {
            ds.beta_u = b;
        }
        if let Some(s) = seed {
            ds.seed = s;
        }
        let (obs_path, obs_oracle_path, exp_path, exp_oracle_path) = dataset_paths(&dir, level);
        match ds.kind.as_str() {
            "synthetic" => {
                let data = gen_synthetic(&ds.synthetic_config())?;
                write_dataset(&data.obs, &obs_path)?;
                write_oracle(&data.obs_oracle, &obs_oracle_path)?;
                write_dataset(&data.exp, &exp_path)?;
                write_oracle(&data.exp_oracle, &exp_oracle_path)?;
            }
            "semi-synthetic" => {
                let covariate_path = ds.covariates.clone().ok_or_else(|| {
                    CliError::Config("semi-synthetic generation needs dataset.covariates".into())
                })?;
                let rows = load_covariate_matrix(&covariate_path)?;
                let data = gen_semisynthetic(&rows, &ds.semisynthetic_config())?;
                write_dataset(&data.obs, &obs_path)?;
                write_oracle(&data.obs_oracle, &obs_oracle_path)?;
                write_dataset(&data.exp, &exp_path)?;
                write_oracle(&data.exp_oracle, &exp_oracle_path)?;
            }
            other => return Err(CliError::Config(format!("unknown dataset kind {other:?}"))),
        }
        for path in [&obs_path, &obs_oracle_path, &exp_path, &exp_oracle_path] {
            let bytes = std::fs::read(path).map_err(|e| CliError::Data(e.to_string()))?;
            let line = format!(
                "{} {} ({} bytes)\n",
                content_hash(&bytes),
                path.display(),
                bytes.len()
            );
            print!("{line}");
            checksums.push_str(&line);
        }
    }
    std::fs::write(dir.join("checksums.txt"), checksums)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

struct LoadedData {
    obs: hdrc_core::data::Dataset,
    obs_oracle: hdrc_core::data::OracleData,
    exp: hdrc_core::data::Dataset,
}

fn load_data(file: &config::ExperimentFile) -> Result<LoadedData, CliError> {
    let (obs_path, obs_oracle_path, exp_path, _) = dataset_paths(&file.dataset.dir, None);
    for p in [&obs_path, &obs_oracle_path, &exp_path] {
        if !p.exists() {
            return Err(CliError::Data(format!(
                "missing dataset file {} (run `hdrc generate` first)",
                p.display()
            )));
        }
    }
    Ok(LoadedData {
        obs: read_dataset(&obs_path)?,
        obs_oracle: read_oracle(&obs_oracle_path)?,
        exp: read_dataset(&exp_path)?,
    })
}

fn cmd_train(
    config: &Path,
    variant: &str,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let file = config::load(config).map_err(CliError::Config)?;
    let variant = Variant::from_str(variant).map_err(CliError::Config)?;
    let data = load_data(&file)?;
    let out_dir = out.unwrap_or_else(|| file.experiment.out_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Data(e.to_string()))?;

    let split_seed = file.dataset.seed ^ 0x9e37_79b9_7f4a_7c15;
    let (tr, va, te) = split_indices(data.obs.len(), split_seed);
    let cfg = file.train.config(seed);
    let dims = file.model.dims(data.obs.covariate_dim, data.obs.horizon);

    let outcome = train(
        &data.obs.subset(&tr),
        &data.obs.subset(&va),
        Some(&data.obs_oracle.subset(&va)),
        &data.exp,
        &dims,
        &cfg,
        variant,
    )?;

    // evaluation on the held-out test split
    let test = data.obs.subset(&te);
    let test_oracle = data.obs_oracle.subset(&te);
    let grid = TreatmentGrid {
        lo: test_oracle.grid[0],
        hi: *test_oracle.grid.last().expect("grid"),
        points: test_oracle.grid.len(),
    };
    let pred = outcome
        .model
        .predict_hdrc(&test.covariate_matrix(), &test_oracle.grid)?;
    let mise_value = mise(&pred, &test_oracle.curves(), &grid).map_err(TrainError::from)?;

    let ckpt_path = out_dir.join(format!("model_{variant}_seed{seed}.ckpt"));
    checkpoint::save(&outcome.model.params, &ckpt_path)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mut manifest = outcome.manifest;
    manifest.checkpoint_path = Some(ckpt_path.display().to_string());
    manifest.final_metrics = Some(serde_json::json!({ "mise": mise_value }));
    // manifest is written atomically so an interrupted run never leaves a
    // file that claims completion
    let manifest_path = out_dir.join(format!("manifest_{variant}_seed{seed}.json"));
    let tmp = manifest_path.with_extension("json.partial");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::rename(&tmp, &manifest_path).map_err(|e| CliError::Data(e.to_string()))?;

    println!("variant={variant} seed={seed} mise={mise_value}");
    println!("checkpoint: {}", ckpt_path.display());
    println!("manifest:   {}", manifest_path.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    ckpt: Option<&Path>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let file = config::load(config).map_err(CliError::Config)?;
    let data = load_data(&file)?;
    let split_seed = file.dataset.seed ^ 0x9e37_79b9_7f4a_7c15;
    let (_, _, te) = split_indices(data.obs.len(), split_seed);
    let dims = file.model.dims(data.obs.covariate_dim, data.obs.horizon);

    let mut model = LearnModel::init(&dims, seed);
    if let Some(path) = ckpt {
        checkpoint::restore(&mut model.params, path).map_err(|e| CliError::Data(e.to_string()))?;
    }

    let test = data.obs.subset(&te);
    let test_oracle = data.obs_oracle.subset(&te);
    let grid = TreatmentGrid {
        lo: test_oracle.grid[0],
        hi: *test_oracle.grid.last().expect("grid"),
        points: test_oracle.grid.len(),
    };
    let pred = model.predict_hdrc(&test.covariate_matrix(), &test_oracle.grid)?;
    let mise_value = mise(&pred, &test_oracle.curves(), &grid).map_err(TrainError::from)?;
    println!(
        "checkpoint={} mise={mise_value}",
        ckpt.map(|p| p.display().to_string())
            .unwrap_or_else(|| "<random init>".into())
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(
            dir.join("eval.csv"),
            format!("checkpoint,mise\n{},{}\n", ckpt.is_some(), mise_value),
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn cmd_reproduce(table: &str, budget: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind = TableKind::from_str(table).map_err(CliError::Config)?;
    let budget = Budget::from_str(budget).map_err(CliError::Config)?;
    let (runs, summary, records) = reproduce(kind, budget, seed, out, workers())?;
    println!("{} runs complete", records.len());
    println!("runs:    {}", runs.display());
    println!("summary: {}", summary.display());
    Ok(())
}

fn cmd_sweep(param: Option<&str>, budget: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let budget = Budget::from_str(budget).map_err(CliError::Config)?;
    if let Some(p) = param {
        if !["lambda_b", "lambda_o", "lambda_e"].contains(&p) {
            return Err(CliError::Config(format!(
                "unknown sweep parameter {p:?} (lambda_b|lambda_o|lambda_e)"
            )));
        }
    }
    let plan = hdrc_core::experiments::table_plan(TableKind::Fig3, budget, seed);
    let filtered: Vec<RunSpec> = match param {
        Some(p) => plan
            .into_iter()
            .filter(|s| s.label.starts_with(&format!("fig3:{p}")))
            .collect(),
        None => plan,
    };
    let records = hdrc_core::experiments::run_plan(&filtered, workers())?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(e.to_string()))?;
    let csv = hdrc_core::experiments::records_csv(&records);
    let path = out.join("sweep_runs.csv");
    std::fs::write(&path, csv).map_err(|e| CliError::Data(e.to_string()))?;
    let summary = hdrc_core::experiments::summary_csv(&records);
    let spath = out.join("sweep_summary.csv");
    std::fs::write(&spath, summary).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{} sweep runs complete", records.len());
    println!("runs:    {}", path.display());
    println!("summary: {}", spath.display());
    Ok(())
}
