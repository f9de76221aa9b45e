//! The long-term dose-response estimator: a balanced representation feeding a
//! treatment-modulated bidirectional GRU, per-step short-term heads, attention
//! pooling and a long-term head, trained with transport-learned sample
//! weights and a balance penalty.
//!
//! Training follows a two-phase schedule: a pre-training phase with uniform
//! weights (so the sequence embeddings used by the transport cost are
//! meaningful), then the weighted phase in which each batch's weights come
//! from projected mirror descent on the cost between the batch and the full
//! experimental set. Weights, treatment permutations and transport plans are
//! constants of each step: gradients never flow through them.

use crate::balance::{ipm_wasserstein, permute_treatments, BalanceError, JointSamples};
use crate::data::{Dataset, OracleData};
use crate::metrics::{mise, MetricError, TreatmentGrid};
use crate::nn::{
    AttentionBlock, BasisVars, BiGruBlock, MlpBlock, NnError, VcMlpBlock,
};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::ot::{
    build_cost_matrix, mirror_descent_weights, CostBetas, CostFeatures, MirrorDescentConfig,
    OtError, TransportPlan,
};
use crate::params::ParamSet;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        manifest: Box<RunManifest>,
    },
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite loss in term `{0}`")]
    NonFiniteTerm(&'static str),
    #[error(transparent)]
    Shape(#[from] crate::tensor::ShapeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Which bias corrections are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No correction: uniform weights, no balance penalty.
    None,
    /// Balance penalty only, uniform weights.
    Ipm,
    /// Balance penalty plus transport-learned weights.
    Full,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::None => write!(f, "none"),
            Variant::Ipm => write!(f, "ipm"),
            Variant::Full => write!(f, "full"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Variant::None),
            "ipm" => Ok(Variant::Ipm),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant {other:?} (none|ipm|full)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDims {
    pub covariate_dim: usize,
    pub rep_dim: usize,
    pub phi_hidden: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub attn_dim: usize,
    pub horizon: usize,
}

impl ModelDims {
    pub fn standard(covariate_dim: usize, horizon: usize) -> Self {
        ModelDims {
            covariate_dim,
            rep_dim: 50,
            phi_hidden: 50,
            gru_hidden: 50,
            head_hidden: 50,
            attn_dim: 50,
            horizon,
        }
    }

    /// Shrunk widths for desk-scale experiments.
    pub fn desk(covariate_dim: usize, horizon: usize) -> Self {
        ModelDims {
            covariate_dim,
            rep_dim: 10,
            phi_hidden: 10,
            gru_hidden: 10,
            head_hidden: 10,
            attn_dim: 10,
            horizon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
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
    /// Cap on validation units used for early stopping (0 = all).
    pub val_max_units: usize,
    pub beta_embedding: f64,
    pub beta_covariate: f64,
    pub beta_treatment: f64,
    pub seed: u64,
    /// Diagnostic hook: run the full-variant code path but force uniform
    /// weights, which must reproduce the balance-only variant exactly.
    pub force_uniform_ot_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_o: 0.5,
            lambda_b: 100.0,
            lambda_e: 100.0,
            batch_size: 500,
            pretrain_epochs: 100,
            train_epochs: 400,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            ot_iterations: 50,
            ot_step_size: 1e-3,
            ipm_epsilon: 0.1,
            ipm_iterations: 50,
            patience: 20,
            val_grid_points: 9,
            val_max_units: 100,
            beta_embedding: 10.0,
            beta_covariate: 0.1,
            beta_treatment: 0.1,
            seed: 0,
            force_uniform_ot_weights: false,
        }
    }
}

// ---- the model -------------------------------------------------------------

pub struct LearnModel {
    pub params: ParamSet<f64>,
    pub dims: ModelDims,
    phi: MlpBlock,
    q: BiGruBlock,
    g: VcMlpBlock,
    f: AttentionBlock,
    h: VcMlpBlock,
}

/// Handles into a taped forward pass.
pub struct TapedForward {
    pub short_term: Vec<Var>,
    pub long_term: Var,
    pub representation: Var,
    pub step_reps: Vec<Var>,
    pub mean_embedding: Var,
    pub attention: Var,
}

/// Detached forward outputs.
pub struct ForwardOutput {
    /// `[n, t0]` short-term predictions.
    pub short_term: Tensor<f64>,
    /// Long-term prediction per unit.
    pub long_term: Vec<f64>,
    /// `[n, rep_dim]` treatment-independent representation.
    pub representation: Tensor<f64>,
    /// `[n, 2H]` mean of the step embeddings, used by the transport cost.
    pub mean_embedding: Tensor<f64>,
    /// `[n, t0]` attention weights.
    pub attention: Tensor<f64>,
}

impl LearnModel {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let phi = MlpBlock::new(
            &mut params,
            "phi",
            dims.covariate_dim,
            dims.phi_hidden,
            dims.rep_dim,
            &mut rng,
        );
        // each step's input is the representation plus a step-index channel
        let q = BiGruBlock::new(&mut params, "q", dims.rep_dim + 1, dims.gru_hidden, &mut rng);
        let g = VcMlpBlock::new(
            &mut params,
            "g",
            2 * dims.gru_hidden,
            dims.head_hidden,
            1,
            &mut rng,
        );
        let f = AttentionBlock::new(&mut params, "f", 2 * dims.gru_hidden, dims.attn_dim, &mut rng);
        let h = VcMlpBlock::new(
            &mut params,
            "h",
            2 * dims.gru_hidden,
            dims.head_hidden,
            1,
            &mut rng,
        );
        LearnModel {
            params,
            dims: dims.clone(),
            phi,
            q,
            g,
            f,
            h,
        }
    }

    pub fn forward_taped(
        &self,
        tape: &mut Tape<f64>,
        vars: &[Var],
        x: &Tensor<f64>,
        a: &[f64],
    ) -> Result<TapedForward, TrainError> {
        let n = a.len();
        if x.rows() != n || x.cols() != self.dims.covariate_dim {
            return Err(TrainError::Data(format!(
                "covariate matrix {:?} incompatible with {} treatments",
                x.shape(),
                n
            )));
        }
        let basis = BasisVars::for_treatments(tape, a)?;
        let x_leaf = tape.leaf(x.clone());
        let z = self.phi.forward(tape, vars, x_leaf)?;

        let t0 = self.dims.horizon;
        let mut inputs = Vec::with_capacity(t0);
        for t in 1..=t0 {
            let enc = tape.leaf(Tensor::full(&[n, 1], t as f64 / t0 as f64));
            inputs.push(tape.concat_cols(&[z, enc])?);
        }
        let step_reps = self.q.forward(tape, vars, &inputs, &basis)?;
        let mut short_term = Vec::with_capacity(t0);
        for &r in &step_reps {
            short_term.push(self.g.forward(tape, vars, r, &basis)?);
        }
        let (pooled, attention) = self.f.pool(tape, vars, &step_reps, &basis)?;
        let long_term = self.h.forward(tape, vars, pooled, &basis)?;

        let mut acc = step_reps[0];
        for &r in &step_reps[1..] {
            acc = tape.add(acc, r)?;
        }
        let mean_embedding = tape.scale(acc, 1.0 / t0 as f64);

        Ok(TapedForward {
            short_term,
            long_term,
            representation: z,
            step_reps,
            mean_embedding,
            attention,
        })
    }

    pub fn forward(&self, x: &Tensor<f64>, a: &[f64]) -> Result<ForwardOutput, TrainError> {
        let mut tape = Tape::new();
        let vars = self.params.register_on(&mut tape);
        let fwd = self.forward_taped(&mut tape, &vars, x, a)?;
        let n = a.len();
        let mut s = Vec::with_capacity(n * self.dims.horizon);
        for i in 0..n {
            for t in 0..self.dims.horizon {
                s.push(tape.value(fwd.short_term[t]).data()[i]);
            }
        }
        Ok(ForwardOutput {
            short_term: Tensor::new(vec![n, self.dims.horizon], s).expect("consistent"),
            long_term: tape.value(fwd.long_term).data().to_vec(),
            representation: tape.value(fwd.representation).clone(),
            mean_embedding: tape.value(fwd.mean_embedding).clone(),
            attention: tape.value(fwd.attention).clone(),
        })
    }

    /// Dose-response curves for every row of `x` over the grid; one forward
    /// pass per grid point.
    pub fn predict_hdrc(
        &self,
        x: &Tensor<f64>,
        grid: &[f64],
    ) -> Result<Vec<Vec<f64>>, TrainError> {
        let n = x.rows();
        let mut curves = vec![Vec::with_capacity(grid.len()); n];
        for &a in grid {
            let out = self.forward(x, &vec![a; n])?;
            for (i, c) in curves.iter_mut().enumerate() {
                c.push(out.long_term[i]);
            }
        }
        Ok(curves)
    }
}

// ---- the loss ----------------------------------------------------------------

/// One observational batch plus the full experimental set, in tensor form.
pub struct LossInputs<'a> {
    pub obs_x: &'a Tensor<f64>,
    pub obs_a: &'a [f64],
    /// `[b, t0]` observed short-term outcomes.
    pub obs_s: &'a Tensor<f64>,
    pub obs_y: &'a [f64],
    pub exp_x: &'a Tensor<f64>,
    pub exp_a: &'a [f64],
    pub exp_s: &'a Tensor<f64>,
}

/// Step constants: sample weights, the treatment permutation, and the
/// transport plan of the balance term. All are held fixed by the gradient.
pub struct LossContext {
    /// Per-unit weights over the batch, summing to one.
    pub weights: Vec<f64>,
    pub permuted_a: Vec<f64>,
    pub ipm_plan: Option<TransportPlan<f64>>,
}

pub struct LossBreakdown {
    pub total: Var,
    pub long_term_value: f64,
    pub short_obs_value: f64,
    pub short_exp_value: f64,
    pub balance_value: f64,
}

impl LearnModel {
    /// Assemble the training loss on `tape`, with `wt = b * weights` so that
    /// uniform weights reproduce the unweighted empirical risk exactly:
    ///
    /// ```text
    /// 1/b sum_i wt_i (y_i - yhat_i)^2
    ///   + lambda_o/b sum_{i,t} wt_i (s_it - shat_it)^2
    ///   + (1 - lambda_o)/n_e sum_{i,t} (s_it - shat_it)^2
    ///   + lambda_b <gamma, C(z, a, a~)>
    /// ```
    #[allow(clippy::too_many_arguments)]
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<f64>,
        vars: &[Var],
        inputs: &LossInputs<'_>,
        ctx: &LossContext,
        lambda_o: f64,
        lambda_b: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let obs = self.forward_taped(tape, vars, inputs.obs_x, inputs.obs_a)?;
        let exp = self.forward_taped(tape, vars, inputs.exp_x, inputs.exp_a)?;
        self.assemble_loss(tape, &obs, &exp, inputs, ctx, lambda_o, lambda_b)
    }

    /// Loss assembly from existing forward passes (shared with the training
    /// loop, which also reads embeddings off the same tape).
    #[allow(clippy::too_many_arguments)]
    pub fn assemble_loss(
        &self,
        tape: &mut Tape<f64>,
        obs: &TapedForward,
        exp: &TapedForward,
        inputs: &LossInputs<'_>,
        ctx: &LossContext,
        lambda_o: f64,
        lambda_b: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let b = inputs.obs_a.len();
        if ctx.weights.len() != b || inputs.obs_y.len() != b {
            return Err(TrainError::Data(
                "batch weights/outcomes length mismatch".into(),
            ));
        }
        let n_e = inputs.exp_a.len();
        let t0 = self.dims.horizon;

        let scaled_w: Vec<f64> = ctx.weights.iter().map(|w| w * b as f64).collect();
        let w_leaf = tape.leaf(Tensor::from_vec(scaled_w));

        // weighted long-term squared error
        let y_target = tape.leaf(Tensor::new(vec![b, 1], inputs.obs_y.to_vec())?);
        let y_diff = tape.sub(obs.long_term, y_target)?;
        let y_sq = tape.mul(y_diff, y_diff)?;
        let y_weighted = tape.mul_rows(y_sq, w_leaf)?;
        let y_sum = tape.sum(y_weighted);
        let y_term = tape.scale(y_sum, 1.0 / b as f64);

        // weighted observational short-term squared error
        let mut s_obs_term: Option<Var> = None;
        for t in 0..t0 {
            let target: Vec<f64> = (0..b).map(|i| inputs.obs_s.get2(i, t)).collect();
            let target = tape.leaf(Tensor::new(vec![b, 1], target)?);
            let diff = tape.sub(obs.short_term[t], target)?;
            let sq = tape.mul(diff, diff)?;
            let weighted = tape.mul_rows(sq, w_leaf)?;
            let sum = tape.sum(weighted);
            s_obs_term = Some(match s_obs_term {
                Some(acc) => tape.add(acc, sum)?,
                None => sum,
            });
        }
        let s_obs_term = tape.scale(s_obs_term.expect("t0 >= 1"), lambda_o / b as f64);

        // experimental short-term squared error (uniform)
        let mut s_exp_term: Option<Var> = None;
        for t in 0..t0 {
            let target: Vec<f64> = (0..n_e).map(|i| inputs.exp_s.get2(i, t)).collect();
            let target = tape.leaf(Tensor::new(vec![n_e, 1], target)?);
            let diff = tape.sub(exp.short_term[t], target)?;
            let sq = tape.mul(diff, diff)?;
            let sum = tape.sum(sq);
            s_exp_term = Some(match s_exp_term {
                Some(acc) => tape.add(acc, sum)?,
                None => sum,
            });
        }
        let s_exp_term = tape.scale(
            s_exp_term.expect("t0 >= 1"),
            (1.0 - lambda_o) / n_e as f64,
        );

        // balance term with the plan as a constant; gradients flow through
        // the ground-cost matrix only
        let balance_term = if lambda_b > 0.0 {
            let plan = ctx.ipm_plan.as_ref().ok_or(TrainError::Data(
                "balance term requested without a transport plan".into(),
            ))?;
            let z = obs.representation;
            let zz = tape.mul(z, z)?;
            let q_norms = tape.row_sums(zz)?;
            let row_sums = plan.row_sums();
            let col_sums = plan.col_sums();
            let rc: Vec<f64> = row_sums
                .iter()
                .zip(&col_sums)
                .map(|(r, c)| r + c)
                .collect();
            let rc = tape.leaf(Tensor::from_vec(rc));
            let marg = tape.mul(q_norms, rc)?;
            let term1 = tape.sum(marg);
            let gram = tape.matmul_nt(z, z)?;
            let plan_leaf = tape.leaf(plan.gamma.clone());
            let cross = tape.mul(plan_leaf, gram)?;
            let cross_sum = tape.sum(cross);
            let term2 = tape.scale(cross_sum, -2.0);
            let mut a_const = 0.0;
            for i in 0..b {
                for j in 0..b {
                    let d = ctx.permuted_a[i] - inputs.obs_a[j];
                    a_const += plan.gamma.get2(i, j) * d * d;
                }
            }
            let a_leaf = tape.leaf_scalar(a_const);
            let t12 = tape.add(term1, term2)?;
            let value = tape.add(t12, a_leaf)?;
            Some(tape.scale(value, lambda_b))
        } else {
            None
        };

        let mut total = tape.add(y_term, s_obs_term)?;
        total = tape.add(total, s_exp_term)?;
        if let Some(bt) = balance_term {
            total = tape.add(total, bt)?;
        }

        let check = |name: &'static str, v: f64| -> Result<f64, TrainError> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TrainError::NonFiniteTerm(name))
            }
        };
        Ok(LossBreakdown {
            long_term_value: check("long-term", tape.value(y_term).item())?,
            short_obs_value: check("short-term observational", tape.value(s_obs_term).item())?,
            short_exp_value: check("short-term experimental", tape.value(s_exp_term).item())?,
            balance_value: check(
                "balance",
                balance_term.map_or(0.0, |bt| tape.value(bt).item()),
            )?,
            total,
        })
    }
}

// ---- manifests ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub code_version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub optimizer: String,
    pub weight_convention: String,
    pub validation_metric: String,
    pub pretrain_seconds: f64,
    pub train_seconds: f64,
    pub epochs: Vec<EpochStats>,
    pub early_stopped_at: Option<usize>,
    pub final_metrics: Option<serde_json::Value>,
    pub checkpoint_path: Option<String>,
    pub complete: bool,
}

/// FNV-1a content hash, hex encoded; stable across platforms.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

// ---- training --------------------------------------------------------------------

pub struct TrainOutcome {
    pub model: LearnModel,
    pub manifest: RunManifest,
}

struct EvalSplit {
    x: Tensor<f64>,
    a: Vec<f64>,
    s: Tensor<f64>,
    curves: Option<Vec<Vec<f64>>>,
    grid: Option<TreatmentGrid>,
}

/// Indices of an evenly spaced sub-grid of `full` hitting both endpoints.
fn subsample_grid(full: usize, target: usize) -> Vec<usize> {
    if target >= full {
        return (0..full).collect();
    }
    (0..target)
        .map(|i| (i as f64 / (target - 1) as f64 * (full - 1) as f64).round() as usize)
        .collect()
}

/// Train a fresh model on pre-split data. `val_oracle`, when present, enables
/// the integrated-squared-error early-stopping metric; otherwise factual
/// short/long-term error substitutes (recorded in the manifest).
pub fn train(
    obs_train: &Dataset,
    obs_val: &Dataset,
    val_oracle: Option<&OracleData>,
    exp: &Dataset,
    dims: &ModelDims,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<TrainOutcome, TrainError> {
    if obs_train.is_empty() || exp.is_empty() {
        return Err(TrainError::Data("empty training or experimental set".into()));
    }
    if obs_train.covariate_dim != dims.covariate_dim || obs_train.horizon != dims.horizon {
        return Err(TrainError::Data(format!(
            "dataset dims ({}, {}) disagree with model dims ({}, {})",
            obs_train.covariate_dim, obs_train.horizon, dims.covariate_dim, dims.horizon
        )));
    }

    let mut model = LearnModel::init(dims, cfg.seed);
    let mut adam = AdamState::for_params(&model.params);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };

    // independent streams so code-path changes in one consumer cannot shift
    // the draws of another
    let mut shuffle_rng = StdRng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut perm_rng = StdRng::seed_from_u64(cfg.seed ^ 0x1405_7b7e_f767_814f);

    let exp_x = exp.covariate_matrix();
    let exp_a = exp.treatments();
    let exp_s = exp.short_term_matrix();

    let obs_x = obs_train.covariate_matrix();
    let obs_a = obs_train.treatments();
    let obs_s = obs_train.short_term_matrix();
    let obs_y: Vec<f64> = obs_train
        .units
        .iter()
        .map(|u| u.long_term.ok_or(TrainError::Data("missing outcome".into())))
        .collect::<Result<_, _>>()?;

    let val = build_eval_split(obs_val, val_oracle, cfg)?;
    let validation_metric = if val.curves.is_some() {
        "mise"
    } else {
        "factual_mse"
    };

    let lambda_b = match variant {
        Variant::None => 0.0,
        Variant::Ipm | Variant::Full => cfg.lambda_b,
    };
    let learned_weights = variant == Variant::Full && !cfg.force_uniform_ot_weights;

    let config_json = serde_json::json!({
        "dims": dims,
        "train": cfg,
        "variant": variant,
    });
    let mut manifest = RunManifest {
        schema_version: 1,
        variant: variant.to_string(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: content_hash(config_json.to_string().as_bytes()),
        config: config_json,
        optimizer: "adam (decoupled weight decay)".to_string(),
        weight_convention:
            "mirror-descent weights sum to 1 per batch and are rescaled by b inside the loss"
                .to_string(),
        validation_metric: validation_metric.to_string(),
        pretrain_seconds: 0.0,
        train_seconds: 0.0,
        epochs: Vec::new(),
        early_stopped_at: None,
        final_metrics: None,
        checkpoint_path: None,
        complete: false,
    };

    let b = cfg.batch_size.min(obs_train.len()).max(2);
    let md_cfg = MirrorDescentConfig {
        entropy_strength: cfg.lambda_e,
        step_size: cfg.ot_step_size,
        iterations: cfg.ot_iterations.max(1),
        track_objective: false,
    };
    let betas = CostBetas {
        embedding: cfg.beta_embedding,
        covariate: cfg.beta_covariate,
        treatment: cfg.beta_treatment,
    };

    let mut indices: Vec<usize> = (0..obs_train.len()).collect();
    let mut best: Option<(f64, ParamSet<f64>, usize)> = None;
    let mut stale = 0usize;

    let pre_start = Instant::now();
    for phase in ["pretrain", "train"] {
        let epochs = if phase == "pretrain" {
            cfg.pretrain_epochs
        } else {
            cfg.train_epochs
        };
        let phase_start = Instant::now();
        for epoch in 0..epochs {
            indices.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in indices.chunks(b) {
                if chunk.len() < 2 {
                    continue;
                }
                let bx = gather_rows(&obs_x, chunk);
                let ba: Vec<f64> = chunk.iter().map(|&i| obs_a[i]).collect();
                let bs = gather_rows(&obs_s, chunk);
                let by: Vec<f64> = chunk.iter().map(|&i| obs_y[i]).collect();

                let mut tape = Tape::new();
                let vars = model.params.register_on(&mut tape);
                let obs_fwd = model.forward_taped(&mut tape, &vars, &bx, &ba)?;
                let exp_fwd = model.forward_taped(&mut tape, &vars, &exp_x, &exp_a)?;

                // constants of the step: weights, permutation, plan; the
                // embeddings feeding them are read off the tape, detached
                let permuted_a = permute_treatments(&ba, &mut perm_rng)?;
                let weights = if learned_weights && phase == "train" {
                    let cost = build_cost_matrix(
                        &CostFeatures {
                            embeddings: tape.value(obs_fwd.mean_embedding),
                            covariates: &bx,
                            treatments: &ba,
                        },
                        &CostFeatures {
                            embeddings: tape.value(exp_fwd.mean_embedding),
                            covariates: &exp_x,
                            treatments: &exp_a,
                        },
                        &betas,
                    )?;
                    mirror_descent_weights(&cost, &md_cfg)?.weights
                } else {
                    vec![1.0 / chunk.len() as f64; chunk.len()]
                };

                let ipm_plan = if lambda_b > 0.0 {
                    let z = tape.value(obs_fwd.representation).clone();
                    let product_side = JointSamples::uniform(z.clone(), permuted_a.clone())?;
                    let joint_side = JointSamples::weighted(z, ba.clone(), weights.clone())?;
                    let out = ipm_wasserstein(
                        &product_side,
                        &joint_side,
                        cfg.ipm_epsilon,
                        cfg.ipm_iterations,
                    )?;
                    Some(out.plan)
                } else {
                    None
                };

                let ctx = LossContext {
                    weights,
                    permuted_a,
                    ipm_plan,
                };
                let inputs = LossInputs {
                    obs_x: &bx,
                    obs_a: &ba,
                    obs_s: &bs,
                    obs_y: &by,
                    exp_x: &exp_x,
                    exp_a: &exp_a,
                    exp_s: &exp_s,
                };
                let loss = model.assemble_loss(
                    &mut tape, &obs_fwd, &exp_fwd, &inputs, &ctx, cfg.lambda_o, lambda_b,
                )?;
                let loss_value = tape.value(loss.total).item();
                if !loss_value.is_finite() || loss_value > 1e8 {
                    manifest.complete = false;
                    return Err(TrainError::Diverged {
                        epoch,
                        loss: loss_value,
                        manifest: Box::new(manifest),
                    });
                }
                epoch_loss += loss_value;
                batches += 1;

                tape.backward(loss.total)?;
                let grads: Vec<Option<Tensor<f64>>> = vars
                    .iter()
                    .map(|&v| tape.grad(v).cloned())
                    .collect();
                adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
            }
            let train_loss = epoch_loss / batches.max(1) as f64;

            let val_metric = if phase == "train" {
                let m = evaluate_split(&model, &val)?;
                // early stopping with best-parameter restore
                let improved = best.as_ref().is_none_or(|(bm, _, _)| m < *bm);
                if improved {
                    best = Some((m, model.params.clone(), epoch));
                    stale = 0;
                } else {
                    stale += 1;
                }
                Some(m)
            } else {
                None
            };
            manifest.epochs.push(EpochStats {
                phase: phase.to_string(),
                epoch,
                train_loss,
                val_metric,
            });
            if phase == "train" && stale >= cfg.patience {
                manifest.early_stopped_at = Some(epoch);
                break;
            }
        }
        if phase == "pretrain" {
            manifest.pretrain_seconds = phase_start.elapsed().as_secs_f64();
        } else {
            manifest.train_seconds = phase_start.elapsed().as_secs_f64();
        }
    }
    let _total = pre_start.elapsed();

    if let Some((_, best_params, _)) = best {
        model.params = best_params;
    }
    manifest.complete = true;
    Ok(TrainOutcome { model, manifest })
}

fn gather_rows(m: &Tensor<f64>, indices: &[usize]) -> Tensor<f64> {
    let cols = m.cols();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        data.extend_from_slice(m.row(i));
    }
    Tensor::new(vec![indices.len(), cols], data).expect("consistent")
}

fn build_eval_split(
    obs_val: &Dataset,
    oracle: Option<&OracleData>,
    cfg: &TrainConfig,
) -> Result<EvalSplit, TrainError> {
    let cap = if cfg.val_max_units == 0 {
        obs_val.len()
    } else {
        cfg.val_max_units.min(obs_val.len())
    };
    let keep: Vec<usize> = (0..cap).collect();
    let val = obs_val.subset(&keep);
    let (curves, grid) = match oracle {
        Some(or) => {
            if or.units.len() != obs_val.len() {
                return Err(TrainError::Data(
                    "validation oracle misaligned with validation split".into(),
                ));
            }
            let sub = subsample_grid(or.grid.len(), cfg.val_grid_points);
            let grid = TreatmentGrid::new(
                or.grid[sub[0]],
                or.grid[*sub.last().expect("nonempty")],
                sub.len(),
            )?;
            let curves: Vec<Vec<f64>> = keep
                .iter()
                .map(|&i| sub.iter().map(|&k| or.units[i].long_term_curve[k]).collect())
                .collect();
            (Some(curves), Some(grid))
        }
        None => (None, None),
    };
    Ok(EvalSplit {
        x: val.covariate_matrix(),
        a: val.treatments(),
        s: val.short_term_matrix(),
        curves,
        grid,
    })
}

fn evaluate_split(model: &LearnModel, split: &EvalSplit) -> Result<f64, TrainError> {
    match (&split.curves, &split.grid) {
        (Some(curves), Some(grid)) => {
            let pred = model.predict_hdrc(&split.x, &grid.values())?;
            Ok(mise(&pred, curves, grid)?)
        }
        _ => {
            // factual short-term error as a fallback metric
            let out = model.forward(&split.x, &split.a)?;
            let mut total = 0.0;
            for i in 0..split.a.len() {
                for t in 0..split.s.cols() {
                    let d = out.short_term.get2(i, t) - split.s.get2(i, t);
                    total += d * d;
                }
            }
            Ok(total / split.a.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split_indices, SyntheticConfig};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            covariate_dim: 6,
            rep_dim: 4,
            phi_hidden: 5,
            gru_hidden: 3,
            head_hidden: 4,
            attn_dim: 3,
            horizon: 3,
        }
    }

    fn tiny_data(seed: u64) -> (Dataset, Dataset, OracleData) {
        let out = gen_synthetic(&SyntheticConfig {
            n_obs: 24,
            n_exp: 10,
            covariate_dim: 6,
            unobserved_dim: 3,
            horizon: 3,
            long_horizon: 6,
            oracle_grid_points: 9,
            seed,
            ..Default::default()
        })
        .unwrap();
        (out.obs, out.exp, out.obs_oracle)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            pretrain_epochs: 2,
            train_epochs: 3,
            ot_iterations: 10,
            ipm_iterations: 10,
            val_grid_points: 5,
            val_max_units: 0,
            patience: 10,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let dims = tiny_dims();
        let mut model = LearnModel::init(&dims, 1);
        for (_, t) in model.params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::zeros(&[4, 6]);
        let a = vec![0.2, 0.4, 0.6, 0.8];
        let out = model.forward(&x, &a).unwrap();
        assert!(out.long_term.iter().all(|&v| v == 0.0));
        assert!(out.short_term.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn curve_is_continuous_under_spline_modulation() {
        // first-order bound: |yhat(a+h) - yhat(a)| <= ||d yhat/d theta|| *
        // ||theta(a+h) - theta(a)|| with safety factor; the coefficient jump
        // is bounded in closed form by the basis derivative bounds
        let dims = tiny_dims();
        let model = LearnModel::init(&dims, 3);
        let x = Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.4]).unwrap();
        let grid: Vec<f64> = (0..65).map(|i| i as f64 / 64.0).collect();
        let curve = model.predict_hdrc(&x, &grid).unwrap()[0].clone();

        // numeric bound on d yhat / d a via the chain rule through the basis:
        // max over grid of |d yhat/d theta| * sup |theta'|
        let bounds = crate::nn::basis_derivative_bounds();
        let mut coeff_lip = 0.0;
        for (name, t) in model.params.iter() {
            // treatment-modulated parameters are stacked in 5 row blocks
            if name.starts_with("phi/") || t.rows() % crate::nn::BASIS_LEN != 0 {
                continue;
            }
            let block = t.numel() / crate::nn::BASIS_LEN;
            for (l, bound) in bounds.iter().enumerate() {
                let slice = &t.data()[l * block..(l + 1) * block];
                let norm: f64 = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
                coeff_lip += norm * bound;
            }
        }
        // gradient norm of yhat w.r.t. all parameters, maximized over a few
        // grid anchors, standing in for |d yhat / d theta|
        let mut grad_norm: f64 = 0.0;
        for &a in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut tape = Tape::new();
            let vars = model.params.register_on(&mut tape);
            let fwd = model.forward_taped(&mut tape, &vars, &x, &[a]).unwrap();
            let loss = tape.sum(fwd.long_term);
            tape.backward(loss).unwrap();
            let norm: f64 = vars
                .iter()
                .filter_map(|&v| tape.grad(v))
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            grad_norm = grad_norm.max(norm);
        }
        let lip = 2.0 * grad_norm * coeff_lip + 1e-9;
        let h = 1.0 / 64.0;
        for pair in curve.windows(2) {
            assert!(
                (pair[1] - pair[0]).abs() <= lip * h,
                "jump {} vs bound {}",
                (pair[1] - pair[0]).abs(),
                lip * h
            );
        }
    }

    #[test]
    fn long_term_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let mut model = LearnModel::init(&dims, 5);
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap();
        let a = vec![0.3, 0.7];

        let eval = |model: &LearnModel| -> f64 {
            let out = model.forward(&x, &a).unwrap();
            out.long_term.iter().sum()
        };
        let mut tape = Tape::new();
        let vars = model.params.register_on(&mut tape);
        let fwd = model.forward_taped(&mut tape, &vars, &x, &a).unwrap();
        let loss = tape.sum(fwd.long_term);
        tape.backward(loss).unwrap();

        // phi parameters specifically (the representation path)
        let h = 1e-5;
        for pid in 0..4 {
            let id = crate::params::ParamId(pid);
            let numel = model.params.get(id).numel();
            for ci in (0..numel).step_by(3) {
                let orig = model.params.get(id).data()[ci];
                model.params.get_mut(id).data_mut()[ci] = orig + h;
                let plus = eval(&model);
                model.params.get_mut(id).data_mut()[ci] = orig - h;
                let minus = eval(&model);
                model.params.get_mut(id).data_mut()[ci] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = tape.grad(vars[pid]).map_or(0.0, |g| g.data()[ci]);
                let tol = 1e-3 * fd.abs().max(an.abs()) + 1e-6;
                assert!((an - fd).abs() <= tol, "param {pid}[{ci}]: {an} vs {fd}");
            }
        }
    }

    fn batch_inputs<'a>(
        obs: &'a (Tensor<f64>, Vec<f64>, Tensor<f64>, Vec<f64>),
        exp: &'a (Tensor<f64>, Vec<f64>, Tensor<f64>),
    ) -> LossInputs<'a> {
        LossInputs {
            obs_x: &obs.0,
            obs_a: &obs.1,
            obs_s: &obs.2,
            obs_y: &obs.3,
            exp_x: &exp.0,
            exp_a: &exp.1,
            exp_s: &exp.2,
        }
    }

    fn tensorize(d: &Dataset) -> (Tensor<f64>, Vec<f64>, Tensor<f64>, Vec<f64>) {
        (
            d.covariate_matrix(),
            d.treatments(),
            d.short_term_matrix(),
            d.units
                .iter()
                .map(|u| u.long_term.unwrap_or(0.0))
                .collect(),
        )
    }

    #[test]
    fn perfect_predictions_and_no_balance_give_zero_loss() {
        let dims = tiny_dims();
        let model = LearnModel::init(&dims, 11);
        let (obs, exp, _) = tiny_data(2);
        let mut obs_t = tensorize(&obs.subset(&[0, 1, 2, 3]));
        let exp_t = {
            let t = tensorize(&exp.subset(&[0, 1, 2]));
            (t.0, t.1, t.2)
        };
        // set the targets to the model's own outputs
        let out = model.forward(&obs_t.0, &obs_t.1).unwrap();
        obs_t.2 = out.short_term.clone();
        obs_t.3 = out.long_term.clone();
        let exp_out = model.forward(&exp_t.0, &exp_t.1).unwrap();
        let exp_t = (exp_t.0, exp_t.1, exp_out.short_term);

        let mut tape = Tape::new();
        let vars = model.params.register_on(&mut tape);
        let ctx = LossContext {
            weights: vec![0.25; 4],
            permuted_a: obs_t.1.clone(),
            ipm_plan: None,
        };
        let inputs = batch_inputs(&obs_t, &exp_t);
        let loss = model
            .loss_on_tape(&mut tape, &vars, &inputs, &ctx, 0.5, 0.0)
            .unwrap();
        assert!(tape.value(loss.total).item().abs() < 1e-18);
    }

    #[test]
    fn uniform_weights_reduce_to_unweighted_risk() {
        let dims = tiny_dims();
        let model = LearnModel::init(&dims, 13);
        let (obs, exp, _) = tiny_data(3);
        let obs_t = tensorize(&obs.subset(&(0..6).collect::<Vec<_>>()));
        let exp_full = tensorize(&exp.subset(&(0..5).collect::<Vec<_>>()));
        let exp_t = (exp_full.0, exp_full.1, exp_full.2);

        let mut tape = Tape::new();
        let vars = model.params.register_on(&mut tape);
        let ctx = LossContext {
            weights: vec![1.0 / 6.0; 6],
            permuted_a: obs_t.1.clone(),
            ipm_plan: None,
        };
        let lambda_o = 0.5;
        let inputs = batch_inputs(&obs_t, &exp_t);
        let loss = model
            .loss_on_tape(&mut tape, &vars, &inputs, &ctx, lambda_o, 0.0)
            .unwrap();

        // independent unweighted computation
        let out = model.forward(&obs_t.0, &obs_t.1).unwrap();
        let exp_out = model.forward(&exp_t.0, &exp_t.1).unwrap();
        let mut expect = 0.0;
        for i in 0..6 {
            let d = out.long_term[i] - obs_t.3[i];
            expect += d * d / 6.0;
            for t in 0..dims.horizon {
                let d = out.short_term.get2(i, t) - obs_t.2.get2(i, t);
                expect += lambda_o * d * d / 6.0;
            }
        }
        for i in 0..5 {
            for t in 0..dims.horizon {
                let d = exp_out.short_term.get2(i, t) - exp_t.2.get2(i, t);
                expect += (1.0 - lambda_o) * d * d / 5.0;
            }
        }
        let got = tape.value(loss.total).item();
        assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn weighted_terms_are_linear_in_weights() {
        let dims = tiny_dims();
        let model = LearnModel::init(&dims, 17);
        let (obs, exp, _) = tiny_data(4);
        let obs_t = tensorize(&obs.subset(&[0, 1, 2, 3]));
        let exp_full = tensorize(&exp.subset(&[0, 1, 2]));
        let exp_t = (exp_full.0, exp_full.1, exp_full.2);
        let w: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4];
        let doubled: Vec<f64> = w.iter().map(|v| v * 2.0).collect();

        let run = |weights: Vec<f64>| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let vars = model.params.register_on(&mut tape);
            let ctx = LossContext {
                weights,
                permuted_a: obs_t.1.clone(),
                ipm_plan: None,
            };
            let inputs = batch_inputs(&obs_t, &exp_t);
            let loss = model
                .loss_on_tape(&mut tape, &vars, &inputs, &ctx, 0.5, 0.0)
                .unwrap();
            (loss.long_term_value, loss.short_obs_value, loss.short_exp_value)
        };
        let (y1, s1, e1) = run(w);
        let (y2, s2, e2) = run(doubled);
        assert!((y2 - 2.0 * y1).abs() < 1e-12 * y1.abs().max(1.0));
        assert!((s2 - 2.0 * s1).abs() < 1e-12 * s1.abs().max(1.0));
        assert_eq!(e1, e2);
    }

    #[test]
    fn variant_none_equals_ipm_with_zero_strength() {
        let (obs, exp, oracle) = tiny_data(5);
        let (tr, va, _) = split_indices(obs.len(), 7);
        let train_set = obs.subset(&tr);
        let val_set = obs.subset(&va);
        let val_oracle = oracle.subset(&va);
        let dims = tiny_dims();
        let cfg = tiny_cfg();

        let run_none = train(
            &train_set,
            &val_set,
            Some(&val_oracle),
            &exp,
            &dims,
            &cfg,
            Variant::None,
        )
        .unwrap();
        let cfg_zero = TrainConfig {
            lambda_b: 0.0,
            ..cfg
        };
        let run_ipm = train(
            &train_set,
            &val_set,
            Some(&val_oracle),
            &exp,
            &dims,
            &cfg_zero,
            Variant::Ipm,
        )
        .unwrap();
        for ((_, a), (_, b)) in run_none.model.params.iter().zip(run_ipm.model.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn forced_uniform_full_equals_ipm() {
        let (obs, exp, oracle) = tiny_data(6);
        let (tr, va, _) = split_indices(obs.len(), 7);
        let train_set = obs.subset(&tr);
        let val_set = obs.subset(&va);
        let val_oracle = oracle.subset(&va);
        let dims = tiny_dims();
        let cfg = tiny_cfg();

        let run_ipm = train(
            &train_set,
            &val_set,
            Some(&val_oracle),
            &exp,
            &dims,
            &cfg,
            Variant::Ipm,
        )
        .unwrap();
        let forced = TrainConfig {
            force_uniform_ot_weights: true,
            ..cfg
        };
        let run_full = train(
            &train_set,
            &val_set,
            Some(&val_oracle),
            &exp,
            &dims,
            &forced,
            Variant::Full,
        )
        .unwrap();
        for ((_, a), (_, b)) in run_ipm.model.params.iter().zip(run_full.model.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_train_epochs_returns_pretrained_model() {
        let (obs, exp, oracle) = tiny_data(8);
        let (tr, va, _) = split_indices(obs.len(), 7);
        let dims = tiny_dims();
        let base = TrainConfig {
            train_epochs: 0,
            ..tiny_cfg()
        };
        // phase-2-only settings must not matter when train_epochs = 0
        let altered = TrainConfig {
            ot_iterations: 44,
            ..base.clone()
        };
        let a = train(
            &obs.subset(&tr),
            &obs.subset(&va),
            Some(&oracle.subset(&va)),
            &exp,
            &dims,
            &base,
            Variant::Full,
        )
        .unwrap();
        let b = train(
            &obs.subset(&tr),
            &obs.subset(&va),
            Some(&oracle.subset(&va)),
            &exp,
            &dims,
            &altered,
            Variant::Full,
        )
        .unwrap();
        for ((_, x), (_, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn constant_coefficient_model_has_flat_curve() {
        // zeroing every basis block beyond the constant one makes theta(a)
        // independent of a, so the dose-response curve must be flat
        let dims = tiny_dims();
        let mut model = LearnModel::init(&dims, 19);
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("phi/") || t.rows() % crate::nn::BASIS_LEN != 0 {
                continue;
            }
            let block = t.numel() / crate::nn::BASIS_LEN;
            for v in &mut t.data_mut()[block..] {
                *v = 0.0;
            }
        }
        let x = Tensor::new(vec![1, 6], vec![0.4, -0.1, 0.7, 0.2, -0.3, 0.9]).unwrap();
        let grid: Vec<f64> = (0..17).map(|i| i as f64 / 16.0).collect();
        let curve = &model.predict_hdrc(&x, &grid).unwrap()[0];
        for v in curve {
            assert!((v - curve[0]).abs() < 1e-12, "curve not flat: {curve:?}");
        }
    }

    #[test]
    fn curves_equal_pointwise_forward_and_are_reproducible() {
        let dims = tiny_dims();
        let model = LearnModel::init(&dims, 23);
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| 0.05 * i as f64).collect()).unwrap();
        let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let curves = model.predict_hdrc(&x, &grid).unwrap();
        for (k, &a) in grid.iter().enumerate() {
            let out = model.forward(&x, &vec![a; 2]).unwrap();
            for i in 0..2 {
                assert_eq!(curves[i][k].to_bits(), out.long_term[i].to_bits());
            }
        }
        let again = model.predict_hdrc(&x, &grid).unwrap();
        for (c1, c2) in curves.iter().zip(&again) {
            for (a, b) in c1.iter().zip(c2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn manifest_records_config_and_epochs() {
        let (obs, exp, oracle) = tiny_data(9);
        let (tr, va, _) = split_indices(obs.len(), 7);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let out = train(
            &obs.subset(&tr),
            &obs.subset(&va),
            Some(&oracle.subset(&va)),
            &exp,
            &dims,
            &cfg,
            Variant::Full,
        )
        .unwrap();
        let m = &out.manifest;
        assert!(m.complete);
        assert_eq!(m.schema_version, 1);
        assert_eq!(m.variant, "full");
        assert_eq!(m.validation_metric, "mise");
        assert_eq!(
            m.epochs.len(),
            cfg.pretrain_epochs + cfg.train_epochs
        );
        assert_eq!(m.config_hash.len(), 16);
        let round: RunManifest =
            serde_json::from_str(&serde_json::to_string(m).unwrap()).unwrap();
        assert_eq!(round.config_hash, m.config_hash);
    }
}
