//! Neural building blocks: MLPs, a bidirectional GRU, attention pooling, and
//! the varying-coefficient parameterization that makes every treated block's
//! parameters a spline function of the treatment.
//!
//! A varying-coefficient layer stores its five per-basis coefficient tensors
//! stacked along the input axis: the effective output `sum_l phi_l(a_i) (x_i
//! W_l + b_l)` is then a single matrix product against the basis-expanded
//! input `[phi_1 x | ... | phi_5 x]` plus `Phi B` for the bias stack, which
//! keeps the batched forward pass in a few large matmuls. The effective
//! parameters `theta(a) = sum_l alpha_l phi_l(a)` of any single treatment can
//! still be materialized by row slicing.

use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

/// Number of spline basis functions.
pub const BASIS_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("treatment value is NaN")]
    NanTreatment,
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

// ---- spline basis ---------------------------------------------------------

/// Degree-2 truncated power basis on `[0, 1]` with knots `{1/3, 2/3}`:
/// `(1, a, a^2, (a - 1/3)_+^2, (a - 2/3)_+^2)`.
pub fn spline_basis<F: Scalar>(a: F) -> Result<[F; BASIS_LEN], NnError> {
    if a.is_nan() {
        return Err(NnError::NanTreatment);
    }
    let a = clamp_unit(a);
    let k1 = F::from_f64_const(1.0 / 3.0);
    let k2 = F::from_f64_const(2.0 / 3.0);
    let t1 = (a - k1).max(F::zero());
    let t2 = (a - k2).max(F::zero());
    Ok([F::one(), a, a * a, t1 * t1, t2 * t2])
}

fn clamp_unit<F: Scalar>(a: F) -> F {
    if a < F::zero() || a > F::one() {
        warn_out_of_range();
        a.max(F::zero()).min(F::one())
    } else {
        a
    }
}

fn warn_out_of_range() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        eprintln!("warning: treatment outside [0, 1]; clamping for spline evaluation");
    });
}

/// Upper bounds of `|phi_l'|` on `[0, 1]`, used for Lipschitz estimates of
/// varying-coefficient outputs.
pub fn basis_derivative_bounds() -> [f64; BASIS_LEN] {
    [0.0, 1.0, 2.0, 4.0 / 3.0, 2.0 / 3.0]
}

/// Basis values for a batch of treatments as an `[n, 5]` matrix.
pub fn basis_matrix<F: Scalar>(treatments: &[F]) -> Result<Tensor<F>, NnError> {
    let mut data = Vec::with_capacity(treatments.len() * BASIS_LEN);
    for &a in treatments {
        data.extend_from_slice(&spline_basis(a)?);
    }
    Ok(Tensor::new(vec![treatments.len(), BASIS_LEN], data).expect("consistent shape"))
}

/// Per-batch basis constants on a tape: the `[n, 5]` matrix plus its columns.
#[derive(Clone, Copy)]
pub struct BasisVars {
    pub matrix: Var,
    pub cols: [Var; BASIS_LEN],
}

impl BasisVars {
    pub fn for_treatments<F: Scalar>(
        tape: &mut Tape<F>,
        treatments: &[F],
    ) -> Result<Self, NnError> {
        let m = basis_matrix(treatments)?;
        let matrix = tape.leaf(m);
        let mut cols = [matrix; BASIS_LEN];
        for (l, c) in cols.iter_mut().enumerate() {
            *c = tape.col(matrix, l)?;
        }
        Ok(BasisVars { matrix, cols })
    }
}

/// Basis-expanded input `[phi_1 . x | phi_2 . x | ... | phi_5 . x]`, shape
/// `[n, 5 d]`; shared by every varying-coefficient layer consuming `x`.
pub fn vc_expand<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    basis: &BasisVars,
) -> Result<Var, NnError> {
    Ok(tape.basis_expand(x, basis.matrix)?)
}

// ---- plain and varying-coefficient linear layers --------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: params.add_uniform(format!("{name}/weight"), &[in_dim, out_dim], in_dim, rng),
            b: params.add_uniform(format!("{name}/bias"), &[out_dim], in_dim, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
    ) -> Result<Var, NnError> {
        let xw = tape.matmul(x, vars[self.w.0])?;
        Ok(tape.add(xw, vars[self.b.0])?)
    }
}

/// Linear layer whose weight and bias are spline functions of the treatment.
/// Stored stacked: `weight: [5 in, out]` (per-basis blocks along the rows),
/// `bias: [5, out]`.
#[derive(Debug, Clone)]
pub struct VcLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl VcLinear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        VcLinear {
            w: params.add_uniform(
                format!("{name}/weight"),
                &[BASIS_LEN * in_dim, out_dim],
                in_dim,
                rng,
            ),
            b: params.add_uniform(format!("{name}/bias"), &[BASIS_LEN, out_dim], in_dim, rng),
            in_dim,
            out_dim,
        }
    }

    /// Forward from a pre-expanded input (see [`vc_expand`]).
    pub fn forward_expanded<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x_expanded: Var,
        basis: &BasisVars,
    ) -> Result<Var, NnError> {
        let xw = tape.matmul(x_expanded, vars[self.w.0])?;
        let bias = tape.matmul(basis.matrix, vars[self.b.0])?;
        Ok(tape.add(xw, bias)?)
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        basis: &BasisVars,
    ) -> Result<Var, NnError> {
        let expanded = vc_expand(tape, x, basis)?;
        self.forward_expanded(tape, vars, expanded, basis)
    }

    /// Materialize the effective `(weight, bias)` at a single treatment:
    /// `theta(a) = sum_l phi_l(a) alpha_l`, differentiable in the
    /// coefficients. The bias comes back as a `[1, out]` row.
    pub fn effective_params<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        a: F,
    ) -> Result<(Var, Var), NnError> {
        let basis = spline_basis(a)?;
        let mut weight: Option<Var> = None;
        let mut bias: Option<Var> = None;
        for (l, &phi) in basis.iter().enumerate() {
            let wl = tape.slice_rows(vars[self.w.0], l * self.in_dim, self.in_dim)?;
            let wl = tape.scale(wl, phi);
            weight = Some(match weight {
                Some(acc) => tape.add(acc, wl)?,
                None => wl,
            });
            let bl = tape.slice_rows(vars[self.b.0], l, 1)?;
            let bl = tape.scale(bl, phi);
            bias = Some(match bias {
                Some(acc) => tape.add(acc, bl)?,
                None => bl,
            });
        }
        Ok((weight.expect("basis nonempty"), bias.expect("basis nonempty")))
    }
}

// ---- MLP blocks ------------------------------------------------------------

/// Two fully connected layers with ELU activation after the hidden layer.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub l1: Linear,
    pub l2: Linear,
}

impl MlpBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MlpBlock {
            l1: Linear::new(params, &format!("{name}/layer0"), in_dim, hidden, rng),
            l2: Linear::new(params, &format!("{name}/layer1"), hidden, out_dim, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
    ) -> Result<Var, NnError> {
        let h = self.l1.forward(tape, vars, x)?;
        let h = tape.elu(h);
        self.l2.forward(tape, vars, h)
    }
}

/// Treatment-modulated MLP.
#[derive(Debug, Clone)]
pub struct VcMlpBlock {
    pub l1: VcLinear,
    pub l2: VcLinear,
}

impl VcMlpBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        VcMlpBlock {
            l1: VcLinear::new(params, &format!("{name}/layer0"), in_dim, hidden, rng),
            l2: VcLinear::new(params, &format!("{name}/layer1"), hidden, out_dim, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        basis: &BasisVars,
    ) -> Result<Var, NnError> {
        let h = self.l1.forward(tape, vars, x, basis)?;
        let h = tape.elu(h);
        self.l2.forward(tape, vars, h, basis)
    }
}

// ---- GRU -------------------------------------------------------------------

/// Single-direction GRU cell with treatment-modulated parameters.
/// Gates use the sigmoid, the candidate state uses tanh. The three gates'
/// input-side parameters are fused into one `in -> 3H` varying-coefficient
/// linear (update | reset | candidate column blocks); the hidden-side
/// parameters fuse update and reset, with the candidate kept apart because it
/// consumes the reset-masked state.
#[derive(Debug, Clone)]
pub struct VcGruCell {
    x_gates: VcLinear,
    h_update_reset: ParamId,
    h_candidate: ParamId,
    pub hidden: usize,
}

impl VcGruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        VcGruCell {
            x_gates: VcLinear::new(params, &format!("{name}/gates/x"), in_dim, 3 * hidden, rng),
            h_update_reset: params.add_uniform(
                format!("{name}/gates/h"),
                &[BASIS_LEN * hidden, 2 * hidden],
                hidden,
                rng,
            ),
            h_candidate: params.add_uniform(
                format!("{name}/candidate/h"),
                &[BASIS_LEN * hidden, hidden],
                hidden,
                rng,
            ),
            hidden,
        }
    }

    /// One recurrence step. `x_expanded` is the basis-expanded step input,
    /// shared across the three gates (and across directions).
    pub fn step_expanded<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x_expanded: Var,
        h: Var,
        basis: &BasisVars,
    ) -> Result<Var, NnError> {
        let hd = self.hidden;
        let x_pre = self
            .x_gates
            .forward_expanded(tape, vars, x_expanded, basis)?;
        let h_expanded = vc_expand(tape, h, basis)?;
        let h_pre = tape.matmul(h_expanded, vars[self.h_update_reset.0])?;

        let xz = tape.slice_cols(x_pre, 0, hd)?;
        let hz = tape.slice_cols(h_pre, 0, hd)?;
        let z_pre = tape.add(xz, hz)?;
        let z = tape.sigmoid(z_pre);

        let xr = tape.slice_cols(x_pre, hd, hd)?;
        let hr = tape.slice_cols(h_pre, hd, hd)?;
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);

        let rh = tape.mul(r, h)?;
        let rh_expanded = vc_expand(tape, rh, basis)?;
        let hn = tape.matmul(rh_expanded, vars[self.h_candidate.0])?;
        let xn = tape.slice_cols(x_pre, 2 * hd, hd)?;
        let n_pre = tape.add(xn, hn)?;
        let n = tape.tanh(n_pre);

        // h' = (1 - z) * n + z * h
        let zn = tape.mul(z, n)?;
        let zh = tape.mul(z, h)?;
        let d = tape.sub(n, zn)?;
        Ok(tape.add(d, zh)?)
    }

    pub fn step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        h: Var,
        basis: &BasisVars,
    ) -> Result<Var, NnError> {
        let x_expanded = vc_expand(tape, x, basis)?;
        self.step_expanded(tape, vars, x_expanded, h, basis)
    }
}

/// Bidirectional GRU: per step the outputs of the forward and backward
/// directions are concatenated, so the output width is `2 * hidden`.
#[derive(Debug, Clone)]
pub struct BiGruBlock {
    pub fwd: VcGruCell,
    pub bwd: VcGruCell,
    pub hidden: usize,
}

impl BiGruBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        BiGruBlock {
            fwd: VcGruCell::new(params, &format!("{name}/fwd"), in_dim, hidden, rng),
            bwd: VcGruCell::new(params, &format!("{name}/bwd"), in_dim, hidden, rng),
            hidden,
        }
    }

    /// `inputs` is one `[n, d]` tensor per timestep; the output has the same
    /// length with `[n, 2H]` entries.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        inputs: &[Var],
        basis: &BasisVars,
    ) -> Result<Vec<Var>, NnError> {
        if inputs.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let n = tape.value(inputs[0]).rows();
        let h0 = tape.leaf(Tensor::zeros(&[n, self.hidden]));
        let expanded: Vec<Var> = inputs
            .iter()
            .map(|&x| vc_expand(tape, x, basis))
            .collect::<Result<_, _>>()?;

        let mut fwd_states = Vec::with_capacity(inputs.len());
        let mut h = h0;
        for &x in &expanded {
            h = self.fwd.step_expanded(tape, vars, x, h, basis)?;
            fwd_states.push(h);
        }
        let mut bwd_states = vec![h0; inputs.len()];
        let mut h = h0;
        for (t, &x) in expanded.iter().enumerate().rev() {
            h = self.bwd.step_expanded(tape, vars, x, h, basis)?;
            bwd_states[t] = h;
        }
        let mut out = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            out.push(tape.concat_cols(&[fwd_states[t], bwd_states[t]])?);
        }
        Ok(out)
    }
}

// ---- attention -------------------------------------------------------------

/// Attention pooling over a sequence of step representations. Scores are
/// `tanh(W R_t + b)^T V` normalized with a softmax over timesteps; `W`, `b`
/// and `V` are all treatment-modulated.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub score: VcLinear,
    pub v: VcLinear,
}

impl AttentionBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        attn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionBlock {
            score: VcLinear::new(params, &format!("{name}/score"), in_dim, attn_dim, rng),
            v: VcLinear::new(params, &format!("{name}/context"), attn_dim, 1, rng),
        }
    }

    /// Returns `(pooled, weights)` where `pooled = sum_t alpha_t R_t` and
    /// `weights` is `[n, t0]` with rows on the probability simplex.
    pub fn pool<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        seq: &[Var],
        basis: &BasisVars,
    ) -> Result<(Var, Var), NnError> {
        if seq.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let mut scores = Vec::with_capacity(seq.len());
        for &r in seq {
            // tanh applies after the varying-coefficient sum
            let pre = self.score.forward(tape, vars, r, basis)?;
            let tilde = tape.tanh(pre);
            scores.push(self.v.forward(tape, vars, tilde, basis)?);
        }
        let score_mat = tape.concat_cols(&scores)?;
        let alpha = tape.softmax(score_mat, 1)?;
        let mut pooled: Option<Var> = None;
        for (t, &r) in seq.iter().enumerate() {
            let at = tape.col(alpha, t)?;
            let term = tape.mul_rows(r, at)?;
            pooled = Some(match pooled {
                Some(p) => tape.add(p, term)?,
                None => term,
            });
        }
        Ok((pooled.expect("nonempty"), alpha))
    }
}
