//! Balanced-representation machinery: a differentiable transport distance
//! between the permuted product distribution P(Z)P(A) and the weighted joint
//! P(Z, A).
//!
//! The distance is the entropic transport cost on squared-Euclidean ground
//! cost over concatenated `(z, a)` vectors. Gradients follow the envelope
//! convention: the plan is recomputed at the current iterate and then treated
//! as a constant, so derivatives flow only through the ground-cost matrix.

use crate::ot::{sinkhorn, OtError, TransportPlan};
use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("batch of {0} is too small to permute (need >= 2)")]
    BatchTooSmall(usize),
    #[error("sample weights invalid: {0}")]
    WeightsInvalid(String),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Weighted empirical joint over `(z, a)` pairs.
#[derive(Debug, Clone)]
pub struct JointSamples<F: Scalar = f64> {
    pub features: Tensor<F>,
    pub treatments: Vec<F>,
    pub weights: Vec<F>,
}

impl<F: Scalar> JointSamples<F> {
    pub fn uniform(features: Tensor<F>, treatments: Vec<F>) -> Result<Self, BalanceError> {
        let n = treatments.len();
        let w = vec![F::one() / F::from_f64_const(n as f64); n];
        Self::weighted(features, treatments, w)
    }

    pub fn weighted(
        features: Tensor<F>,
        treatments: Vec<F>,
        weights: Vec<F>,
    ) -> Result<Self, BalanceError> {
        let n = treatments.len();
        if features.rows() != n || weights.len() != n {
            return Err(BalanceError::WeightsInvalid(format!(
                "rows {} / treatments {} / weights {} disagree",
                features.rows(),
                n,
                weights.len()
            )));
        }
        let total: F = weights.iter().copied().sum();
        if (total - F::one()).abs() > F::from_f64_const(1e-6) {
            return Err(BalanceError::WeightsInvalid(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(JointSamples {
            features,
            treatments,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }
}

/// Uniform random permutation of the treatment vector; feature order is left
/// untouched by the caller. The permuted batch stands in for P(Z)P(A).
pub fn permute_treatments<F: Scalar>(
    treatments: &[F],
    rng: &mut impl Rng,
) -> Result<Vec<F>, BalanceError> {
    if treatments.len() < 2 {
        return Err(BalanceError::BatchTooSmall(treatments.len()));
    }
    let mut out = treatments.to_vec();
    out.shuffle(rng);
    Ok(out)
}

/// Squared-Euclidean ground cost over concatenated `(z, a)` vectors.
pub fn ground_cost<F: Scalar>(
    a: &JointSamples<F>,
    b: &JointSamples<F>,
) -> Result<Tensor<F>, BalanceError> {
    if a.features.cols() != b.features.cols() {
        return Err(ShapeError::Incompatible {
            op: "ground_cost",
            left: a.features.shape().to_vec(),
            right: b.features.shape().to_vec(),
        }
        .into());
    }
    let (m, n) = (a.len(), b.len());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let zi = a.features.row(i);
        for j in 0..n {
            let zj = b.features.row(j);
            let mut d = crate::tensor::sq_dist(zi, zj);
            let da = a.treatments[i] - b.treatments[j];
            d += da * da;
            data.push(d);
        }
    }
    Ok(Tensor::new(vec![m, n], data)?)
}

#[derive(Debug, Clone)]
pub struct IpmOutput<F: Scalar = f64> {
    /// Transport cost of the entropic plan on the ground cost.
    pub value: F,
    pub plan: TransportPlan<F>,
    pub cost: Tensor<F>,
    pub converged: bool,
}

/// Entropic transport distance between two weighted `(z, a)` samples.
/// `epsilon` is relative to the mean ground-cost entry.
pub fn ipm_wasserstein<F: Scalar>(
    a: &JointSamples<F>,
    b: &JointSamples<F>,
    epsilon: F,
    max_iters: usize,
) -> Result<IpmOutput<F>, BalanceError> {
    if a.is_empty() || b.is_empty() {
        return Err(BalanceError::WeightsInvalid("empty sample".into()));
    }
    let cost = ground_cost(a, b)?;
    let res = sinkhorn(
        &cost,
        &a.weights,
        &b.weights,
        epsilon,
        max_iters,
        F::from_f64_const(1e-12),
    )?;
    Ok(IpmOutput {
        value: res.cost,
        plan: res.plan,
        cost,
        converged: res.converged,
    })
}

impl<F: Scalar> IpmOutput<F> {
    /// Envelope gradient of the value with respect to the first side's
    /// features, holding the plan constant:
    /// `d/dz_i = sum_j gamma_ij * 2 (z_i - z'_j)`.
    pub fn grad_first_features(
        &self,
        a: &JointSamples<F>,
        b: &JointSamples<F>,
    ) -> Result<Tensor<F>, BalanceError> {
        let (m, d) = (a.len(), a.features.cols());
        let two = F::from_f64_const(2.0);
        let mut grad = Tensor::zeros(&[m, d]);
        for i in 0..m {
            for j in 0..b.len() {
                let g = self.plan.gamma.get2(i, j);
                if g == F::zero() {
                    continue;
                }
                for k in 0..d {
                    let cur = grad.get2(i, k);
                    grad.set2(
                        i,
                        k,
                        cur + g * two * (a.features.get2(i, k) - b.features.get2(j, k)),
                    );
                }
            }
        }
        Ok(grad)
    }
}
