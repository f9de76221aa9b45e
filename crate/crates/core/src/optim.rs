//! Adam optimizer with decoupled weight decay.
//!
//! Weight decay is applied directly to the parameters rather than folded into
//! the gradients; run manifests record this convention so results can be
//! reproduced exactly.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{name}` at flat index {index}")]
    NonFiniteGrad { name: String, index: usize },
    #[error("gradient shape {grad:?} does not match parameter `{name}` shape {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<F: Scalar = f64> {
    pub learning_rate: F,
    pub weight_decay: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        AdamConfig {
            learning_rate: F::from_f64_const(1e-3),
            weight_decay: F::from_f64_const(5e-4),
            beta1: F::from_f64_const(0.9),
            beta2: F::from_f64_const(0.999),
            epsilon: F::from_f64_const(1e-8),
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar = f64> {
    pub step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn for_params(params: &ParamSet<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One optimizer step. `grads` is parallel to the parameter order; `None`
/// entries (parameters unreachable from the loss) are skipped entirely,
/// including weight decay, so unused blocks stay untouched.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig<F>,
) -> Result<(), OptimError> {
    assert_eq!(grads.len(), params.len(), "gradient slice length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bias1 = F::one() - cfg.beta1.powi(t);
    let bias2 = F::one() - cfg.beta2.powi(t);
    let one = F::one();

    for (idx, (name, param)) in params.iter_mut().enumerate() {
        let Some(grad) = &grads[idx] else {
            continue;
        };
        if grad.shape() != param.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.to_string(),
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        if let Some(bad) = grad.data().iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGrad {
                name: name.to_string(),
                index: bad,
            });
        }
        let m = state.first[idx].data_mut();
        let v = state.second[idx].data_mut();
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            // decoupled decay first, then the Adam update
            *p = *p - cfg.learning_rate * cfg.weight_decay * *p;
            *mi = cfg.beta1 * *mi + (one - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (one - cfg.beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::from_vec(vec![v]));
        ps
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut ps = single_param(1.5);
        let mut state = AdamState::for_params(&ps);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let grads = vec![Some(Tensor::from_vec(vec![0.0]))];
        adam_step(&mut ps, &grads, &mut state, &cfg).unwrap();
        assert_eq!(ps.get(crate::params::ParamId(0)).data()[0], 1.5);
    }

    #[test]
    fn first_step_on_quadratic_moves_by_learning_rate() {
        // f(x) = x^2 at x0 = 1: grad = 2, first Adam step is -lr * g / |g|
        let mut ps = single_param(1.0);
        let mut state = AdamState::for_params(&ps);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let grads = vec![Some(Tensor::from_vec(vec![2.0]))];
        adam_step(&mut ps, &grads, &mut state, &cfg).unwrap();
        let x = ps.get(crate::params::ParamId(0)).data()[0];
        assert!((x - 0.9).abs() < 1e-6, "expected ~0.9, got {x}");
    }

    #[test]
    fn nan_gradient_is_rejected_with_parameter_name() {
        let mut ps = single_param(1.0);
        let mut state = AdamState::for_params(&ps);
        let cfg = AdamConfig::default();
        let grads = vec![Some(Tensor::from_vec(vec![f64::NAN]))];
        let err = adam_step(&mut ps, &grads, &mut state, &cfg).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }

    #[test]
    fn same_seed_is_bit_identical_after_ten_steps() {
        let run = || {
            let mut ps = single_param(1.0);
            let mut state = AdamState::for_params(&ps);
            let cfg = AdamConfig::default();
            for k in 0..10 {
                let x = ps.get(crate::params::ParamId(0)).data()[0];
                let g = 2.0 * x + (k as f64) * 0.01;
                adam_step(
                    &mut ps,
                    &[Some(Tensor::from_vec(vec![g]))],
                    &mut state,
                    &cfg,
                )
                .unwrap();
            }
            ps.get(crate::params::ParamId(0)).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
