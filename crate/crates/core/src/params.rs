//! Named parameter container shared by blocks, the optimizer and checkpoints.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Index of a parameter within a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors. Names are hierarchical
/// (e.g. `"phi/layer0/weight"`) and must be unique.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Add a matrix initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64_const(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a leaf on `tape`, in declaration order.
    /// The returned vector is indexed by `ParamId`.
    pub fn register_on(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Overwrite tensors from `(name, tensor)` pairs; unknown names error.
    pub fn assign(&mut self, values: &[(String, Tensor<F>)]) -> Result<(), String> {
        for (name, tensor) in values {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} incompatible with checkpoint {:?}",
                    self.tensors[idx].shape(),
                    tensor.shape()
                ));
            }
            self.tensors[idx] = tensor.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn init_is_bounded_by_fan_in() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add_uniform("w", &[16, 16], 16, &mut rng);
        let bound = 0.25;
        assert!(ps.get(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn registration_order_matches_param_ids() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.add("a", Tensor::from_vec(vec![1.0]));
        let b = ps.add("b", Tensor::from_vec(vec![2.0]));
        let mut tape = Tape::new();
        let vars = ps.register_on(&mut tape);
        assert_eq!(tape.value(vars[a.0]).data(), &[1.0]);
        assert_eq!(tape.value(vars[b.0]).data(), &[2.0]);
    }
}
