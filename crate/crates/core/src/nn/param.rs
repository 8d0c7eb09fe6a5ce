use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::graph::{Gradients, Graph};
use crate::nn::tensor::{Scalar, Tensor};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Ordered registry of named, trainable tensors.
///
/// Registration order is stable and defines the on-disk order in
/// checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Adds the gradients a backward pass produced for parameter leaves.
    pub fn accumulate(&mut self, graph: &Graph<'_, F>, grads: &Gradients<F>) {
        for (id, var) in graph.param_leaves() {
            if let Some(g) = grads.get(var) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Adds detached `(parameter, gradient)` pairs, e.g. from
    /// [`Graph::param_gradients`](crate::nn::Graph::param_gradients).
    pub fn add_grads(&mut self, grads: Vec<(ParamId, Tensor<F>)>) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(
                    "add_grads",
                    format!(
                        "gradient {:?} for `{}` of shape {:?}",
                        g.shape(),
                        p.name,
                        p.grad.shape()
                    ),
                ));
            }
            p.grad.add_assign(&g);
        }
        Ok(())
    }

    /// Largest absolute gradient entry, NaN if any entry is NaN.
    pub fn max_abs_grad(&self) -> f64 {
        let mut m = 0.0f64;
        for p in &self.params {
            for &v in p.grad.data() {
                let a = v.as_f64().abs();
                if a.is_nan() {
                    return f64::NAN;
                }
                m = m.max(a);
            }
        }
        m
    }

    /// Replaces every value with the one stored under the same name in
    /// `other`, checking shapes.
    pub fn load_values(&mut self, other: &[(String, Tensor<F>)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let Some(&id) = self.by_name.get(name) else {
                return Err(Error::Data(format!("unknown parameter `{name}`")));
            };
            let p = &mut self.params[id];
            if p.value.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "shape mismatch for parameter `{name}`: model has {:?}, file has {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Same names and values in another precision; gradients reset.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.register("a.w", Tensor::zeros(&[3])).is_err());
        assert_eq!(s.num_elements(), 2);
    }

    #[test]
    fn grad_shape_tracks_value_shape() {
        let mut s = ParamStore::<f64>::new();
        let id = s.register("w", Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(s.grad(id).shape(), s.value(id).shape());
    }
}
