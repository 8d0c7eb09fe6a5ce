use crate::error::{Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::tensor::{Scalar, Tensor};

/// SGD with classical momentum: `v <- mu*v + g; p <- p - lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub learning_rate: f64,
    pub momentum: f64,
    buffers: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "invalid optimiser settings lr={learning_rate} momentum={momentum}"
            )));
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            buffers: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        })
    }

    pub fn buffers(&self) -> &[Tensor<F>] {
        &self.buffers
    }

    /// Restores momentum buffers, e.g. from a checkpoint.
    pub fn set_buffers(&mut self, buffers: Vec<Tensor<F>>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers
                .iter()
                .zip(&self.buffers)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Data(
                "optimiser buffers do not match the model".into(),
            ));
        }
        self.buffers = buffers;
        Ok(())
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; call [`ParamStore::zero_grad`] separately.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if self.buffers.len() != store.len() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} buffers for {} parameters",
                    self.buffers.len(),
                    store.len()
                ),
            ));
        }
        let lr = F::from_f64(self.learning_rate);
        let mu = F::from_f64(self.momentum);
        for (p, buf) in store.iter_mut().zip(&mut self.buffers) {
            if p.value.shape() != p.grad.shape() || buf.shape() != p.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("shape drift on parameter `{}`", p.name),
                ));
            }
            for ((v, b), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(buf.data_mut())
                .zip(p.grad.data())
            {
                *b = mu * *b + g;
                *v = *v - lr * *b;
            }
        }
        Ok(())
    }
}
