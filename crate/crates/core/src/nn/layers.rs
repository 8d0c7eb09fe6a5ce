//! Parameterised building blocks. Layers only hold [`ParamId`]s; values live
//! in the [`ParamStore`] so one layer definition serves both precisions.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::init::Init;
use crate::nn::kernels::ConvGeometry;
use crate::nn::param::{ParamId, ParamStore};
use crate::nn::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            init.fan_in_uniform(&[d_out, d_in], d_in, 1.0),
        )?;
        let bias = store.register(
            format!("{name}.bias"),
            init.uniform(&[d_out], 1.0 / (d_in as f64).sqrt()),
        )?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[dim], F::one()))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta, dim })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub geom: ConvGeometry,
}

impl Conv3d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        geom: ConvGeometry,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let weight = store.register(
            format!("{name}.weight"),
            init.fan_in_uniform(
                &[c_out, c_in, kernel[0], kernel[1], kernel[2]],
                fan_in,
                std::f64::consts::SQRT_2,
            ),
        )?;
        let bias = store.register(
            format!("{name}.bias"),
            init.uniform(&[c_out], 1.0 / (fan_in as f64).sqrt()),
        )?;
        Ok(Conv3d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            geom,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv3d(x, w, b, self.geom)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel.iter().product::<usize>() + self.c_out
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim)?,
            output: Linear::new(store, init, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// `q: [b, nq, d]`, `k`/`v`: `[b, nk, d]` -> `[b, nq, d]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, q: Var, k: Var, v: Var) -> Result<Var> {
        let qp = self.query.forward(g, q)?;
        let kp = self.key.forward(g, k)?;
        let vp = self.value.forward(g, v)?;
        let heads = g.attention(qp, kp, vp, self.heads)?;
        self.output.forward(g, heads)
    }

    pub fn dim(&self) -> usize {
        self.query.d_in
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params()
            + self.key.num_params()
            + self.value.num_params()
            + self.output.num_params()
    }
}
