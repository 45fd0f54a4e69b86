use rand::Rng;

use super::{glorot, small_uniform, Activation, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Two stacked linear layers sharing one element-wise activation:
/// `x1 = h(x W_t^T + b_t)`, `x2 = h(x1 W_t1^T + b_t1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    /// `hidden x in`
    pub w_t: Matrix<T>,
    pub b_t: Vec<T>,
    /// `out x hidden`
    pub w_t1: Matrix<T>,
    pub b_t1: Vec<T>,
    pub activation: Activation,
}

/// Activations kept by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub x: Matrix<T>,
    pub z1: Matrix<T>,
    pub x1: Matrix<T>,
    pub z2: Matrix<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn new(w_t: Matrix<T>, b_t: Vec<T>, w_t1: Matrix<T>, b_t1: Vec<T>, activation: Activation) -> Result<Self> {
        let p = Self { w_t, b_t, w_t1, b_t1, activation };
        p.check()?;
        Ok(p)
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            w_t: glorot(hidden, input, rng),
            b_t: small_uniform(hidden, 0.1, rng),
            w_t1: glorot(output, hidden, rng),
            b_t1: small_uniform(output, 0.1, rng),
            activation,
        }
    }

    fn check(&self) -> Result<()> {
        if self.b_t.len() != self.w_t.rows() {
            return Err(Error::shape("mlp b_t", self.w_t.rows(), self.b_t.len()));
        }
        if self.w_t1.cols() != self.w_t.rows() {
            return Err(Error::shape("mlp w_t1 cols", self.w_t.rows(), self.w_t1.cols()));
        }
        if self.b_t1.len() != self.w_t1.rows() {
            return Err(Error::shape("mlp b_t1", self.w_t1.rows(), self.b_t1.len()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w_t.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_t.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_t1.rows()
    }

    /// Forward pass over a `batch x in` input.
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        self.check()?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp_forward input", self.input_dim(), x.cols()));
        }
        let h = self.activation;
        let mut z1 = x.matmul_t(&self.w_t)?;
        z1.add_row(&self.b_t)?;
        let x1 = z1.map(|v| h.apply(v));
        let mut z2 = x1.matmul_t(&self.w_t1)?;
        z2.add_row(&self.b_t1)?;
        let out = z2.map(|v| h.apply(v));
        Ok((out, MlpCache { x: x.clone(), z1, x1, z2 }))
    }

    /// Gradients of all parameters and of the input given `upstream = dL/dx2`.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: &Matrix<T>) -> Result<(Self, Matrix<T>)> {
        if upstream.shape() != cache.z2.shape() {
            return Err(Error::shape(
                "mlp_backward upstream",
                format!("{:?}", cache.z2.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let h = self.activation;
        let dz2 = upstream.hadamard(&cache.z2.map(|v| h.derivative(v)))?;
        let dw_t1 = dz2.t_matmul(&cache.x1)?;
        let db_t1 = dz2.sum_rows();
        let dx1 = dz2.matmul(&self.w_t1)?;
        let dz1 = dx1.hadamard(&cache.z1.map(|v| h.derivative(v)))?;
        let dw_t = dz1.t_matmul(&cache.x)?;
        let db_t = dz1.sum_rows();
        let dx = dz1.matmul(&self.w_t)?;
        let grads = Self { w_t: dw_t, b_t: db_t, w_t1: dw_t1, b_t1: db_t1, activation: h };
        Ok((grads, dx))
    }
}

impl<T: Scalar> ParamSet<T> for MlpParams<T> {
    fn buffers(&self) -> Vec<&[T]> {
        vec![self.w_t.data(), &self.b_t, self.w_t1.data(), &self.b_t1]
    }

    fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.w_t.data_mut(), &mut self.b_t, self.w_t1.data_mut(), &mut self.b_t1]
    }
}

/// `mlp_forward` as a free function.
pub fn mlp_forward<T: Scalar>(params: &MlpParams<T>, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
    params.forward(x)
}

/// `mlp_backward` as a free function.
pub fn mlp_backward<T: Scalar>(
    params: &MlpParams<T>,
    cache: &MlpCache<T>,
    upstream: &Matrix<T>,
) -> Result<(MlpParams<T>, Matrix<T>)> {
    params.backward(cache, upstream)
}
