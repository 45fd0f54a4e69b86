//! The two permutation-friendly blocks (two-layer MLP and multi-head
//! attention) with hand-derived backward passes, plus a small sequential
//! model with per-example gradients.
//!
//! Gradients are stored in the same structs as the parameters they belong
//! to, so anything that permutes weights can permute gradients too.

pub mod attention;
pub mod mlp;
pub mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use attention::{AttentionCache, AttentionParams, HeadParams};
pub use mlp::{MlpCache, MlpParams};
pub use model::{
    clip, per_sample_gradients, Block, BlockConfig, Label, Loss, Model, ModelConfig, PerSampleGrads, Sample,
};

/// Element-wise activation. Only truly element-wise maps are offered, since
/// those are the ones that commute with a permutation of hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Uniform access to every parameter buffer of a block or model.
pub trait ParamSet<T: Scalar>: Clone {
    fn buffers(&self) -> Vec<&[T]>;
    fn buffers_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    fn norm_sq(&self) -> T {
        self.buffers().iter().flat_map(|b| b.iter()).map(|&x| x * x).sum()
    }

    fn l2_norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    fn scale(&mut self, a: T) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|x| *x *= a);
        }
    }

    /// `self += a * x`; shapes must match.
    fn axpy(&mut self, a: T, x: &Self) {
        let src = x.buffers();
        let mut dst = self.buffers_mut();
        assert_eq!(src.len(), dst.len(), "axpy on mismatched parameter sets");
        for (d, s) in dst.iter_mut().zip(src) {
            assert_eq!(d.len(), s.len(), "axpy on mismatched buffers");
            for (y, &v) in d.iter_mut().zip(s) {
                *y += a * v;
            }
        }
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for b in z.buffers_mut() {
            b.fill(T::zero());
        }
        z
    }

    fn flatten(&self) -> Vec<T> {
        self.buffers().concat()
    }

    fn set_from_flat(&mut self, flat: &[T]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("set_from_flat", n, flat.len()));
        }
        let mut offset = 0;
        for b in self.buffers_mut() {
            let len = b.len();
            b.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn l2_distance(&self, other: &Self) -> T {
        self.buffers()
            .iter()
            .zip(other.buffers())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt()
    }
}

/// Glorot-uniform matrix.
pub(crate) fn glorot<T: Scalar, R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> crate::tensor::Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    crate::tensor::Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-a..a)))
}

pub(crate) fn small_uniform<T: Scalar, R: rand::Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.random_range(-scale..scale))).collect()
}
