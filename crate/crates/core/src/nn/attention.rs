use rand::Rng;

use super::{glorot, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Matrix};

/// Query, key and value projections of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `d_m x d_k`
    pub w_q: Matrix<T>,
    /// `d_m x d_k`
    pub w_k: Matrix<T>,
    /// `d_m x d_v`
    pub w_v: Matrix<T>,
}

/// Multi-head self-attention without residuals or normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// `h * d_v x d_m`
    pub w_o: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Attention weights after softmax.
    pub p: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub x: Matrix<T>,
    pub heads: Vec<HeadCache<T>>,
    /// `[A_1, ..., A_h]`
    pub concat: Matrix<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(heads: Vec<HeadParams<T>>, w_o: Matrix<T>) -> Result<Self> {
        let p = Self { heads, w_o };
        p.check()?;
        Ok(p)
    }

    pub fn init<R: Rng>(d_m: usize, heads: usize, d_k: usize, d_v: usize, rng: &mut R) -> Self {
        let heads = (0..heads)
            .map(|_| HeadParams { w_q: glorot(d_m, d_k, rng), w_k: glorot(d_m, d_k, rng), w_v: glorot(d_m, d_v, rng) })
            .collect::<Vec<_>>();
        let w_o = glorot(heads.len() * d_v, d_m, rng);
        Self { heads, w_o }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.cols()
    }

    pub fn d_v(&self) -> usize {
        self.heads[0].w_v.cols()
    }

    fn check(&self) -> Result<()> {
        let Some(first) = self.heads.first() else {
            return Err(Error::shape("attention heads", "at least 1", 0));
        };
        let (d_m, d_k) = first.w_q.shape();
        let d_v = first.w_v.cols();
        for h in &self.heads {
            if h.w_q.shape() != (d_m, d_k) || h.w_k.shape() != (d_m, d_k) {
                return Err(Error::shape("attention w_q/w_k", format!("{d_m}x{d_k}"), format!("{:?}", h.w_k.shape())));
            }
            if h.w_v.shape() != (d_m, d_v) {
                return Err(Error::shape("attention w_v", format!("{d_m}x{d_v}"), format!("{:?}", h.w_v.shape())));
            }
        }
        let want = (self.heads.len() * d_v, d_m);
        if self.w_o.shape() != want {
            return Err(Error::shape("attention w_o", format!("{want:?}"), format!("{:?}", self.w_o.shape())));
        }
        Ok(())
    }

    /// Forward pass over a `seq x d_m` input.
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, AttentionCache<T>)> {
        self.check()?;
        if x.cols() != self.d_model() {
            return Err(Error::shape("attention_forward input", self.d_model(), x.cols()));
        }
        let inv_sqrt = T::one() / T::lit(self.d_k() as f64).sqrt();
        let mut caches = Vec::with_capacity(self.heads.len());
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = x.matmul(&h.w_q)?;
            let k = x.matmul(&h.w_k)?;
            let v = x.matmul(&h.w_v)?;
            let mut s = q.matmul_t(&k)?;
            s.scale(inv_sqrt);
            let p = softmax_rows(&s);
            outs.push(p.matmul(&v)?);
            caches.push(HeadCache { q, k, v, p });
        }
        let concat = Matrix::hstack(&outs)?;
        let out = concat.matmul(&self.w_o)?;
        Ok((out, AttentionCache { x: x.clone(), heads: caches, concat }))
    }

    /// Gradients of all parameters and of the input given `upstream = dL/dX_next`.
    pub fn backward(&self, cache: &AttentionCache<T>, upstream: &Matrix<T>) -> Result<(Self, Matrix<T>)> {
        let want = (cache.x.rows(), self.w_o.cols());
        if upstream.shape() != want {
            return Err(Error::shape(
                "attention_backward upstream",
                format!("{want:?}"),
                format!("{:?}", upstream.shape()),
            ));
        }
        let x = &cache.x;
        let d_v = self.d_v();
        let inv_sqrt = T::one() / T::lit(self.d_k() as f64).sqrt();
        let d_w_o = cache.concat.t_matmul(upstream)?;
        let d_concat = upstream.matmul_t(&self.w_o)?;
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        let mut heads = Vec::with_capacity(self.heads.len());
        for (i, (h, hc)) in self.heads.iter().zip(&cache.heads).enumerate() {
            let d_a = d_concat.col_block(i * d_v, d_v);
            let d_p = d_a.matmul_t(&hc.v)?;
            let d_v_mat = hc.p.t_matmul(&d_a)?;
            // softmax Jacobian, row by row
            let mut d_s = Matrix::zeros(d_p.rows(), d_p.cols());
            for r in 0..d_p.rows() {
                let p_row = hc.p.row(r);
                let g_row = d_p.row(r);
                let inner: T = p_row.iter().zip(g_row).map(|(&p, &g)| p * g).sum();
                for ((o, &p), &g) in d_s.row_mut(r).iter_mut().zip(p_row).zip(g_row) {
                    *o = p * (g - inner) * inv_sqrt;
                }
            }
            let d_q = d_s.matmul(&hc.k)?;
            let d_k = d_s.t_matmul(&hc.q)?;
            let grads = HeadParams { w_q: x.t_matmul(&d_q)?, w_k: x.t_matmul(&d_k)?, w_v: x.t_matmul(&d_v_mat)? };
            for part in [d_q.matmul_t(&h.w_q)?, d_k.matmul_t(&h.w_k)?, d_v_mat.matmul_t(&h.w_v)?] {
                for (o, &v) in dx.data_mut().iter_mut().zip(part.data()) {
                    *o += v;
                }
            }
            heads.push(grads);
        }
        Ok((Self { heads, w_o: d_w_o }, dx))
    }
}

impl<T: Scalar> ParamSet<T> for AttentionParams<T> {
    fn buffers(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(3 * self.heads.len() + 1);
        for h in &self.heads {
            out.extend([h.w_q.data(), h.w_k.data(), h.w_v.data()]);
        }
        out.push(self.w_o.data());
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(3 * self.heads.len() + 1);
        for h in &mut self.heads {
            out.push(h.w_q.data_mut());
            out.push(h.w_k.data_mut());
            out.push(h.w_v.data_mut());
        }
        out.push(self.w_o.data_mut());
        out
    }
}

pub fn attention_forward<T: Scalar>(
    params: &AttentionParams<T>,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    params.forward(x)
}

pub fn attention_backward<T: Scalar>(
    params: &AttentionParams<T>,
    cache: &AttentionCache<T>,
    upstream: &Matrix<T>,
) -> Result<(AttentionParams<T>, Matrix<T>)> {
    params.backward(cache, upstream)
}
