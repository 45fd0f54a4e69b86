use std::borrow::Borrow;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Activation, AttentionParams, MlpParams, ParamSet};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::stats::log_sum_exp;
use crate::tensor::Matrix;

const WEIGHTS_MAGIC: &[u8; 8] = b"SHDPW001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockConfig {
    Mlp {
        hidden: usize,
        output: usize,
        #[serde(default)]
        activation: Activation,
    },
    Attention {
        heads: usize,
        d_k: usize,
        d_v: usize,
    },
}

/// Architecture description, read from JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub blocks: Vec<BlockConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        for b in &self.blocks {
            let ok = match *b {
                BlockConfig::Mlp { hidden, output, .. } => hidden > 0 && output > 0,
                BlockConfig::Attention { heads, d_k, d_v } => heads > 0 && d_k > 0 && d_v > 0,
            };
            if !ok {
                return Err(Error::Config(format!("block dimensions must be positive: {b:?}")));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.iter().fold(self.input_dim, |d, b| match *b {
            BlockConfig::Mlp { output, .. } => output,
            BlockConfig::Attention { .. } => d,
        })
    }

    /// Randomly initialised model drawn from the init stream of `seed`.
    pub fn build<T: Scalar>(&self) -> Result<Model<T>> {
        self.validate()?;
        let mut rng = stream(self.seed, Stream::Init);
        let mut dim = self.input_dim;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            match *b {
                BlockConfig::Mlp { hidden, output, activation } => {
                    blocks.push(Block::Mlp(MlpParams::init(dim, hidden, output, activation, &mut rng)));
                    dim = output;
                }
                BlockConfig::Attention { heads, d_k, d_v } => {
                    blocks.push(Block::Attention(AttentionParams::init(dim, heads, d_k, d_v, &mut rng)));
                }
            }
        }
        Ok(Model { blocks })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    Mlp(MlpParams<T>),
    Attention(AttentionParams<T>),
}

#[derive(Debug, Clone)]
enum BlockCache<T> {
    Mlp(super::MlpCache<T>),
    Attention(super::AttentionCache<T>),
}

impl<T: Scalar> Block<T> {
    fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, BlockCache<T>)> {
        match self {
            Block::Mlp(p) => p.forward(x).map(|(o, c)| (o, BlockCache::Mlp(c))),
            Block::Attention(p) => p.forward(x).map(|(o, c)| (o, BlockCache::Attention(c))),
        }
    }

    fn backward(&self, cache: &BlockCache<T>, upstream: &Matrix<T>) -> Result<(Self, Matrix<T>)> {
        match (self, cache) {
            (Block::Mlp(p), BlockCache::Mlp(c)) => p.backward(c, upstream).map(|(g, dx)| (Block::Mlp(g), dx)),
            (Block::Attention(p), BlockCache::Attention(c)) => {
                p.backward(c, upstream).map(|(g, dx)| (Block::Attention(g), dx))
            }
            _ => unreachable!("cache kind always matches its block"),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Block::Mlp(_) => "mlp",
            Block::Attention(_) => "attention",
        }
    }

    fn tensors(&self) -> Vec<(usize, usize, &[T])> {
        match self {
            Block::Mlp(p) => vec![
                (p.w_t.rows(), p.w_t.cols(), p.w_t.data()),
                (1, p.b_t.len(), &p.b_t),
                (p.w_t1.rows(), p.w_t1.cols(), p.w_t1.data()),
                (1, p.b_t1.len(), &p.b_t1),
            ],
            Block::Attention(p) => {
                let mut v = Vec::new();
                for h in &p.heads {
                    for m in [&h.w_q, &h.w_k, &h.w_v] {
                        v.push((m.rows(), m.cols(), m.data()));
                    }
                }
                v.push((p.w_o.rows(), p.w_o.cols(), p.w_o.data()));
                v
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for Block<T> {
    fn buffers(&self) -> Vec<&[T]> {
        match self {
            Block::Mlp(p) => p.buffers(),
            Block::Attention(p) => p.buffers(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Block::Mlp(p) => p.buffers_mut(),
            Block::Attention(p) => p.buffers_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    SoftmaxCrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Label<T> {
    Class(usize),
    Target(Vec<T>),
}

/// One example: a `seq x input_dim` matrix (a single row for plain MLPs).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub x: Matrix<T>,
    pub label: Label<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn class(features: Vec<T>, class: usize) -> Self {
        Self { x: Matrix::row_vector(features), label: Label::Class(class) }
    }
}

impl Loss {
    /// Loss value and its gradient with respect to the logits.
    pub fn evaluate<T: Scalar>(self, logits: &[T], label: &Label<T>) -> Result<(T, Vec<T>)> {
        let n = logits.len();
        match (self, label) {
            (Loss::SoftmaxCrossEntropy, Label::Class(k)) => {
                if *k >= n {
                    return Err(Error::shape("cross-entropy label", format!("< {n}"), k));
                }
                let lse = log_sum_exp(logits);
                let grad = logits.iter().enumerate().map(|(i, &z)| (z - lse).exp() - if i == *k { T::one() } else { T::zero() }).collect();
                Ok((lse - logits[*k], grad))
            }
            (Loss::SoftmaxCrossEntropy, Label::Target(_)) => {
                Err(Error::Config("cross-entropy needs class labels".into()))
            }
            (Loss::SquaredError, label) => {
                let target = match label {
                    Label::Target(t) => t.clone(),
                    Label::Class(k) => {
                        if *k >= n {
                            return Err(Error::shape("squared-error label", format!("< {n}"), k));
                        }
                        (0..n).map(|i| if i == *k { T::one() } else { T::zero() }).collect()
                    }
                };
                if target.len() != n {
                    return Err(Error::shape("squared-error target", n, target.len()));
                }
                let grad: Vec<T> = logits.iter().zip(&target).map(|(&z, &t)| z - t).collect();
                let value = grad.iter().map(|&g| g * g).sum::<T>() * T::lit(0.5);
                Ok((value, grad))
            }
        }
    }
}

/// Blocks applied in sequence, followed by a mean over sequence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(blocks: Vec<Block<T>>) -> Self {
        Self { blocks }
    }

    /// Per-position outputs of the last block.
    pub fn forward_seq(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?.0;
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        let out = self.forward_seq(x)?;
        Ok(mean_rows(&out))
    }

    pub fn predict_class(&self, x: &Matrix<T>) -> Result<usize> {
        let z = self.logits(x)?;
        Ok(z.iter().enumerate().fold(0, |best, (i, &v)| if v > z[best] { i } else { best }))
    }

    pub fn loss(&self, sample: &Sample<T>, loss: Loss) -> Result<T> {
        loss.evaluate(&self.logits(&sample.x)?, &sample.label).map(|(v, _)| v)
    }

    /// Loss and parameter gradient for one example.
    pub fn gradient(&self, sample: &Sample<T>, loss: Loss) -> Result<(T, Self)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = sample.x.clone();
        for b in &self.blocks {
            let (out, cache) = b.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        let (value, d_logits) = loss.evaluate(&mean_rows(&h), &sample.label)?;
        let inv = T::one() / T::lit(h.rows() as f64);
        let mut upstream = Matrix::from_fn(h.rows(), h.cols(), |_, c| d_logits[c] * inv);
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (b, cache) in self.blocks.iter().zip(&caches).rev() {
            let (g, dx) = b.backward(cache, &upstream)?;
            grads.push(g);
            upstream = dx;
        }
        grads.reverse();
        Ok((value, Self { blocks: grads }))
    }

    pub fn mean_loss<S: Borrow<Sample<T>>>(&self, data: &[S], loss: Loss) -> Result<T> {
        let mut total = T::zero();
        for s in data {
            total += self.loss(s.borrow(), loss)?;
        }
        Ok(total / T::lit(data.len().max(1) as f64))
    }

    pub fn accuracy<S: Borrow<Sample<T>>>(&self, data: &[S]) -> Result<f64> {
        let mut hits = 0usize;
        for s in data {
            let s = s.borrow();
            if let Label::Class(k) = s.label {
                hits += usize::from(self.predict_class(&s.x)? == k);
            }
        }
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    /// Writes all tensors in the binary weights format: magic `SHDPW001`,
    /// `u32` tensor count, then per tensor `u32` rank (always 2), `u64` rows,
    /// `u64` cols and `rows * cols` little-endian `f64` values.
    pub fn write_weights<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors: Vec<_> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (rows, cols, data) in tensors {
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(rows as u64).to_le_bytes())?;
            w.write_all(&(cols as u64).to_le_bytes())?;
            for &x in data {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrites this model's parameters from a weights stream with matching shapes.
    pub fn read_weights<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Config("not a weights file (bad magic)".into()));
        }
        let shapes: Vec<(usize, usize)> =
            self.blocks.iter().flat_map(|b| b.tensors()).map(|(r, c, _)| (r, c)).collect();
        let count = read_u32(&mut r)? as usize;
        if count != shapes.len() {
            return Err(Error::shape("weights tensor count", shapes.len(), count));
        }
        let mut flat = Vec::with_capacity(self.num_params());
        for &(rows, cols) in &shapes {
            let rank = read_u32(&mut r)?;
            let (fr, fc) = (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize);
            if rank != 2 || (fr, fc) != (rows, cols) {
                return Err(Error::shape("weights tensor", format!("{rows}x{cols}"), format!("{fr}x{fc} (rank {rank})")));
            }
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                flat.push(T::lit(f64::from_le_bytes(buf)));
            }
        }
        self.set_from_flat(&flat)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_weights(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::open(path)?;
        self.read_weights(std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn mean_rows<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let inv = T::one() / T::lit(m.rows() as f64);
    m.sum_rows().into_iter().map(|v| v * inv).collect()
}

impl<T: Scalar> ParamSet<T> for Model<T> {
    fn buffers(&self) -> Vec<&[T]> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.blocks.iter_mut().flat_map(|b| b.buffers_mut()).collect()
    }
}

/// Gradients of each example of a batch, in batch order.
#[derive(Debug, Clone)]
pub struct PerSampleGrads<T> {
    pub grads: Vec<Model<T>>,
    pub norms: Vec<T>,
    pub losses: Vec<T>,
}

impl<T: Scalar> PerSampleGrads<T> {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum over examples in batch order, or `None` for an empty batch.
    pub fn sum(&self) -> Option<Model<T>> {
        let (first, rest) = self.grads.split_first()?;
        let mut acc = first.clone();
        for g in rest {
            acc.axpy(T::one(), g);
        }
        Some(acc)
    }
}

/// Per-example gradients. Examples are processed in parallel; the output
/// order always matches the batch.
pub fn per_sample_gradients<T, S>(model: &Model<T>, batch: &[S], loss: Loss) -> Result<PerSampleGrads<T>>
where
    T: Scalar,
    S: Borrow<Sample<T>> + Sync,
{
    let results: Vec<(T, Model<T>)> =
        batch.par_iter().map(|s| model.gradient(s.borrow(), loss)).collect::<Result<_>>()?;
    let mut out = PerSampleGrads {
        grads: Vec::with_capacity(results.len()),
        norms: Vec::with_capacity(results.len()),
        losses: Vec::with_capacity(results.len()),
    };
    for (l, g) in results {
        out.norms.push(g.l2_norm());
        out.losses.push(l);
        out.grads.push(g);
    }
    Ok(out)
}

/// Rescales every example gradient to norm at most `c`.
pub fn clip<T: Scalar>(grads: &PerSampleGrads<T>, c: T) -> Result<PerSampleGrads<T>> {
    if !(c > T::zero()) {
        return Err(Error::domain(format!("clip bound must be positive, got {c}")));
    }
    let mut out = grads.clone();
    for (g, n) in out.grads.iter_mut().zip(out.norms.iter_mut()) {
        let factor = T::one() / T::one().max(*n / c);
        if factor < T::one() {
            g.scale(factor);
            *n = g.l2_norm();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_config() -> ModelConfig {
        ModelConfig::parse(
            r#"
input_dim = 3
seed = 5

[[blocks]]
kind = "mlp"
hidden = 4
output = 2
activation = "tanh"
"#,
        )
        .unwrap()
    }

    #[test]
    fn config_parses_json_and_toml() {
        let json = r#"{"input_dim": 3, "seed": 5, "blocks": [{"kind": "mlp", "hidden": 4, "output": 2, "activation": "tanh"}]}"#;
        assert_eq!(ModelConfig::parse(json).unwrap(), mlp_config());
        assert!(ModelConfig::parse("input_dim = 3\nblocks = []").is_err());
        assert!(ModelConfig::parse("not toml at all [").is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let (v, g) = Loss::SoftmaxCrossEntropy.evaluate(&[0.0f64, 0.0], &Label::Class(1)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);
        assert!(Loss::SoftmaxCrossEntropy.evaluate(&[0.0f64], &Label::Class(3)).is_err());
    }

    #[test]
    fn identical_examples_identical_gradients() {
        let model: Model<f64> = mlp_config().build().unwrap();
        let s = Sample::class(vec![0.1, -0.4, 0.7], 1);
        let g = per_sample_gradients(&model, &[s.clone(), s], Loss::SoftmaxCrossEntropy).unwrap();
        assert_eq!(g.grads[0], g.grads[1]);
        assert_eq!(g.norms[0], g.norms[1]);
    }

    #[test]
    fn clip_cases() {
        let model: Model<f64> = mlp_config().build().unwrap();
        let batch = vec![Sample::class(vec![1.0, 2.0, -1.0], 0), Sample::class(vec![-3.0, 0.5, 2.0], 1)];
        let g = per_sample_gradients(&model, &batch, Loss::SoftmaxCrossEntropy).unwrap();
        let same = clip(&g, f64::INFINITY).unwrap();
        assert_eq!(same.grads, g.grads);

        let mut scaled = g.clone();
        let n0 = scaled.norms[0];
        scaled.grads[0].scale(4.0 / n0);
        scaled.norms[0] = 4.0;
        let clipped = clip(&scaled, 1.0).unwrap();
        assert!((clipped.norms[0] - 1.0).abs() < 1e-12);
        let mut back = clipped.grads[0].clone();
        back.scale(4.0);
        assert!(back.l2_distance(&scaled.grads[0]) < 1e-12);

        let mut small = g.clone();
        small.grads[0].scale(0.5 / n0);
        small.norms[0] = small.grads[0].l2_norm();
        assert_eq!(clip(&small, 1.0).unwrap().grads[0], small.grads[0]);
        assert!(clip(&g, 0.0).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let cfg = ModelConfig {
            input_dim: 4,
            seed: 9,
            blocks: vec![
                BlockConfig::Attention { heads: 2, d_k: 3, d_v: 2 },
                BlockConfig::Mlp { hidden: 5, output: 3, activation: Activation::Relu },
            ],
        };
        let model: Model<f64> = cfg.build().unwrap();
        let mut bytes = Vec::new();
        model.write_weights(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"SHDPW001");
        assert_eq!(bytes.len(), 8 + 4 + 11 * 20 + model.num_params() * 8);
        let mut other: Model<f64> = ModelConfig { seed: 10, ..cfg.clone() }.build().unwrap();
        assert_ne!(other, model);
        other.read_weights(bytes.as_slice()).unwrap();
        assert_eq!(other, model);

        let mut wrong: Model<f64> = mlp_config().build().unwrap();
        assert!(wrong.read_weights(bytes.as_slice()).is_err());
        assert!(wrong.read_weights(&b"NOTMAGIC"[..]).is_err());
    }
}
