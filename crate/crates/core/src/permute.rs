//! Weight permutations that leave a block's function unchanged.
//!
//! Every permutation is applied as an index gather: entry `i` of the result
//! is entry `indices[i]` of the input. No permutation matrices are formed.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionParams, Block, MlpParams, Model, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    indices: Vec<usize>,
}

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; indices.len()];
        for &i in &indices {
            if i >= indices.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::domain(format!("not a permutation of 0..{}: {indices:?}", indices.len())));
            }
        }
        Ok(Self { indices })
    }

    pub fn identity(n: usize) -> Self {
        Self { indices: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.indices.iter().enumerate() {
            inv[j] = i;
        }
        Self { indices: inv }
    }

    /// Gathering by the result equals gathering by `self`, then by `other`.
    pub fn compose(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "composing permutations of different sizes");
        Self { indices: other.indices.iter().map(|&i| self.indices[i]).collect() }
    }

    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.indices.iter().map(|&i| values[i]).collect()
    }
}

/// Uniformly random permutation of `0..n` (Fisher–Yates).
pub fn sample_permutation<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::domain("cannot sample a permutation of an empty set"));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    Ok(Permutation { indices })
}

fn check_len(op: &'static str, p: &Permutation, want: usize) -> Result<()> {
    if p.len() != want {
        return Err(Error::shape(op, want, p.len()));
    }
    Ok(())
}

/// Permutes the hidden units: rows of `W_t`, entries of `b_t`, columns of `W_t1`.
pub fn apply_mlp_permutation<T: Scalar>(params: &mut MlpParams<T>, p1: &Permutation) -> Result<()> {
    check_len("apply_mlp_permutation", p1, params.hidden_dim())?;
    if params.w_t1.cols() != params.hidden_dim() || params.b_t.len() != params.hidden_dim() {
        return Err(Error::shape("apply_mlp_permutation", params.hidden_dim(), params.w_t1.cols()));
    }
    params.w_t = params.w_t.gather_rows(p1.indices());
    params.b_t = p1.gather(&params.b_t);
    params.w_t1 = params.w_t1.gather_cols(p1.indices());
    Ok(())
}

/// Permutes query/key columns of head `i` by `p1[i]`, value columns of every
/// head by `p2`, and the matching rows inside each head's block of `W_O`.
pub fn apply_transformer_permutation<T: Scalar>(
    params: &mut AttentionParams<T>,
    p1: &[Permutation],
    p2: &Permutation,
) -> Result<()> {
    if p1.len() != params.num_heads() {
        return Err(Error::shape("apply_transformer_permutation heads", params.num_heads(), p1.len()));
    }
    let (d_k, d_v) = (params.d_k(), params.d_v());
    for p in p1 {
        check_len("apply_transformer_permutation p1", p, d_k)?;
    }
    check_len("apply_transformer_permutation p2", p2, d_v)?;
    for (head, p) in params.heads.iter_mut().zip(p1) {
        head.w_q = head.w_q.gather_cols(p.indices());
        head.w_k = head.w_k.gather_cols(p.indices());
        head.w_v = head.w_v.gather_cols(p2.indices());
    }
    let rows: Vec<usize> = (0..params.num_heads())
        .flat_map(|h| p2.indices().iter().map(move |&j| h * d_v + j))
        .collect();
    params.w_o = params.w_o.gather_rows(&rows);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Mlp,
    Transformer,
}

/// One block of a model whose parameters are permuted together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantGroup {
    pub kind: GroupKind,
    /// Index into `Model::blocks`.
    pub block: usize,
    /// `[hidden]` for an MLP, `[d_k; heads]` followed by `d_v` for attention.
    pub sizes: Vec<usize>,
    pub num_params: usize,
}

impl InvariantGroup {
    pub fn of_block<T: Scalar>(index: usize, block: &Block<T>) -> Self {
        match block {
            Block::Mlp(p) => Self {
                kind: GroupKind::Mlp,
                block: index,
                sizes: vec![p.hidden_dim()],
                num_params: p.num_params(),
            },
            Block::Attention(p) => {
                let mut sizes = vec![p.d_k(); p.num_heads()];
                sizes.push(p.d_v());
                Self { kind: GroupKind::Transformer, block: index, sizes, num_params: p.num_params() }
            }
        }
    }

    /// `ln` of the number of distinct permutations this group can draw.
    pub fn log_permutation_count(&self) -> f64 {
        self.sizes.iter().map(|&n| libm::lgamma(n as f64 + 1.0)).sum()
    }

    pub fn identity(&self) -> GroupPermutation {
        match self.kind {
            GroupKind::Mlp => GroupPermutation::Mlp(Permutation::identity(self.sizes[0])),
            GroupKind::Transformer => {
                let (d_v, d_k) = self.sizes.split_last().expect("transformer sizes non-empty");
                GroupPermutation::Transformer {
                    p1: d_k.iter().map(|&n| Permutation::identity(n)).collect(),
                    p2: Permutation::identity(*d_v),
                }
            }
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<GroupPermutation> {
        Ok(match self.kind {
            GroupKind::Mlp => GroupPermutation::Mlp(sample_permutation(self.sizes[0], rng)?),
            GroupKind::Transformer => {
                let (d_v, d_k) = self.sizes.split_last().expect("transformer sizes non-empty");
                let p1 = d_k.iter().map(|&n| sample_permutation(n, rng)).collect::<Result<_>>()?;
                GroupPermutation::Transformer { p1, p2: sample_permutation(*d_v, rng)? }
            }
        })
    }
}

/// Every block of a model. All supported blocks are permutation invariant.
pub fn invariant_groups<T: Scalar>(model: &Model<T>) -> Vec<InvariantGroup> {
    model.blocks.iter().enumerate().map(|(i, b)| InvariantGroup::of_block(i, b)).collect()
}

/// A concrete permutation for one invariant group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupPermutation {
    Mlp(Permutation),
    Transformer { p1: Vec<Permutation>, p2: Permutation },
}

impl GroupPermutation {
    /// Applies to a block of parameters or of gradients with the same shapes.
    pub fn apply<T: Scalar>(&self, block: &mut Block<T>) -> Result<()> {
        match (self, block) {
            (GroupPermutation::Mlp(p), Block::Mlp(params)) => apply_mlp_permutation(params, p),
            (GroupPermutation::Transformer { p1, p2 }, Block::Attention(params)) => {
                apply_transformer_permutation(params, p1, p2)
            }
            (_, b) => Err(Error::shape("GroupPermutation::apply", "matching block kind", b.kind())),
        }
    }

    pub fn inverse(&self) -> Self {
        match self {
            GroupPermutation::Mlp(p) => GroupPermutation::Mlp(p.inverse()),
            GroupPermutation::Transformer { p1, p2 } => GroupPermutation::Transformer {
                p1: p1.iter().map(Permutation::inverse).collect(),
                p2: p2.inverse(),
            },
        }
    }

    /// Applying the result equals applying `self`, then `other`.
    pub fn compose(&self, other: &Self) -> Self {
        match (self, other) {
            (GroupPermutation::Mlp(a), GroupPermutation::Mlp(b)) => GroupPermutation::Mlp(a.compose(b)),
            (GroupPermutation::Transformer { p1: a1, p2: a2 }, GroupPermutation::Transformer { p1: b1, p2: b2 }) => {
                GroupPermutation::Transformer {
                    p1: a1.iter().zip(b1).map(|(a, b)| a.compose(b)).collect(),
                    p2: a2.compose(b2),
                }
            }
            _ => panic!("composing permutations of different group kinds"),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            GroupPermutation::Mlp(p) => p.is_identity(),
            GroupPermutation::Transformer { p1, p2 } => p1.iter().all(Permutation::is_identity) && p2.is_identity(),
        }
    }
}

/// SGD step on one group followed by a fresh random permutation of it.
/// Returns the permutation that was applied.
pub fn shuffle_update<T: Scalar, R: rand::Rng + ?Sized>(
    model: &mut Model<T>,
    group: &InvariantGroup,
    noisy_grad: &Block<T>,
    lr: T,
    rng: &mut R,
) -> Result<GroupPermutation> {
    let block = model
        .blocks
        .get_mut(group.block)
        .ok_or_else(|| Error::shape("shuffle_update block", "existing block", group.block))?;
    if block.num_params() != noisy_grad.num_params() || block.kind() != noisy_grad.kind() {
        return Err(Error::shape("shuffle_update gradient", block.num_params(), noisy_grad.num_params()));
    }
    block.axpy(-lr, noisy_grad);
    let perm = group.sample(rng)?;
    perm.apply(block)?;
    Ok(perm)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub is_permutation: bool,
}

/// Gathers `a[rows[i]][cols[j]]` into a fresh matrix in one pass.
pub fn shuffle_matrix<T: Scalar>(a: &Matrix<T>, rows: &Permutation, cols: &Permutation) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    shuffle_matrix_into(a, rows, cols, &mut out)?;
    Ok(out)
}

/// Like [`shuffle_matrix`], writing into an existing buffer of the same shape.
pub fn shuffle_matrix_into<T: Scalar>(
    a: &Matrix<T>,
    rows: &Permutation,
    cols: &Permutation,
    out: &mut Matrix<T>,
) -> Result<()> {
    check_len("shuffle_matrix rows", rows, a.rows())?;
    check_len("shuffle_matrix cols", cols, a.cols())?;
    if out.shape() != a.shape() {
        return Err(Error::shape("shuffle_matrix_into", format!("{:?}", a.shape()), format!("{:?}", out.shape())));
    }
    let n = a.cols();
    let idx = cols.indices();
    for (dst, &r) in out.data_mut().chunks_exact_mut(n.max(1)).zip(rows.indices()) {
        let src = a.row(r);
        for (d, &c) in dst.iter_mut().zip(idx) {
            *d = src[c];
        }
    }
    Ok(())
}

/// True when `b` is `a` with rows and columns reordered: the multiset of
/// sorted rows must agree, and so must the multiset of sorted columns.
/// Lines are compared through a hash of their sorted bit patterns so the
/// check needs only O(n) extra memory.
pub fn is_row_col_permutation<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> bool {
    use std::hash::{DefaultHasher, Hash, Hasher};

    if a.shape() != b.shape() {
        return false;
    }
    let fingerprints = |m: &Matrix<T>, by_rows: bool| {
        let (outer, inner) = if by_rows { (m.rows(), m.cols()) } else { (m.cols(), m.rows()) };
        let mut line = Vec::with_capacity(inner);
        let mut prints: Vec<u64> = (0..outer)
            .map(|o| {
                line.clear();
                line.extend((0..inner).map(|i| if by_rows { m[(o, i)] } else { m[(i, o)] }.as_f64().to_bits()));
                line.sort_unstable();
                let mut h = DefaultHasher::new();
                line.hash(&mut h);
                h.finish()
            })
            .collect();
        prints.sort_unstable();
        prints
    };
    fingerprints(a, true) == fingerprints(b, true) && fingerprints(a, false) == fingerprints(b, false)
}

/// Times `reps` row+column index shuffles of a random `n x n` matrix.
pub fn shuffle_bench<T: Scalar>(n: usize, reps: usize, seed: u64, verify: bool) -> Result<BenchReport> {
    use rand::Rng as _;
    if n == 0 || reps == 0 {
        return Err(Error::domain("shuffle_bench needs n >= 1 and reps >= 1"));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Bench);
    let a = Matrix::from_fn(n, n, |_, _| T::lit(rng.random::<f64>()));
    let mut times: Vec<Duration> = Vec::with_capacity(reps);
    let mut out = Matrix::zeros(n, n);
    // touch the destination once so page faults are not timed
    shuffle_matrix_into(&a, &Permutation::identity(n), &Permutation::identity(n), &mut out)?;
    for _ in 0..reps {
        let rows = sample_permutation(n, &mut rng)?;
        let cols = sample_permutation(n, &mut rng)?;
        let start = Instant::now();
        shuffle_matrix_into(&a, &rows, &cols, &mut out)?;
        times.push(start.elapsed());
    }
    let is_permutation = !verify || is_row_col_permutation(&a, &out);
    let mut ms: Vec<f64> = times.iter().map(|t| t.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let median_ms = if reps % 2 == 1 { ms[reps / 2] } else { 0.5 * (ms[reps / 2 - 1] + ms[reps / 2]) };
    Ok(BenchReport { n, reps, median_ms, min_ms: ms[0], max_ms: ms[reps - 1], is_permutation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::{stream, Stream};

    #[test]
    fn rejects_non_bijections() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![1, 2]).is_err());
        assert!(Permutation::new(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn inverse_and_compose() {
        let p = Permutation::new(vec![2, 0, 3, 1]).unwrap();
        assert!(p.compose(&p.inverse()).is_identity());
        assert!(p.inverse().compose(&p).is_identity());
        let q = Permutation::new(vec![1, 3, 0, 2]).unwrap();
        let v = [10, 20, 30, 40];
        assert_eq!(p.compose(&q).gather(&v), q.gather(&p.gather(&v)));
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = stream(1, Stream::Permutation);
        assert!(sample_permutation(0, &mut rng).is_err());
        assert!(sample_permutation(1, &mut rng).unwrap().is_identity());
        let a = sample_permutation(50, &mut stream(2, Stream::Permutation)).unwrap();
        let b = sample_permutation(50, &mut stream(2, Stream::Permutation)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_leaves_weights_bit_identical() {
        let mut rng = stream(3, Stream::Init);
        let mut mlp = MlpParams::<f64>::init(3, 6, 2, Activation::Relu, &mut rng);
        let before = mlp.clone();
        apply_mlp_permutation(&mut mlp, &Permutation::identity(6)).unwrap();
        assert_eq!(mlp, before);
        assert!(apply_mlp_permutation(&mut mlp, &Permutation::identity(5)).is_err());

        let mut att = AttentionParams::<f64>::init(4, 2, 3, 2, &mut rng);
        let before = att.clone();
        let ids = vec![Permutation::identity(3); 2];
        apply_transformer_permutation(&mut att, &ids, &Permutation::identity(2)).unwrap();
        assert_eq!(att, before);
        assert!(apply_transformer_permutation(&mut att, &ids[..1], &Permutation::identity(2)).is_err());
    }

    #[test]
    fn log_count_matches_factorials() {
        let g = InvariantGroup { kind: GroupKind::Transformer, block: 0, sizes: vec![3, 3, 4], num_params: 0 };
        assert!((g.log_permutation_count() - (6f64.ln() * 2.0 + 24f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn shuffle_matrix_small() {
        let a = Matrix::<f64>::from_fn(3, 3, |r, c| (r * 3 + c) as f64);
        let rows = Permutation::new(vec![2, 0, 1]).unwrap();
        let cols = Permutation::new(vec![1, 2, 0]).unwrap();
        let b = shuffle_matrix(&a, &rows, &cols).unwrap();
        assert_eq!(b.row(0), &[7.0, 8.0, 6.0]);
        assert!(is_row_col_permutation(&a, &b));
        let mut c = b.clone();
        c[(0, 0)] = 100.0;
        assert!(!is_row_col_permutation(&a, &c));
        let one = shuffle_bench::<f64>(1, 3, 0, true).unwrap();
        assert!(one.is_permutation);
    }
}
