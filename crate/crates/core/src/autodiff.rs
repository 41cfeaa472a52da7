//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive applications in creation order, which is a
//! topological order by construction. [`Graph::backward`] walks the tape once
//! in reverse, summing contributions into each input's gradient buffer, so a
//! value used twice receives the sum of both contributions. Parameters can be
//! bound by reference; frozen ones are bound with `requires_grad = false` and
//! never receive a gradient buffer.
//!
//! Tensors inside a graph are matrices `[rows × cols]` (a scalar is `[1]`).
//! Batched sequence data is stored as `[batch·seq × hidden]`, and the ops
//! that need the block structure take `batch` or `seq` explicitly.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::kernels;
use crate::spectral::MixPlan;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction over column groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupPool {
    Max,
    Mean,
}

/// Shape of a batched multi-head attention call.
///
/// `mask`, when present, is a row-major `[q_len × k_len]` permission matrix
/// shared across the batch (`true` = may attend).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub mask: Option<Vec<bool>>,
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    FourierMix {
        x: Var,
        plan: MixPlan,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatBlocks {
        parts: Vec<Var>,
        batch: usize,
    },
    SliceBlocks {
        x: Var,
        batch: usize,
        start: usize,
    },
    TileRows {
        x: Var,
        times: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        total: f64,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    PoolColGroups {
        x: Var,
        group: usize,
        kind: GroupPool,
        argmax: Vec<usize>,
    },
    Transpose(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Parameters bound by reference live for `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient buffer, `None` if nothing flowed into `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; exact zeros when `v` is not on any path to the
    /// loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape.clone(), g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds an externally owned parameter without copying it.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() > 2 {
            return Err(Error::shape(op, t.shape(), &[]));
        }
        Ok(matrix_dims(t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(y, bv)| *y += bv);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::contract("layer_norm needs at least 2 features"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xt = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xt.rows();
        let mut out = vec![0.0; xt.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (row, y) in xt.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                y[j] = (row[j] - mu) * r * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let shape = xt.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(x), &[x])
    }

    /// Fourier token mixing applied to each `[seq × cols]` block of `x`.
    pub fn fourier_mix(&mut self, x: Var, seq: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "fourier_mix")?;
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("fourier_mix", self.shape(x), &[seq, cols]));
        }
        let plan = MixPlan::new(seq, cols)?;
        let mut out = vec![0.0; rows * cols];
        plan.apply(self.value(x).data(), &mut out);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::FourierMix { x, plan },
            &[x],
        ))
    }

    /// Scaled dot-product attention with `spec.heads` heads over
    /// `q: [batch·q_len × d]`, `k, v: [batch·k_len × d]`. Rows with no
    /// permitted key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.matrix(q, "attention")?;
        let (kr, dk) = self.matrix(k, "attention")?;
        let (vr, dv) = self.matrix(v, "attention")?;
        if dk != d || dv != d || kr != vr {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.k_len {
            return Err(Error::shape(
                "attention",
                &[qr, kr],
                &[spec.batch * spec.q_len, spec.batch * spec.k_len],
            ));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::contract("attention width must be divisible by heads"));
        }
        if let Some(mask) = &spec.mask {
            if mask.len() != spec.q_len * spec.k_len {
                return Err(Error::shape(
                    "attention mask",
                    &[mask.len()],
                    &[spec.q_len, spec.k_len],
                ));
            }
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &spec,
        );
        Ok(self.push(
            Tensor::from_parts(vec![qr, d], out),
            Op::Attention { q, k, v, spec, probs },
            &[q, k, v],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, cols], out),
            Op::SliceRows { x, start },
            &[x],
        ))
    }

    /// Per-sequence concatenation: each part holds `batch` equal blocks of
    /// rows, and block `b` of the output is the concatenation of block `b` of
    /// every part.
    pub fn concat_blocks(&mut self, parts: &[Var], batch: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let cols = self.value(first).cols();
        let mut block_rows = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || batch == 0 || t.rows() % batch != 0 {
                return Err(Error::shape("concat_blocks", self.shape(first), t.shape()));
            }
            block_rows.push(t.rows() / batch);
        }
        let mut out = Vec::new();
        for b in 0..batch {
            for (&p, &r) in parts.iter().zip(&block_rows) {
                out.extend_from_slice(&self.value(p).data()[b * r * cols..(b + 1) * r * cols]);
            }
        }
        let rows = out.len() / cols;
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatBlocks {
                parts: parts.to_vec(),
                batch,
            },
            parts,
        ))
    }

    /// Rows `start..start+len` of each of the `batch` blocks of `x`.
    pub fn slice_blocks(&mut self, x: Var, batch: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_blocks")?;
        if batch == 0 || rows % batch != 0 || len == 0 || start + len > rows / batch {
            return Err(Error::shape("slice_blocks", self.shape(x), &[batch, start, len]));
        }
        let block = rows / batch;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len * cols);
        for b in 0..batch {
            let off = (b * block + start) * cols;
            out.extend_from_slice(&src[off..off + len * cols]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch * len, cols], out),
            Op::SliceBlocks { x, batch, start },
            &[x],
        ))
    }

    /// Repeats the whole of `x` vertically `times` times.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "tile_rows")?;
        if times == 0 {
            return Err(Error::contract("tile_rows needs times >= 1"));
        }
        let out = self.value(x).data().repeat(times);
        Ok(self.push(
            Tensor::from_parts(vec![rows * times, cols], out),
            Op::TileRows { x, times },
            &[x],
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.matrix(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of no ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary {
                    token: id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Weighted mean of per-row softmax cross-entropy.
    ///
    /// `weights[i] = 0` removes row `i` from both numerator and denominator;
    /// its target is then never read. All-zero weights are an error.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (rows, vocab) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let weights: Vec<f64> = weights.map_or_else(|| vec![1.0; rows], |w| w.to_vec());
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::contract("cross-entropy mean over zero weighted positions"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_exact_mut(vocab).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            if weights[i] != 0.0 {
                let t = targets[i];
                if t >= vocab {
                    return Err(Error::Vocabulary {
                        token: t,
                        vocab_size: vocab,
                    });
                }
                let logit = self.nodes[logits.0].value.get().data()[i * vocab + t];
                loss += weights[i] * (z.ln() - (logit - max));
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(
            Tensor::scalar(loss / total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                total,
                probs,
            },
            &[logits],
        ))
    }

    /// Divides each row by its L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_exact_mut(n) {
            let norm = dot(row, row).sqrt();
            // non-finite norms propagate so the divergence guard sees them
            if norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2NormalizeRows { x, norms },
            &[x],
        ))
    }

    /// Reduces each consecutive group of `group` columns to one value.
    pub fn pool_col_groups(&mut self, x: Var, group: usize, kind: GroupPool) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "pool_col_groups")?;
        if group == 0 || cols % group != 0 {
            return Err(Error::shape("pool_col_groups", self.shape(x), &[group]));
        }
        let groups = cols / group;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * groups);
        let mut argmax = Vec::new();
        for chunk in src.chunks_exact(group) {
            match kind {
                GroupPool::Max => {
                    let (idx, best) = chunk.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    );
                    out.push(best);
                    argmax.push(idx);
                }
                GroupPool::Mean => out.push(chunk.iter().sum::<f64>() / group as f64),
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, groups], out),
            Op::PoolColGroups {
                x,
                group,
                kind,
                argmax,
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "transpose")?;
        let out = kernels::transpose(self.value(x).data(), rows, cols);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose(x), &[x]))
    }

    /// `x · w + b` for a `[in × out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.get().shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node<'a>, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(self.value(*a));
                let n = self.value(*b).cols();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    kernels::matmul_nt(gy, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    kernels::matmul_tn(self.value(*a).data(), gy, gb, k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = matrix_dims(self.value(*a));
                let n = self.value(*b).rows();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    kernels::matmul_nn(gy, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    kernels::matmul_tn(gy, self.value(*a).data(), gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.grad_buf(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((x, y), w) in g.iter_mut().zip(gy).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    let av = self.value(*a).data();
                    for ((x, y), w) in g.iter_mut().zip(gy).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(a, y)| *a += y);
                }
                let n = self.value(*x).cols();
                if let Some(g) = self.grad_buf(grads, *b) {
                    for row in gy.chunks_exact(n) {
                        g.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().zip(gy).for_each(|(a, y)| *a += c * y);
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().for_each(|a| *a += gy[0]);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((a, y), &v) in g.iter_mut().zip(gy).zip(xv) {
                        *a += y * gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (row, g_row)) in xv.data().chunks_exact(d).zip(gy.chunks_exact(d)).enumerate() {
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = g_row[j] * gam[j];
                        dgamma[j] += g_row[j] * xhat[j];
                        dbeta[j] += g_row[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if let Some(g) = self.grad_buf(grads, *x) {
                    g.iter_mut().zip(&dx).for_each(|(a, v)| *a += v);
                }
                if let Some(g) = self.grad_buf(grads, *gamma) {
                    g.iter_mut().zip(&dgamma).for_each(|(a, v)| *a += v);
                }
                if let Some(g) = self.grad_buf(grads, *beta) {
                    g.iter_mut().zip(&dbeta).for_each(|(a, v)| *a += v);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.get();
                let n = y.cols();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((ga, yr), gr) in g.chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(gy.chunks_exact(n)) {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::FourierMix { x, plan } => {
                // the real-part mixer is symmetric, so its adjoint is itself
                if let Some(g) = self.grad_buf(grads, *x) {
                    let mut tmp = vec![0.0; gy.len()];
                    plan.apply(gy, &mut tmp);
                    g.iter_mut().zip(&tmp).for_each(|(a, v)| *a += v);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let d = self.value(*q).cols();
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gy,
                    d,
                    spec,
                );
                for (var, upd) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(g) = self.grad_buf(grads, var) {
                        g.iter_mut().zip(&upd).for_each(|(a, u)| *a += u);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.grad_buf(grads, p) {
                        g.iter_mut().zip(&gy[off..off + len]).for_each(|(a, y)| *a += y);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).cols();
                if let Some(g) = self.grad_buf(grads, *x) {
                    let off = start * cols;
                    g[off..off + gy.len()].iter_mut().zip(gy).for_each(|(a, y)| *a += y);
                }
            }
            Op::ConcatBlocks { parts, batch } => {
                let cols = node.value.get().cols();
                let sizes: Vec<usize> = parts.iter().map(|p| self.value(*p).len() / batch).collect();
                let mut off = 0;
                for b in 0..*batch {
                    for (&p, &sz) in parts.iter().zip(&sizes) {
                        if let Some(g) = self.grad_buf(grads, p) {
                            g[b * sz..(b + 1) * sz]
                                .iter_mut()
                                .zip(&gy[off..off + sz])
                                .for_each(|(a, y)| *a += y);
                        }
                        off += sz;
                    }
                }
                debug_assert_eq!(off % cols, 0);
            }
            Op::SliceBlocks { x, batch, start } => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let block = xt.rows() / batch;
                let len = gy.len() / (batch * cols);
                if let Some(g) = self.grad_buf(grads, *x) {
                    for b in 0..*batch {
                        let dst = (b * block + start) * cols;
                        let src = b * len * cols;
                        g[dst..dst + len * cols]
                            .iter_mut()
                            .zip(&gy[src..src + len * cols])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::TileRows { x, times } => {
                let len = self.value(*x).len();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for t in 0..*times {
                        g.iter_mut()
                            .zip(&gy[t * len..(t + 1) * len])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = self.value(*table).cols();
                if let Some(g) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        g[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&gy[r * cols..(r + 1) * cols])
                            .for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                total,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                if let Some(g) = self.grad_buf(grads, *logits) {
                    for (i, (ga, p)) in g.chunks_exact_mut(vocab).zip(probs.chunks_exact(vocab)).enumerate() {
                        let w = weights[i];
                        if w == 0.0 {
                            continue;
                        }
                        let c = gy[0] * w / total;
                        for j in 0..vocab {
                            ga[j] += c * p[j];
                        }
                        ga[targets[i]] -= c;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.get();
                let n = y.cols();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for (r, ((ga, yr), gr)) in g
                        .chunks_exact_mut(n)
                        .zip(y.data().chunks_exact(n))
                        .zip(gy.chunks_exact(n))
                        .enumerate()
                    {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            ga[j] += (gr[j] - yr[j] * s) / norms[r];
                        }
                    }
                }
            }
            Op::PoolColGroups {
                x,
                group,
                kind,
                argmax,
            } => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for (o, &gv) in gy.iter().enumerate() {
                        let base = o * group;
                        match kind {
                            GroupPool::Max => g[base + argmax[o]] += gv,
                            GroupPool::Mean => {
                                let share = gv / *group as f64;
                                g[base..base + group].iter_mut().for_each(|a| *a += share);
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = matrix_dims(self.value(*x));
                if let Some(g) = self.grad_buf(grads, *x) {
                    let t = kernels::transpose(gy, cols, rows);
                    g.iter_mut().zip(&t).for_each(|(a, v)| *a += v);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Returns the attention output and the per-head probability table
/// `[batch × heads × q_len × k_len]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    spec: &AttentionSpec,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionSpec {
        heads,
        batch,
        q_len,
        k_len,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * q_len * d];
    let mut probs = vec![0.0; batch * heads * q_len * k_len];
    let mut scores = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q_len {
                let qi = &q[(b * q_len + i) * d..][cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..k_len {
                    let allowed = spec.mask.as_ref().map_or(true, |m| m[i * k_len + j]);
                    scores[j] = if allowed {
                        let kj = &k[(b * k_len + j) * d..][cols.clone()];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        s
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let mut z = 0.0;
                for j in 0..k_len {
                    p[j] = if scores[j] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (scores[j] - max).exp()
                    };
                    z += p[j];
                }
                p.iter_mut().for_each(|x| *x /= z);
                let oi = &mut out[(b * q_len + i) * d..][cols.clone()];
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &v[(b * k_len + j) * d..][cols.clone()];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p[j] * x);
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gy: &[f64],
    d: usize,
    spec: &AttentionSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionSpec {
        heads,
        batch,
        q_len,
        k_len,
        ..
    } = *spec;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q_len {
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let gi = &gy[(b * q_len + i) * d..][cols.clone()];
                let mut s = 0.0;
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let row = (b * k_len + j) * d;
                    dp[j] = dot(gi, &v[row..][cols.clone()]);
                    s += p[j] * dp[j];
                    dv[row..][cols.clone()]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(a, g)| *a += p[j] * g);
                }
                let qrow = (b * q_len + i) * d;
                for j in 0..k_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - s) * scale;
                    let krow = (b * k_len + j) * d;
                    for c in cols.clone() {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Maximum relative discrepancy between the analytic gradient of the scalar
/// function `f` at `point` and central finite differences with step `h`:
/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<'a, F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<'a>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, point, h, &coords)
}

/// [`finite_diff_check`] restricted to the listed coordinates of `point`.
pub fn finite_diff_check_coords<'a, F>(mut f: F, point: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Graph<'a>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract("finite-difference step must lie in [1e-7, 1e-3]"));
    }
    let mut eval = |p: Tensor, grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let x = g.leaf(p, grad);
        let y = f(&mut g, x)?;
        if g.value(y).len() != 1 {
            return Err(Error::contract("finite_diff_check needs a scalar-valued function"));
        }
        let val = g.value(y).data()[0];
        let grads = if grad { Some(g.backward(y)?.wrt(x)) } else { None };
        Ok((val, grads))
    };
    let (_, analytic) = eval(point.clone(), true)?;
    let analytic = analytic.ok_or_else(|| Error::contract("missing gradient".to_string()))?;
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
