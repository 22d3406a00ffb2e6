//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Graph`] is built eagerly: each operation computes its value on the spot
//! and appends a node describing how it was produced. [`Graph::backward`]
//! then walks the nodes in reverse, accumulating vector-Jacobian products into
//! every node that (transitively) depends on a leaf marked `requires_grad`.
//!
//! Activations are kept as 2-D `[rows, features]` matrices. Token sequences of
//! a batch are stacked, so a batch of `B` sequences of `N` tokens is a
//! `[B·N, d]` matrix; ops that mix tokens take the sequence length `N`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{add_assign, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::ops::{gelu, gelu_grad, normalize, softmax_in_place};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    AddScalar { a: NodeId },
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: NodeId, lambda: T },
    Gather { a: NodeId, index: Vec<usize> },
    Concat { parts: Vec<NodeId> },
    Reshape { a: NodeId },
    TokenMean { a: NodeId, tokens: usize, skip: usize },
    TokenMax { a: NodeId, argmax: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<T> },
    Sum { a: NodeId },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eagerly evaluated computation record.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `id` into `target`'s gradient buffer.
    pub fn write_grad(&self, id: NodeId, target: &mut Tensor<T>) -> Result<()> {
        let g = self
            .grad(id)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); target.numel()]);
        target.set_grad(g)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        self.value(id).dims2().map_err(|_| {
            Error::shape(op, format!("expected a matrix, got {:?}", self.shape(id)))
        })
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (g, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([g, m, k], [g2, r, c]) if g == g2 => {
                let (bk, bn) = if trans_b { (*c, *r) } else { (*r, *c) };
                if bk != *k {
                    return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
                }
                (*g, *m, *k, bn)
            }
            _ => return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); g * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                let a_g = &ad[i * m * k..(i + 1) * m * k];
                let b_g = &bd[i * k * n..(i + 1) * k * n];
                let o_g = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    matmul_a_bt_acc(a_g, b_g, o_g, m, k, n);
                } else {
                    matmul_acc(a_g, b_g, o_g, m, k, n);
                }
            }
        }
        let v = Tensor::new(vec![g, m, n], out)?;
        self.push("batch_matmul", v, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push("scale", v, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar { a }, &[a])
    }

    fn row_op(&mut self, name: &'static str, a: NodeId, row: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let cols = *self.shape(a).last().expect("non-empty shape");
        if self.value(row).numel() != cols {
            return Err(Error::shape(
                name,
                format!("row vector of {} for {:?}", self.value(row).numel(), self.shape(a)),
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    /// Adds a `[n]` vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_op("add_row", a, row, |x, y| x + y)?;
        self.push("add_row", v, Op::AddRow { a, row }, &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_op("mul_row", a, row, |x, y| x * y)?;
        self.push("mul_row", v, Op::MulRow { a, row }, &[a, row])
    }

    /// `x · W + b` for `x [m,k]`, `W [k,n]`, `b [n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        self.push("gelu", v, Op::Gelu { a }, &[a])
    }

    /// Layer normalisation of each row of `x [m,d]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", format!("affine params do not match width {d}")));
        }
        let mut xhat = Vec::with_capacity(m * d);
        let mut rstd = Vec::with_capacity(m);
        for row in self.value(x).data().chunks(d) {
            let (h, r) = normalize(row, eps);
            xhat.extend(h);
            rstd.push(r);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .chunks(d)
            .flat_map(|h| h.iter().zip(g).zip(b).map(|((&h, &g), &b)| g * h + b).collect::<Vec<_>>())
            .collect();
        let v = Tensor::new(vec![m, d], out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax of `lambda · a` over the last axis.
    pub fn softmax(&mut self, a: NodeId, lambda: T) -> Result<NodeId> {
        if !(lambda > T::zero()) {
            return Err(Error::invalid("softmax", "lambda must be positive"));
        }
        let cols = *self.shape(a).last().expect("non-empty shape");
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row, lambda);
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("softmax", v, Op::Softmax { a, lambda }, &[a])
    }

    /// `out[i] = a[index[i]]` reshaped to `shape`. Repeated indices sum
    /// their gradients.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        self.push("gather", v, Op::Gather { a, index }, &[a])
    }

    /// Flat concatenation of the parts' buffers, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[NodeId], shape: Vec<usize>) -> Result<NodeId> {
        let data: Vec<T> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let v = Tensor::new(shape, data)?;
        self.push("concat", v, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(&shape)?;
        self.push("reshape", v, Op::Reshape { a }, &[a])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn columns(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "columns")?;
        if start + len > n || len == 0 {
            return Err(Error::shape("columns", format!("{start}..{} of {n}", start + len)));
        }
        let index = (0..m).flat_map(|i| (start..start + len).map(move |j| i * n + j)).collect();
        self.gather(a, index, vec![m, len])
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut rows = None;
        for &p in parts {
            let (m, n) = self.dims2(p, "concat_cols")?;
            if *rows.get_or_insert(m) != m {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(n);
        }
        let m = rows.ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        let total: usize = widths.iter().sum();
        let flat = self.concat(parts, vec![m * total])?;
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0;
        for &w in &widths {
            offsets.push(acc);
            acc += m * w;
        }
        let mut index = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&off, &w) in offsets.iter().zip(&widths) {
                index.extend((0..w).map(|j| off + i * w + j));
            }
        }
        self.gather(flat, index, vec![m, total])
    }

    /// `[B·N, H·dh]` → `[B·H, N, dh]`.
    pub fn split_heads(&mut self, a: NodeId, tokens: usize, heads: usize) -> Result<NodeId> {
        let (rows, width) = self.dims2(a, "split_heads")?;
        if tokens == 0 || rows % tokens != 0 || heads == 0 || width % heads != 0 {
            return Err(Error::shape("split_heads", format!("[{rows},{width}] into N={tokens}, H={heads}")));
        }
        let (batch, dh) = (rows / tokens, width / heads);
        let mut index = Vec::with_capacity(rows * width);
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..tokens {
                    index.extend((0..dh).map(|e| (b * tokens + t) * width + h * dh + e));
                }
            }
        }
        self.gather(a, index, vec![batch * heads, tokens, dh])
    }

    /// `[B·H, N, dh]` → `[B·N, H·dh]`.
    pub fn merge_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId> {
        let (groups, tokens, dh) = match self.shape(a) {
            [g, n, e] => (*g, *n, *e),
            s => return Err(Error::shape("merge_heads", format!("expected 3-D, got {s:?}"))),
        };
        if heads == 0 || groups % heads != 0 {
            return Err(Error::shape("merge_heads", format!("{groups} groups, {heads} heads")));
        }
        let batch = groups / heads;
        let width = heads * dh;
        let mut index = Vec::with_capacity(groups * tokens * dh);
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    index.extend((0..dh).map(|e| ((b * heads + h) * tokens + t) * dh + e));
                }
            }
        }
        self.gather(a, index, vec![batch * tokens, width])
    }

    fn sequence_dims(&self, a: NodeId, tokens: usize, op: &'static str) -> Result<(usize, usize)> {
        let (rows, d) = self.dims2(a, op)?;
        if tokens == 0 || rows % tokens != 0 {
            return Err(Error::shape(op, format!("{rows} rows not divisible into sequences of {tokens}")));
        }
        Ok((rows / tokens, d))
    }

    /// Per-sequence mean over tokens `skip..N`: `[B·N, d]` → `[B, d]`.
    pub fn token_mean(&mut self, a: NodeId, tokens: usize, skip: usize) -> Result<NodeId> {
        let (batch, d) = self.sequence_dims(a, tokens, "token_mean")?;
        if skip >= tokens {
            return Err(Error::invalid("token_mean", "no tokens left to average"));
        }
        let inv = T::one() / T::of((tokens - skip) as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for t in skip..tokens {
                add_assign(o, &src[(b * tokens + t) * d..(b * tokens + t + 1) * d]);
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let v = Tensor::new(vec![batch, d], out)?;
        self.push("token_mean", v, Op::TokenMean { a, tokens, skip }, &[a])
    }

    /// Per-sequence, per-feature maximum over tokens: `[B·N, d]` → `[B, d]`.
    /// Ties resolve to the earliest token.
    pub fn token_max(&mut self, a: NodeId, tokens: usize) -> Result<NodeId> {
        let (batch, d) = self.sequence_dims(a, tokens, "token_max")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); batch * d];
        let mut argmax = vec![0usize; batch * d];
        for b in 0..batch {
            for j in 0..d {
                let mut best = b * tokens * d + j;
                for t in 1..tokens {
                    let idx = (b * tokens + t) * d + j;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[b * d + j] = src[best];
                argmax[b * d + j] = best;
            }
        }
        let v = Tensor::new(vec![batch, d], out)?;
        self.push("token_max", v, Op::TokenMax { a, argmax }, &[a])
    }

    /// Row `index` of every sequence: `[B·N, d]` → `[B, d]`.
    pub fn select_token(&mut self, a: NodeId, tokens: usize, index: usize) -> Result<NodeId> {
        let (batch, d) = self.sequence_dims(a, tokens, "select_token")?;
        if index >= tokens {
            return Err(Error::shape("select_token", format!("token {index} of {tokens}")));
        }
        let idx = (0..batch).flat_map(|b| (0..d).map(move |j| (b * tokens + index) * d + j)).collect();
        self.gather(a, idx, vec![batch, d])
    }

    /// Repeats each row `tokens` times: `[B, d]` → `[B·N, d]`.
    pub fn broadcast_tokens(&mut self, a: NodeId, tokens: usize) -> Result<NodeId> {
        let (batch, d) = self.dims2(a, "broadcast_tokens")?;
        let idx = (0..batch)
            .flat_map(|b| (0..tokens).flat_map(move |_| (0..d).map(move |j| b * d + j)))
            .collect();
        self.gather(a, idx, vec![batch * tokens, d])
    }

    /// Prepends `token [d]` to each sequence of `a [B·P, d]`.
    pub fn prepend_token(&mut self, a: NodeId, token: NodeId, patches: usize) -> Result<NodeId> {
        let (batch, d) = self.sequence_dims(a, patches, "prepend_token")?;
        if self.value(token).numel() != d {
            return Err(Error::shape("prepend_token", "token width differs from sequence width"));
        }
        let flat = self.concat(&[token, a], vec![d + batch * patches * d])?;
        let n = patches + 1;
        let mut idx = Vec::with_capacity(batch * n * d);
        for b in 0..batch {
            idx.extend(0..d);
            for t in 0..patches {
                idx.extend((0..d).map(|j| d + (b * patches + t) * d + j));
            }
        }
        self.gather(flat, idx, vec![batch * n, d])
    }

    /// Adds `tile [N, d]` to every sequence of `a [B·N, d]`.
    pub fn add_tiled(&mut self, a: NodeId, tile: NodeId) -> Result<NodeId> {
        let (tn, td) = self.dims2(tile, "add_tiled")?;
        let (rows, d) = self.dims2(a, "add_tiled")?;
        if td != d || rows % tn != 0 {
            return Err(Error::shape("add_tiled", format!("[{tn},{td}] onto [{rows},{d}]")));
        }
        let per = tn * td;
        let idx = (0..rows * d).map(|i| i % per).collect();
        let expanded = self.gather(tile, idx, vec![rows, d])?;
        self.add(a, expanded)
    }

    /// Mean softmax cross-entropy of `logits [B, C]` against soft `targets [B, C]`.
    pub fn cross_entropy_soft(&mut self, logits: NodeId, targets: Vec<T>) -> Result<NodeId> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b * c {
            return Err(Error::shape("cross_entropy", "targets do not match logits"));
        }
        let mut total = T::zero();
        for (row, q) in self.value(logits).data().chunks(c).zip(targets.chunks(c)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += row.iter().zip(q).map(|(&z, &qi)| qi * (lse - z)).sum::<T>();
        }
        let v = Tensor::scalar(total / T::of(b as f64));
        self.push("cross_entropy", v, Op::CrossEntropy { logits, targets }, &[logits])
    }

    /// Mean cross-entropy with integer labels and optional label smoothing.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], smoothing: T) -> Result<NodeId> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("{} labels for [{b},{c}]", labels.len())));
        }
        let off = smoothing / T::of(c as f64);
        let mut targets = vec![off; b * c];
        for (i, &l) in labels.iter().enumerate() {
            targets[i * c + l] += T::one() - smoothing;
        }
        self.cross_entropy_soft(logits, targets)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push("sum", v, Op::Sum { a }, &[a])
    }

    /// Back-propagates from a scalar `loss`. Gradients from any previous call
    /// are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    matmul_a_bt_acc(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul_at_b_acc(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..groups {
                        let g_g = &g[i * m * n..(i + 1) * m * n];
                        let b_g = &bd[i * k * n..(i + 1) * k * n];
                        let da_g = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            matmul_acc(g_g, b_g, da_g, m, n, k);
                        } else {
                            matmul_a_bt_acc(g_g, b_g, da_g, m, n, k);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..groups {
                        let g_g = &g[i * m * n..(i + 1) * m * n];
                        let a_g = &ad[i * m * k..(i + 1) * m * k];
                        let db_g = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            matmul_at_b_acc(g_g, a_g, db_g, m, n, k);
                        } else {
                            matmul_at_b_acc(a_g, g_g, db_g, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_assign(db, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.value(*b).data();
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, &gv), &y)| *d += gv * y);
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.value(*a).data();
                    db.iter_mut().zip(g).zip(av).for_each(|((d, &gv), &x)| *d += gv * x);
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *factor);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_assign(da, g);
                }
                let cols = self.value(*row).numel();
                if let Some(dr) = self.slot(grads, *row) {
                    for chunk in g.chunks(cols) {
                        add_assign(dr, chunk);
                    }
                }
            }
            Op::MulRow { a, row } => {
                let cols = self.value(*row).numel();
                let rv = self.value(*row).data();
                if let Some(da) = self.slot(grads, *a) {
                    for (dchunk, gchunk) in da.chunks_mut(cols).zip(g.chunks(cols)) {
                        dchunk.iter_mut().zip(gchunk).zip(rv).for_each(|((d, &gv), &r)| *d += gv * r);
                    }
                }
                let av = self.value(*a).data();
                if let Some(dr) = self.slot(grads, *row) {
                    for (achunk, gchunk) in av.chunks(cols).zip(g.chunks(cols)) {
                        dr.iter_mut().zip(gchunk).zip(achunk).for_each(|((d, &gv), &x)| *d += gv * x);
                    }
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).zip(av).for_each(|((d, &gv), &x)| *d += gv * gelu_grad(x));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gm = self.value(*gamma).data();
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for chunk in g.chunks(d) {
                        add_assign(dbeta, chunk);
                    }
                }
                if let Some(dgamma) = self.slot(grads, *gamma) {
                    for (gc, hc) in g.chunks(d).zip(xhat.chunks(d)) {
                        dgamma.iter_mut().zip(gc).zip(hc).for_each(|((dg, &gv), &h)| *dg += gv * h);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = T::one() / T::of(d as f64);
                    for (((dxc, gc), hc), &r) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd) {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for ((&gv, &gmv), &h) in gc.iter().zip(gm).zip(hc) {
                            let dh = gv * gmv;
                            mean_dh += dh;
                            mean_dh_h += dh * h;
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for (((dxv, &gv), &gmv), &h) in dxc.iter_mut().zip(gc).zip(gm).zip(hc) {
                            *dxv += r * (gv * gmv - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax { a, lambda } => {
                let cols = *node.value.shape().last().expect("non-empty");
                if let Some(da) = self.slot(grads, *a) {
                    for ((dc, gc), yc) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(node.value.data().chunks(cols)) {
                        let dot: T = gc.iter().zip(yc).map(|(&gv, &y)| gv * y).sum();
                        for ((d, &gv), &y) in dc.iter_mut().zip(gc).zip(yc) {
                            *d += *lambda * y * (gv - dot);
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (&i, &gv) in index.iter().zip(g) {
                        da[i] += gv;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        add_assign(dp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::TokenMean { a, tokens, skip } => {
                let d = node.value.shape()[1];
                let inv = T::one() / T::of((tokens - skip) as f64);
                if let Some(da) = self.slot(grads, *a) {
                    for (b, gc) in g.chunks(d).enumerate() {
                        for t in *skip..*tokens {
                            let row = &mut da[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                            row.iter_mut().zip(gc).for_each(|(r, &gv)| *r += gv * inv);
                        }
                    }
                }
            }
            Op::TokenMax { a, argmax } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        da[i] += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (b, c) = self.value(*logits).dims2().expect("matrix");
                let scale = g[0] / T::of(b as f64);
                let lv = self.value(*logits).data();
                if let Some(dl) = self.slot(grads, *logits) {
                    for ((dc, row), q) in dl.chunks_mut(c).zip(lv.chunks(c)).zip(targets.chunks(c)) {
                        let mut p = row.to_vec();
                        softmax_in_place(&mut p, T::one());
                        let qsum: T = q.iter().copied().sum();
                        for ((d, &pi), &qi) in dc.iter_mut().zip(&p).zip(q) {
                            *d += scale * (qsum * pi - qi);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
