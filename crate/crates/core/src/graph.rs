//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node
//! holding its output value and a zeroed gradient buffer; [`Graph::backward`]
//! walks the tape in reverse and accumulates d(loss)/d(node) for every node.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Attention-weight mask for [`Graph::softmax_rows`].
#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    /// Row i may only attend to columns j <= i.
    pub causal: bool,
    /// Per-batch valid key count; columns at or beyond it are masked.
    pub valid_lens: Option<Vec<usize>>,
}

impl AttnMask {
    pub fn causal() -> Self {
        AttnMask {
            causal: true,
            valid_lens: None,
        }
    }

    fn allows(&self, batch: usize, row: usize, col: usize) -> bool {
        if self.causal && col > row {
            return false;
        }
        if let Some(lens) = &self.valid_lens {
            // Masks key columns in the padding tail. No row ends up empty:
            // every row may still attend to the valid prefix (lens >= 1).
            if col >= lens[batch] {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [r x d] plus a broadcast [d] row.
    AddRow(usize, usize),
    Scale(usize, f32),
    Matmul(usize, usize),
    /// Batched matmul over the leading dim: [b,m,k] x [b,k,n].
    Bmm(usize, usize),
    TransposeLast(usize),
    Reshape(usize),
    /// Slice of the last dim: columns [start, start+len).
    SliceLast {
        input: usize,
        start: usize,
        len: usize,
    },
    /// Concatenation of equal-leading-shape tensors along the last dim.
    ConcatLast(Vec<usize>),
    Gelu(usize),
    Relu(usize),
    /// Masked entries are exactly 0 in the output, which keeps their
    /// gradient 0 as well; the mask itself is not needed in backward.
    Softmax(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
    },
    /// Gather rows of a [vocab x d] table.
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    /// Mean negative log-softmax over non-ignored positions. Scalar output.
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        ignore: i64,
    },
    Sum(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f32>,
    /// Op-specific cache (softmax probs for cross-entropy).
    aux: Option<Vec<f32>>,
}

/// Reverse-mode tape. Topological order is construction order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            op,
            value,
            grad,
            aux: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf (parameter or input) node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let d = ta.last_dim();
        if tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a.0, bias.0), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a.0, c), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Matmul(a.0, b.0), value))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_nn(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(Op::Bmm(a.0, b.0), value))
    }

    /// Swap the last two dims (2-d transpose, batched for rank 3).
    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(
                "transpose needs rank >= 2".to_string(),
            ));
        }
        let value = transpose_last_tensor(ta);
        Ok(self.push(Op::TransposeLast(a.0), value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(a.0), value))
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let d = ta.last_dim();
        if start + len > d || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) out of range for last dim {d}",
                start + len
            )));
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::SliceLast {
                input: a.0,
                start,
                len,
            },
            value,
        ))
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".to_string()));
        }
        let lead = self.nodes[parts[0].0].value.shape()[..self.nodes[parts[0].0].value.rank() - 1]
            .to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: self.nodes[parts[0].0].value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.last_dim());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::ConcatLast(parts.iter().map(|p| p.0).collect()), value))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| gelu_tanh(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a.0), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(a.0), value)
    }

    /// Row-wise softmax over the last dim, numerically stabilized by row-max
    /// subtraction. Masked entries come out exactly 0.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<AttnMask>) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let n = ta.last_dim();
        let rows = ta.rows();
        if mask.is_some() {
            let s = ta.shape();
            let (rows_per_batch, cols) = (s[s.len() - 2], s[s.len() - 1]);
            if mask.as_ref().unwrap().causal && rows_per_batch != cols {
                return Err(Error::ShapeMismatch {
                    op: "softmax causal mask",
                    left: s.to_vec(),
                    right: vec![cols, cols],
                });
            }
        }
        let rows_per_batch = if ta.rank() >= 2 {
            ta.shape()[ta.rank() - 2]
        } else {
            1
        };
        let mut data = vec![0.0f32; rows * n];
        for r in 0..rows {
            let batch = r / rows_per_batch;
            let row_in_batch = r % rows_per_batch;
            let src = ta.row(r);
            let dst = &mut data[r * n..(r + 1) * n];
            let mut max = f32::NEG_INFINITY;
            for j in 0..n {
                let allowed = mask
                    .as_ref()
                    .map(|m| m.allows(batch, row_in_batch, j))
                    .unwrap_or(true);
                if allowed && src[j] > max {
                    max = src[j];
                }
            }
            let mut sum = 0.0f64;
            for j in 0..n {
                let allowed = mask
                    .as_ref()
                    .map(|m| m.allows(batch, row_in_batch, j))
                    .unwrap_or(true);
                if allowed {
                    let e = (src[j] - max).exp();
                    dst[j] = e;
                    sum += e as f64;
                }
            }
            let inv = (1.0 / sum) as f32;
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax(a.0), value))
    }

    /// Per-row layer norm over the last dim with affine gain/bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tg, tb) = (
            &self.nodes[a.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = ta.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: ta.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = ta.rows();
        let mut data = vec![0.0f32; rows * d];
        for r in 0..rows {
            let src = ta.row(r);
            let (mean, var) = row_mean_var(src);
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let dst = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                dst[j] = (src[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            Op::LayerNorm {
                input: a.0,
                gain: gain.0,
                bias: bias.0,
            },
            value,
        ))
    }

    /// Gather rows `ids` of a [vocab x d] table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(Error::InvalidArgument(
                "embedding table must be 2-d".to_string(),
            ));
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Mean negative log-softmax of the target class over non-ignored rows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[i64], ignore: i64) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let vocab = tl.shape()[1] as i64;
        let mut count = 0usize;
        let mut loss = 0.0f64;
        let mut probs = vec![0.0f32; tl.numel()];
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &v in row {
                sum += ((v - max) as f64).exp();
            }
            let prow = &mut probs[i * row.len()..(i + 1) * row.len()];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / sum) as f32;
            }
            if t == ignore {
                continue;
            }
            if t < 0 || t >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: t as usize,
                    vocab: vocab as usize,
                });
            }
            loss -= (row[t as usize] - max) as f64 - sum.ln();
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: every position is ignored".to_string(),
            ));
        }
        let value = Tensor::new(vec![1], vec![(loss / count as f64) as f32])?;
        let id = self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
            },
            value,
        );
        self.nodes[id.0].aux = Some(probs);
        Ok(id)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum();
        let value = Tensor::new(vec![1], vec![total as f32]).unwrap();
        self.push(Op::Sum(a.0), value)
    }

    /// Populate gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.propagate(idx);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = self.nodes[idx].grad.clone();
                add_into(&mut self.nodes[a].grad, &g);
                add_into(&mut self.nodes[b].grad, &g);
            }
            Op::Sub(a, b) => {
                let g = self.nodes[idx].grad.clone();
                add_into(&mut self.nodes[a].grad, &g);
                for (dst, &s) in self.nodes[b].grad.iter_mut().zip(&g) {
                    *dst -= s;
                }
            }
            Op::Mul(a, b) => {
                let g = self.nodes[idx].grad.clone();
                let va = self.nodes[a].value.data().to_vec();
                let vb = self.nodes[b].value.data().to_vec();
                for ((dst, &gv), &bv) in self.nodes[a].grad.iter_mut().zip(&g).zip(&vb) {
                    *dst += gv * bv;
                }
                for ((dst, &gv), &av) in self.nodes[b].grad.iter_mut().zip(&g).zip(&va) {
                    *dst += gv * av;
                }
            }
            Op::AddRow(a, bias) => {
                let g = self.nodes[idx].grad.clone();
                add_into(&mut self.nodes[a].grad, &g);
                let d = self.nodes[bias].value.numel();
                for chunk in g.chunks(d) {
                    for (dst, &s) in self.nodes[bias].grad.iter_mut().zip(chunk) {
                        *dst += s;
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = self.nodes[idx].grad.clone();
                for (dst, &s) in self.nodes[a].grad.iter_mut().zip(&g) {
                    *dst += s * c;
                }
            }
            Op::Matmul(a, b) => {
                let g = self.nodes[idx].grad.clone();
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = dC * B^T
                let mut da = vec![0.0f32; m * k];
                matmul_nt(&g, self.nodes[b].value.data(), m, n, k, &mut da);
                add_into(&mut self.nodes[a].grad, &da);
                // dB = A^T * dC
                let mut db = vec![0.0f32; k * n];
                matmul_tn(self.nodes[a].value.data(), &g, m, k, n, &mut db);
                add_into(&mut self.nodes[b].grad, &db);
            }
            Op::Bmm(a, b) => {
                let g = self.nodes[idx].grad.clone();
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut da = vec![0.0f32; bsz * m * k];
                let mut db = vec![0.0f32; bsz * k * n];
                for i in 0..bsz {
                    matmul_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &self.nodes[b].value.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    matmul_tn(
                        &self.nodes[a].value.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                add_into(&mut self.nodes[a].grad, &da);
                add_into(&mut self.nodes[b].grad, &db);
            }
            Op::TransposeLast(a) => {
                let gt = Tensor::new(
                    self.nodes[idx].value.shape().to_vec(),
                    self.nodes[idx].grad.clone(),
                )
                .expect("grad shape matches");
                let back = transpose_last_tensor(&gt);
                add_into(&mut self.nodes[a].grad, back.data());
            }
            Op::Reshape(a) => {
                let g = self.nodes[idx].grad.clone();
                add_into(&mut self.nodes[a].grad, &g);
            }
            Op::SliceLast { input, start, len } => {
                let g = self.nodes[idx].grad.clone();
                let d = self.nodes[input].value.last_dim();
                let rows = self.nodes[input].value.rows();
                for i in 0..rows {
                    let dst = &mut self.nodes[input].grad[i * d + start..i * d + start + len];
                    for (x, &s) in dst.iter_mut().zip(&g[i * len..(i + 1) * len]) {
                        *x += s;
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let g = self.nodes[idx].grad.clone();
                let total = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.last_dim();
                    for i in 0..rows {
                        let src = &g[i * total + offset..i * total + offset + w];
                        let dst = &mut self.nodes[p].grad[i * w..(i + 1) * w];
                        for (x, &s) in dst.iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                    offset += w;
                }
            }
            Op::Gelu(a) => {
                let g = self.nodes[idx].grad.clone();
                let va = self.nodes[a].value.data().to_vec();
                for ((dst, &gv), &x) in self.nodes[a].grad.iter_mut().zip(&g).zip(&va) {
                    *dst += gv * gelu_tanh_grad(x);
                }
            }
            Op::Relu(a) => {
                let g = self.nodes[idx].grad.clone();
                let va = self.nodes[a].value.data().to_vec();
                for ((dst, &gv), &x) in self.nodes[a].grad.iter_mut().zip(&g).zip(&va) {
                    if x > 0.0 {
                        *dst += gv;
                    }
                }
            }
            Op::Softmax(input) => {
                let g = self.nodes[idx].grad.clone();
                let y = self.nodes[idx].value.data().to_vec();
                let n = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.rows();
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv as f64 * gv as f64)
                        .sum();
                    let dst = &mut self.nodes[input].grad[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] += yr[j] * (gr[j] - dot as f32);
                    }
                }
            }
            Op::LayerNorm { input, gain, bias } => {
                let g = self.nodes[idx].grad.clone();
                let d = self.nodes[input].value.last_dim();
                let rows = self.nodes[input].value.rows();
                let x = self.nodes[input].value.data().to_vec();
                let gains = self.nodes[gain].value.data().to_vec();
                let mut dx = vec![0.0f32; rows * d];
                let mut dgain = vec![0.0f32; d];
                let mut dbias = vec![0.0f32; d];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, var) = row_mean_var(xr);
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gains[j];
                        mean_dxhat += dxhat as f64;
                        mean_dxhat_xhat += dxhat as f64 * xhat as f64;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let dst = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gains[j];
                        dst[j] = inv_std
                            * (dxhat - mean_dxhat as f32 - xhat * mean_dxhat_xhat as f32);
                    }
                }
                add_into(&mut self.nodes[input].grad, &dx);
                add_into(&mut self.nodes[gain].grad, &dgain);
                add_into(&mut self.nodes[bias].grad, &dbias);
            }
            Op::Embedding { table, ids } => {
                let g = self.nodes[idx].grad.clone();
                let d = self.nodes[table].value.last_dim();
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut self.nodes[table].grad[id * d..(id + 1) * d];
                    for (x, &s) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *x += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
            } => {
                let gscalar = self.nodes[idx].grad[0];
                let probs = self.nodes[idx].aux.as_ref().expect("probs cached").clone();
                let vocab = self.nodes[logits].value.last_dim();
                let count = targets.iter().filter(|&&t| t != ignore).count() as f32;
                for (i, &t) in targets.iter().enumerate() {
                    if t == ignore {
                        continue;
                    }
                    let dst = &mut self.nodes[logits].grad[i * vocab..(i + 1) * vocab];
                    let prow = &probs[i * vocab..(i + 1) * vocab];
                    for (j, (x, &p)) in dst.iter_mut().zip(prow).enumerate() {
                        let indicator = if j as i64 == t { 1.0 } else { 0.0 };
                        *x += gscalar * (p - indicator) / count;
                    }
                }
            }
            Op::Sum(a) => {
                let gscalar = self.nodes[idx].grad[0];
                for dst in self.nodes[a].grad.iter_mut() {
                    *dst += gscalar;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_mean_var(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var: f64 = row
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean as f32, var as f32)
}

fn transpose_last_tensor(t: &Tensor) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let (m, n) = (s[rank - 2], s[rank - 1]);
    let batch = t.numel() / (m * n);
    let mut data = vec![0.0f32; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape[rank - 2] = n;
    shape[rank - 1] = m;
    Tensor::new(shape, data).expect("transpose preserves numel")
}

pub fn gelu_tanh(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_tanh_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Mean negative log-softmax computed fully in f64 from f32 logits.
///
/// Used as the independent oracle side of gradient checks: the forward pass
/// under test may be f32 throughout, but the scalar fed into the central
/// difference should not lose the perturbation to f32 rounding.
pub fn cross_entropy_scalar_f64(logits: &Tensor, targets: &[i64], ignore: i64) -> f64 {
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        loss += lse - row[t as usize] as f64;
        count += 1;
    }
    debug_assert!(count > 0);
    loss / count as f64
}

/// Picks, per parameter group, the `per_group` coordinates with the largest
/// analytic gradient magnitude. Near-zero gradients drown in f32 forward
/// noise and say nothing about the correctness of the backward pass.
pub fn top_magnitude_coords(analytic: &[Vec<f32>], per_group: usize) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (p, grads) in analytic.iter().enumerate() {
        let mut idx: Vec<usize> = (0..grads.len()).collect();
        idx.sort_by(|&a, &b| {
            grads[b]
                .abs()
                .partial_cmp(&grads[a].abs())
                .expect("finite gradients")
        });
        coords.extend(idx.into_iter().take(per_group).map(|i| (p, i)));
    }
    coords
}

/// Max relative error between analytic gradients and central differences,
/// sampled at `coords` (pairs of parameter index and flat element index).
///
/// `loss_fn` must recompute the forward pass from the given parameter set;
/// it is the independent side of the check and never touches the tape that
/// produced `analytic`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut [Tensor],
    analytic: &[Vec<f32>],
    coords: &[(usize, usize)],
    epsilon: f32,
) -> f32
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut worst = 0.0f32;
    for &(p, i) in coords {
        let orig = params[p].data()[i];
        // The f32 parameter quantizes the step, so divide by the step that
        // was actually taken rather than by 2*epsilon.
        let plus = orig + epsilon;
        let minus = orig - epsilon;
        params[p].data_mut()[i] = plus;
        let up = loss_fn(params);
        params[p].data_mut()[i] = minus;
        let down = loss_fn(params);
        params[p].data_mut()[i] = orig;
        let numeric = ((up - down) / (plus as f64 - minus as f64)) as f32;
        let a = analytic[p][i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
