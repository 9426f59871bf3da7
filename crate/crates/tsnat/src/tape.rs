//! Define-by-run reverse-mode autodiff on a Wengert tape.
//!
//! Every forward op executes immediately, records itself on the tape, and
//! returns a [`NodeId`] handle. [`Tape::backward`] replays the recorded ops in
//! reverse, accumulating gradients into each node's buffer. One tape serves
//! one forward pass; gradients for persistent parameters are harvested by the
//! caller afterwards.
//!
//! Calling [`Tape::backward`] twice without clearing accumulates gradients a
//! second time; persistent parameter gradients likewise accumulate across
//! passes until explicitly zeroed.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{mm_nn, mm_nt, mm_tn, sigmoid, softmax_row, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

enum Op {
    /// out = a · b, batch dims of `a` shared or matched by `b`
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    /// out = a · bᵀ over the last two dims
    MatmulNT { a: NodeId, b: NodeId, out: NodeId },
    AddSame { a: NodeId, b: NodeId, out: NodeId },
    /// bias broadcast over all leading dims
    AddBias { x: NodeId, bias: NodeId, out: NodeId },
    /// non-differentiable constant, suffix-broadcast against x
    AddConst { x: NodeId, out: NodeId },
    /// additive attention mask [B,Tq,Tk], broadcast over the head dim of x [B,H,Tq,Tk]
    AddMask { x: NodeId, out: NodeId },
    Scale { x: NodeId, c: f64, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Relu { x: NodeId, out: NodeId },
    Glu { x: NodeId, out: NodeId },
    SoftmaxLastDim { x: NodeId, out: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, out: NodeId },
    CrossEntropy { logits: NodeId, targets: Arc<Vec<u32>>, ignore_id: u32, out: NodeId },
    Embedding { table: NodeId, ids: Arc<Vec<u32>>, out: NodeId },
    UnfoldTime { x: NodeId, kernel: usize, stride: usize, pad: usize, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
    Permute { x: NodeId, axes: Vec<usize>, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    Dropout { x: NodeId, mask: Arc<Vec<f64>>, out: NodeId },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    steps: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, needs_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: &[f64], needs_grad: bool) -> NodeId {
        self.push_node(shape.to_vec(), data.to_vec(), needs_grad)
    }

    /// Register a tensor as a leaf; it wants gradients iff it carries a grad buffer.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.shape(), t.data(), t.requires_grad())
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient for a node, if any flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// Batched matrix product. `a` is [.., m, k]; `b` is [k, n] (shared across
    /// the batch) or [.., k, n] with identical batch dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (batch, m, k, n, b_shared) = self.matmul_dims(a, b, false)?;
        let mut data = vec![0.0; batch * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..batch {
            let boff = if b_shared { 0 } else { i * k * n };
            mm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[boff..boff + k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = self.matmul_out_shape(a, m, n);
        let ng = self.needs(a) || self.needs(b);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// Batched a · bᵀ: `a` is [.., m, k], `b` is [.., n, k] (or shared [n, k]).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (batch, m, k, n, b_shared) = self.matmul_dims(a, b, true)?;
        let mut data = vec![0.0; batch * m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..batch {
            let boff = if b_shared { 0 } else { i * n * k };
            mm_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[boff..boff + n * k],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = self.matmul_out_shape(a, m, n);
        let ng = self.needs(a) || self.needs(b);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::MatmulNT { a, b, out });
        Ok(out)
    }

    fn matmul_dims(
        &self,
        a: NodeId,
        b: NodeId,
        transposed: bool,
    ) -> Result<(usize, usize, usize, usize, bool), TensorError> {
        let as_ = &self.nodes[a.0].shape;
        let bs = &self.nodes[b.0].shape;
        let op: &'static str = if transposed { "matmul_nt" } else { "matmul" };
        let mismatch = || TensorError::ShapeMismatch {
            op,
            left: as_.clone(),
            right: bs.clone(),
        };
        if as_.len() < 2 || bs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (bk, n) = if transposed {
            (bs[bs.len() - 1], bs[bs.len() - 2])
        } else {
            (bs[bs.len() - 2], bs[bs.len() - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let a_batch = &as_[..as_.len() - 2];
        let b_batch = &bs[..bs.len() - 2];
        let b_shared = b_batch.is_empty();
        if !b_shared && a_batch != b_batch {
            return Err(mismatch());
        }
        Ok((a_batch.iter().product::<usize>().max(1), m, k, n, b_shared))
    }

    fn matmul_out_shape(&self, a: NodeId, m: usize, n: usize) -> Vec<usize> {
        let as_ = &self.nodes[a.0].shape;
        let mut shape = as_[..as_.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        shape
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::AddSame { a, b, out });
        Ok(out)
    }

    /// x [.., n] + bias [n], broadcast over leading dims.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let n = *self.nodes[x.0].shape.last().unwrap_or(&0);
        if self.nodes[bias.0].shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let bd = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, b)| x + b))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(bias);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::AddBias { x, bias, out });
        Ok(out)
    }

    /// Add a non-differentiable constant, broadcast as a shape suffix of x
    /// (e.g. positional encodings [T,d] onto [B,T,d]).
    pub fn add_const(&mut self, x: NodeId, values: &[f64]) -> NodeId {
        let xn = self.nodes[x.0].data.len();
        debug_assert!(!values.is_empty() && xn % values.len() == 0);
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(values.len())
            .flat_map(|chunk| chunk.iter().zip(values).map(|(a, c)| a + c))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::AddConst { x, out });
        out
    }

    /// Additive attention mask: x is [B,H,Tq,Tk], mask is [B,Tq,Tk] with
    /// entries 0 or -inf, broadcast over heads.
    pub fn add_mask(&mut self, x: NodeId, mask: &[f64]) -> NodeId {
        let s = &self.nodes[x.0].shape;
        debug_assert_eq!(s.len(), 4);
        let (b, h, tq, tk) = (s[0], s[1], s[2], s[3]);
        debug_assert_eq!(mask.len(), b * tq * tk);
        let mut data = self.nodes[x.0].data.clone();
        for bi in 0..b {
            let mrow = &mask[bi * tq * tk..(bi + 1) * tq * tk];
            for hi in 0..h {
                let off = (bi * h + hi) * tq * tk;
                for (v, m) in data[off..off + tq * tk].iter_mut().zip(mrow) {
                    *v += m;
                }
            }
        }
        let shape = s.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::AddMask { x, out });
        out
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Scale { x, c, out });
        out
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Relu { x, out });
        out
    }

    /// Gated linear unit over the last dim: first half ⊙ sigmoid(second half).
    pub fn glu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = &self.nodes[x.0].shape;
        let last = *s.last().unwrap_or(&0);
        if last == 0 || last % 2 != 0 {
            return Err(TensorError::BadLastDim {
                op: "glu",
                requirement: "an even size",
                shape: s.clone(),
            });
        }
        let d = last / 2;
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = d;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(last)
            .flat_map(|row| {
                let (val, gate) = row.split_at(d);
                val.iter()
                    .zip(gate)
                    .map(|(&v, &g)| v * sigmoid(g))
                    .collect::<Vec<_>>()
            })
            .collect();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Glu { x, out });
        Ok(out)
    }

    /// Stable softmax over the last dim (max-subtraction per row).
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let s = &self.nodes[x.0].shape;
        let last = (*s.last().unwrap_or(&1)).max(1);
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(last) {
            softmax_row(row);
        }
        let shape = s.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::SoftmaxLastDim { x, out });
        out
    }

    /// Per-row layer normalization over the last dim, affine with gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let n = *self.nodes[x.0].shape.last().unwrap_or(&0);
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[gamma.0].shape.clone(),
            });
        }
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(n)
            .flat_map(|row| {
                let (mean, inv_std) = row_moments(row, eps);
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - mean) * inv_std * gd[j] + bd[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::LayerNorm { x, gamma, beta, eps, out });
        Ok(out)
    }

    /// Mean over non-ignored positions of -log softmax(logits)[target].
    /// Logits are [.., V]; targets index the flattened rows.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        ignore_id: u32,
    ) -> Result<NodeId, TensorError> {
        let v = *self.nodes[logits.0].shape.last().unwrap_or(&0);
        let rows = self.nodes[logits.0].data.len() / v.max(1);
        if v == 0 || rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.nodes[logits.0].shape.clone(),
                right: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        let mut n_valid = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t as usize >= v {
                return Err(TensorError::TargetOutOfRange { id: t, vocab: v });
            }
            let row = &self.nodes[logits.0].data[r * v..(r + 1) * v];
            loss += crate::tensor::log_sum_exp(row) - row[t as usize];
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(TensorError::EmptyLoss);
        }
        loss /= n_valid as f64;
        let ng = self.needs(logits);
        let out = self.push_node(vec![], vec![loss], ng);
        self.steps.push(Op::CrossEntropy {
            logits,
            targets: Arc::new(targets.to_vec()),
            ignore_id,
            out,
        });
        Ok(out)
    }

    /// Gather rows of `table` [V, d] by id; out is [len(ids), d].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let ts = &self.nodes[table.0].shape;
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                left: ts.clone(),
                right: vec![ids.len()],
            });
        }
        let (v, d) = (ts[0], ts[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::TargetOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id as usize * d..(id as usize + 1) * d]);
        }
        let ng = self.needs(table);
        let out = self.push_node(vec![ids.len(), d], data, ng);
        self.steps.push(Op::Embedding {
            table,
            ids: Arc::new(ids.to_vec()),
            out,
        });
        Ok(out)
    }

    /// Sliding windows along the time axis: [.., T, C] -> [.., T', kernel*C]
    /// with zero padding, T' = (T + 2*pad - kernel)/stride + 1.
    pub fn unfold_time(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() < 2 || s[s.len() - 2] + 2 * pad < kernel {
            return Err(TensorError::ShapeMismatch {
                op: "unfold_time",
                left: s.clone(),
                right: vec![kernel, stride, pad],
            });
        }
        let (t, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product::<usize>().max(1);
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; batch * t_out * kernel * c];
        for bi in 0..batch {
            let src = &xd[bi * t * c..(bi + 1) * t * c];
            for to in 0..t_out {
                for j in 0..kernel {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let dst_off = ((bi * t_out + to) * kernel + j) * c;
                    let src_off = ti as usize * c;
                    data[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(t_out);
        shape.push(kernel * c);
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::UnfoldTime { x, kernel, stride, pad, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected: numel,
                actual: self.nodes[x.0].data.len(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape.to_vec(), data, ng);
        self.steps.push(Op::Reshape { x, out });
        Ok(out)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, TensorError> {
        let s = &self.nodes[x.0].shape;
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes.iter().all(|&a| {
                if a >= s.len() || seen[a] {
                    false
                } else {
                    seen[a] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                left: s.clone(),
                right: axes.to_vec(),
            });
        }
        let (shape, data) = permute_copy(&self.nodes[x.0].data, s, axes);
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Permute {
            x,
            axes: axes.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        let out = self.push_node(vec![], vec![s], ng);
        self.steps.push(Op::SumAll { x, out });
        out
    }

    /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
    /// p == 0 is recorded as an identity with no RNG draw.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl Rng) -> NodeId {
        debug_assert!((0.0..1.0).contains(&p));
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        let out = self.push_node(shape, data, ng);
        self.steps.push(Op::Dropout {
            x,
            mask: Arc::new(mask),
            out,
        });
        out
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss, seeded with d(loss)/d(loss) = 1.
    /// Results accumulate into every grad-requiring node reachable from
    /// `loss`, so a second call without clearing doubles the gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut sweep: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        sweep[loss.0] = Some(vec![1.0]);
        for op in self.steps.iter().rev() {
            self.backward_op(op, &mut sweep);
        }
        for (slot, s) in self.grads.iter_mut().zip(sweep) {
            if let Some(v) = s {
                match slot {
                    Some(g) => {
                        for (gi, vi) in g.iter_mut().zip(&v) {
                            *gi += vi;
                        }
                    }
                    None => *slot = Some(v),
                }
            }
        }
        Ok(())
    }

    fn take_out_grad(&self, grads: &[Option<Vec<f64>>], out: NodeId) -> Option<Vec<f64>> {
        if !self.nodes[out.0].needs_grad {
            return None;
        }
        grads[out.0].clone()
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Matmul { a, b, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let (batch, m, k, n, b_shared) = self.matmul_dims(*a, *b, false).unwrap();
                if self.needs(*a) {
                    // dA = dC · Bᵀ; mm_nt reads B [k,n] row-wise as the transpose
                    let mut d_a = vec![0.0; batch * m * k];
                    let bd = &self.nodes[b.0].data;
                    for i in 0..batch {
                        let boff = if b_shared { 0 } else { i * k * n };
                        mm_nt(
                            &d_out[i * m * n..(i + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut d_a[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, *a, &d_a);
                }
                if self.needs(*b) {
                    let bn = self.nodes[b.0].data.len();
                    let mut d_b = vec![0.0; bn];
                    let ad = &self.nodes[a.0].data;
                    for i in 0..batch {
                        let boff = if b_shared { 0 } else { i * k * n };
                        // dB = Aᵀ · dC
                        mm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &d_out[i * m * n..(i + 1) * m * n],
                            &mut d_b[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accum(grads, *b, &d_b);
                }
            }
            Op::MatmulNT { a, b, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let (batch, m, k, n, b_shared) = self.matmul_dims(*a, *b, true).unwrap();
                if self.needs(*a) {
                    // dA = dC · B  ([m,n]·[n,k])
                    let mut d_a = vec![0.0; batch * m * k];
                    let bd = &self.nodes[b.0].data;
                    for i in 0..batch {
                        let boff = if b_shared { 0 } else { i * n * k };
                        mm_nn(
                            &d_out[i * m * n..(i + 1) * m * n],
                            &bd[boff..boff + n * k],
                            &mut d_a[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, *a, &d_a);
                }
                if self.needs(*b) {
                    // dB = dCᵀ · A  ([n,m]·[m,k])
                    let bn = self.nodes[b.0].data.len();
                    let mut d_b = vec![0.0; bn];
                    let ad = &self.nodes[a.0].data;
                    for i in 0..batch {
                        let boff = if b_shared { 0 } else { i * n * k };
                        mm_tn(
                            &d_out[i * m * n..(i + 1) * m * n],
                            &ad[i * m * k..(i + 1) * m * k],
                            &mut d_b[boff..boff + n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, *b, &d_b);
                }
            }
            Op::AddSame { a, b, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                self.accum(grads, *a, &d_out);
                self.accum(grads, *b, &d_out);
            }
            Op::AddBias { x, bias, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                self.accum(grads, *x, &d_out);
                if self.needs(*bias) {
                    let n = self.nodes[bias.0].data.len();
                    let mut d_bias = vec![0.0; n];
                    for row in d_out.chunks(n) {
                        for (g, d) in d_bias.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    self.accum(grads, *bias, &d_bias);
                }
            }
            Op::AddConst { x, out } | Op::AddMask { x, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                self.accum(grads, *x, &d_out);
            }
            Op::Scale { x, c, out } => {
                let Some(mut d_out) = self.take_out_grad(grads, *out) else { return };
                d_out.iter_mut().for_each(|v| *v *= c);
                self.accum(grads, *x, &d_out);
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                if self.needs(*a) {
                    let d_a: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(d, v)| d * v)
                        .collect();
                    self.accum(grads, *a, &d_a);
                }
                if self.needs(*b) {
                    let d_b: Vec<f64> = d_out
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(d, v)| d * v)
                        .collect();
                    self.accum(grads, *b, &d_b);
                }
            }
            Op::Relu { x, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &d_x);
            }
            Op::Glu { x, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let last = *self.nodes[x.0].shape.last().unwrap();
                let d = last / 2;
                let xd = &self.nodes[x.0].data;
                let mut d_x = vec![0.0; xd.len()];
                for (r, drow) in d_out.chunks(d).enumerate() {
                    let xrow = &xd[r * last..(r + 1) * last];
                    let (val, gate) = xrow.split_at(d);
                    let dxrow = &mut d_x[r * last..(r + 1) * last];
                    for j in 0..d {
                        let s = sigmoid(gate[j]);
                        dxrow[j] = drow[j] * s;
                        dxrow[d + j] = drow[j] * val[j] * s * (1.0 - s);
                    }
                }
                self.accum(grads, *x, &d_x);
            }
            Op::SoftmaxLastDim { x, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let last = (*self.nodes[out.0].shape.last().unwrap_or(&1)).max(1);
                let yd = &self.nodes[out.0].data;
                let mut d_x = vec![0.0; yd.len()];
                for r in 0..yd.len() / last {
                    let y = &yd[r * last..(r + 1) * last];
                    let dy = &d_out[r * last..(r + 1) * last];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (dx, (yi, dyi)) in d_x[r * last..(r + 1) * last]
                        .iter_mut()
                        .zip(y.iter().zip(dy))
                    {
                        *dx = yi * (dyi - dot);
                    }
                }
                self.accum(grads, *x, &d_x);
            }
            Op::LayerNorm { x, gamma, beta, eps, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let n = self.nodes[gamma.0].data.len();
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let rows = xd.len() / n;
                let mut d_x = vec![0.0; xd.len()];
                let mut d_gamma = vec![0.0; n];
                let mut d_beta = vec![0.0; n];
                for r in 0..rows {
                    let xr = &xd[r * n..(r + 1) * n];
                    let dy = &d_out[r * n..(r + 1) * n];
                    let (mean, inv_std) = row_moments(xr, *eps);
                    // xhat = (x - mean) * inv_std ; g = dy * gamma
                    let mut g_mean = 0.0;
                    let mut gx_mean = 0.0;
                    for j in 0..n {
                        let xh = (xr[j] - mean) * inv_std;
                        let g = dy[j] * gd[j];
                        g_mean += g;
                        gx_mean += g * xh;
                        d_gamma[j] += dy[j] * xh;
                        d_beta[j] += dy[j];
                    }
                    g_mean /= n as f64;
                    gx_mean /= n as f64;
                    for j in 0..n {
                        let xh = (xr[j] - mean) * inv_std;
                        d_x[r * n + j] = (dy[j] * gd[j] - g_mean - xh * gx_mean) * inv_std;
                    }
                }
                self.accum(grads, *x, &d_x);
                self.accum(grads, *gamma, &d_gamma);
                self.accum(grads, *beta, &d_beta);
            }
            Op::CrossEntropy { logits, targets, ignore_id, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let v = *self.nodes[logits.0].shape.last().unwrap();
                let ld = &self.nodes[logits.0].data;
                let n_valid = targets.iter().filter(|&&t| t != *ignore_id).count() as f64;
                let scale = d_out[0] / n_valid;
                let mut d_logits = vec![0.0; ld.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_id {
                        continue;
                    }
                    let row = &ld[r * v..(r + 1) * v];
                    let drow = &mut d_logits[r * v..(r + 1) * v];
                    drow.copy_from_slice(row);
                    softmax_row(drow);
                    drow[t as usize] -= 1.0;
                    drow.iter_mut().for_each(|g| *g *= scale);
                }
                self.accum(grads, *logits, &d_logits);
            }
            Op::Embedding { table, ids, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let d = self.nodes[table.0].shape[1];
                let mut d_table = vec![0.0; self.nodes[table.0].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d_table[id as usize * d..(id as usize + 1) * d];
                    for (g, v) in dst.iter_mut().zip(&d_out[r * d..(r + 1) * d]) {
                        *g += v;
                    }
                }
                self.accum(grads, *table, &d_table);
            }
            Op::UnfoldTime { x, kernel, stride, pad, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let s = &self.nodes[x.0].shape;
                let (t, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch: usize = s[..s.len() - 2].iter().product::<usize>().max(1);
                let t_out = (t + 2 * pad - kernel) / stride + 1;
                let mut d_x = vec![0.0; self.nodes[x.0].data.len()];
                for bi in 0..batch {
                    for to in 0..t_out {
                        for j in 0..*kernel {
                            let ti = (to * stride + j) as isize - *pad as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let src_off = ((bi * t_out + to) * kernel + j) * c;
                            let dst_off = (bi * t + ti as usize) * c;
                            for (g, v) in d_x[dst_off..dst_off + c]
                                .iter_mut()
                                .zip(&d_out[src_off..src_off + c])
                            {
                                *g += v;
                            }
                        }
                    }
                }
                self.accum(grads, *x, &d_x);
            }
            Op::Reshape { x, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                self.accum(grads, *x, &d_out);
            }
            Op::Permute { x, axes, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, d_x) = permute_copy(&d_out, &self.nodes[out.0].shape, &inverse);
                self.accum(grads, *x, &d_x);
            }
            Op::SumAll { x, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let d_x = vec![d_out[0]; self.nodes[x.0].data.len()];
                self.accum(grads, *x, &d_x);
            }
            Op::Dropout { x, mask, out } => {
                let Some(d_out) = self.take_out_grad(grads, *out) else { return };
                let d_x: Vec<f64> = d_out.iter().zip(mask.iter()).map(|(d, m)| d * m).collect();
                self.accum(grads, *x, &d_x);
            }
        }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // strides of the input, then reorder to walk the output linearly
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grads, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let b = tape.leaf(&[2, 2], &[3.0, -1.5, 2.0, 0.25], false);
        let out = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(out), &[3.0, -1.5, 2.0, 0.25]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[1, 2], &[1.0, 2.0], false);
        let b = tape.leaf(&[2, 1], &[3.0, 4.0], false);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3], &[0.0; 6], false);
        let b = tape.leaf(&[2, 2], &[0.0; 4], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let report = check_grads(&[a, b], H, |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_all(c)
        });
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn batched_matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // batched × batched
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 4, 2], &mut rng);
        let r = check_grads(&[a, b], H, |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_all(c)
        });
        assert!(r.max_rel_err < 1e-6, "batched nn: {}", r.max_rel_err);

        // batched × shared 2-D
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[4, 5], &mut rng);
        let r = check_grads(&[a, b], H, |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_all(c)
        });
        assert!(r.max_rel_err < 1e-6, "shared nn: {}", r.max_rel_err);

        // a · bᵀ
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 5, 4], &mut rng);
        let r = check_grads(&[a, b], H, |t, ids| {
            let c = t.matmul_nt(ids[0], ids[1]).unwrap();
            t.sum_all(c)
        });
        assert!(r.max_rel_err < 1e-6, "nt: {}", r.max_rel_err);
    }

    #[test]
    fn matmul_nt_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[5, 4], &mut rng);
        let mut tape = Tape::new();
        let an = tape.leaf_tensor(&a);
        let bn = tape.leaf_tensor(&b);
        let nt = tape.matmul_nt(an, bn).unwrap();
        let bt = tape.permute(bn, &[1, 0]).unwrap();
        let nn = tape.matmul(an, bt).unwrap();
        assert_eq!(tape.value(nt), tape.value(nn));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], &[0.0, 0.0, 0.0], false);
        let y = tape.softmax_lastdim(x);
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.leaf(&[2], &[1000.0, 0.0], false);
        let y = tape.softmax_lastdim(x);
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = rand_tensor(&[4, 7], &mut rng);
            let mut tape = Tape::new();
            let id = tape.leaf_tensor(&x);
            let y = tape.softmax_lastdim(id);
            for row in tape.value(y).chunks(7) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[5], &mut rng);
        // row j of the Jacobian via a one-hot readout
        for j in 0..5 {
            let mut onehot = vec![0.0; 5];
            onehot[j] = 1.0;
            let r = check_grads(std::slice::from_ref(&x), H, |t, ids| {
                let y = t.softmax_lastdim(ids[0]);
                let w = t.leaf(&[5], &onehot, false);
                let p = t.mul(y, w).unwrap();
                t.sum_all(p)
            });
            assert!(r.max_rel_err < 1e-5, "row {j}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn layer_norm_zero_variance_guard() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], &[5.0, 5.0, 5.0], false);
        let g = tape.leaf(&[3], &[1.0, 1.0, 1.0], false);
        let b = tape.leaf(&[3], &[0.0, 0.0, 0.0], false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_hand_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], &[1.0, 3.0], false);
        let g = tape.leaf(&[2], &[1.0, 1.0], false);
        let b = tape.leaf(&[2], &[0.0, 0.0], false);
        let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-6);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_statistics_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[4, 8], &mut rng);
        let mut tape = Tape::new();
        let xn = tape.leaf_tensor(&x);
        let g = tape.leaf(&[8], &[1.0; 8], false);
        let b = tape.leaf(&[8], &[0.0; 8], false);
        let y = tape.layer_norm(xn, g, b, 1e-12).unwrap();
        for row in tape.value(y).chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[8], &mut rng);
        let g = rand_tensor(&[8], &mut rng);
        let b = rand_tensor(&[8], &mut rng);
        let r = check_grads(&[x, g, b], H, |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let w = t.leaf(&[8], &[0.3, -1.1, 0.7, 0.2, -0.5, 1.3, -0.9, 0.4], false);
            let p = t.mul(y, w).unwrap();
            t.sum_all(p)
        });
        assert!(r.max_rel_err < 1e-5, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn glu_gate_behaviour() {
        let mut tape = Tape::new();
        // gate half all zeros → value/2
        let x = tape.leaf(&[6], &[1.0, -2.0, 3.0, 0.0, 0.0, 0.0], false);
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, -1.0, 1.5]);

        // gate saturation
        let x = tape.leaf(&[2], &[1.0, 1000.0], false);
        let y = tape.glu(x).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-12);
        let x = tape.leaf(&[2], &[1.0, -1000.0], false);
        let y = tape.glu(x).unwrap();
        assert!(tape.value(y)[0].abs() < 1e-12);
    }

    #[test]
    fn glu_odd_last_dim_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[3], &[1.0, 2.0, 3.0], false);
        assert!(matches!(
            tape.glu(x),
            Err(TensorError::BadLastDim { op: "glu", .. })
        ));
    }

    #[test]
    fn glu_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[6], &mut rng);
        let r = check_grads(std::slice::from_ref(&x), H, |t, ids| {
            let y = t.glu(ids[0]).unwrap();
            let w = t.leaf(&[3], &[1.0, -0.7, 0.4], false);
            let p = t.mul(y, w).unwrap();
            t.sum_all(p)
        });
        assert!(r.max_rel_err < 1e-5, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        // logits favoring the target by a margin M: loss = ln(1 + (V-1)e^-M) → 0
        let mut prev = f64::INFINITY;
        for m in [5.0, 20.0, 50.0] {
            let mut tape = Tape::new();
            let logits = tape.leaf(&[1, 4], &[m, 0.0, 0.0, 0.0], false);
            let loss = tape.cross_entropy(logits, &[0], u32::MAX).unwrap();
            let v = tape.scalar_value(loss);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[2, 4], &[0.0; 8], false);
        let loss = tape.cross_entropy(logits, &[1, 3], u32::MAX).unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = rand_tensor(&[3, 5], &mut rng);
        let targets = [2u32, 0, 4];

        let mut tape = Tape::new();
        let ln = tape.leaf(logits.shape(), logits.data(), true);
        let loss = tape.cross_entropy(ln, &targets, u32::MAX).unwrap();
        tape.backward(loss).unwrap();

        // independent recomputation with plain exp sums
        let mut expect = 0.0;
        let mut expect_grad = vec![0.0; 15];
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += z.ln() - row[t as usize];
            for j in 0..5 {
                expect_grad[r * 5 + j] = (row[j].exp() / z - if j == t as usize { 1.0 } else { 0.0 }) / 3.0;
            }
        }
        expect /= 3.0;
        assert!(rel_err(tape.scalar_value(loss), expect) < 1e-10);
        for (a, e) in tape.grad(ln).unwrap().iter().zip(&expect_grad) {
            assert!(rel_err(*a, *e) < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn cross_entropy_ignored_positions_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = rand_tensor(&[4, 5], &mut rng);
        let pad = 0u32;

        let mut tape = Tape::new();
        let ln = tape.leaf(logits.shape(), logits.data(), true);
        let loss = tape.cross_entropy(ln, &[2, pad, 3, pad], pad).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(ln).unwrap();
        assert_eq!(&grad[5..10], &[0.0; 5]);
        assert_eq!(&grad[15..20], &[0.0; 5]);

        // loss equals the two-row version
        let mut tape2 = Tape::new();
        let rows: Vec<f64> = [&logits.data()[0..5], &logits.data()[10..15]].concat();
        let ln2 = tape2.leaf(&[2, 5], &rows, false);
        let loss2 = tape2.cross_entropy(ln2, &[2, 3], pad).unwrap();
        assert_eq!(tape.scalar_value(loss), tape2.scalar_value(loss2));
    }

    #[test]
    fn cross_entropy_all_ignored_is_empty_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[2, 3], &[0.0; 6], false);
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 0], 0),
            Err(TensorError::EmptyLoss)
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(&[4], &[0.3, -1.0, 2.0, 7.0], true);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2w() {
        let data = [0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let w = tape.leaf(&[3], &data, true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(w).unwrap().iter().zip(&data) {
            assert!((g - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(&[2], &[1.0, 2.0], true);
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(&[2], &[1.0, 2.0], true);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn remaining_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        // add + add_bias + scale
        let x = rand_tensor(&[3, 4], &mut rng);
        let y = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let r = check_grads(&[x, y, b], H, |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let s = t.add_bias(s, ids[2]).unwrap();
            let s = t.scale(s, -0.37);
            t.sum_all(s)
        });
        assert!(r.max_rel_err < 1e-6, "add chain: {}", r.max_rel_err);

        // relu (inputs nudged away from the kink)
        let mut x = rand_tensor(&[10], &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.1;
            }
        }
        let r = check_grads(std::slice::from_ref(&x), H, |t, ids| {
            let y = t.relu(ids[0]);
            let w = t.leaf(&[10], &[0.9; 10], false);
            let p = t.mul(y, w).unwrap();
            t.sum_all(p)
        });
        assert!(r.max_rel_err < 1e-6, "relu: {}", r.max_rel_err);

        // embedding
        let table = rand_tensor(&[6, 3], &mut rng);
        let r = check_grads(std::slice::from_ref(&table), H, |t, ids| {
            let e = t.embedding(ids[0], &[4, 0, 4, 2]).unwrap();
            let s = t.softmax_lastdim(e);
            t.sum_all(s)
        });
        assert!(r.max_rel_err < 1e-5, "embedding: {}", r.max_rel_err);

        // unfold_time + reshape + permute
        let x = rand_tensor(&[2, 6, 3], &mut rng);
        let w = rand_tensor(&[9, 4], &mut rng);
        let r = check_grads(&[x, w], H, |t, ids| {
            let u = t.unfold_time(ids[0], 3, 2, 1).unwrap();
            let c = t.matmul(u, ids[1]).unwrap();
            let p = t.permute(c, &[1, 0, 2]).unwrap();
            let f = t.reshape(p, &[12, 2]).unwrap();
            let g = t.glu(f).unwrap();
            t.sum_all(g)
        });
        assert!(r.max_rel_err < 1e-5, "unfold chain: {}", r.max_rel_err);

        // add_const and add_mask are pass-through adds
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let r = check_grads(std::slice::from_ref(&x), H, |t, ids| {
            let c = t.add_const(ids[0], &[0.5; 9]);
            let m = t.add_mask(c, &[0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY]);
            let s = t.softmax_lastdim(m);
            t.sum_all(s)
        });
        assert!(r.max_rel_err < 1e-5, "mask chain: {}", r.max_rel_err);

        // dropout with re-seeded mask
        let x = rand_tensor(&[12], &mut rng);
        let r = check_grads(std::slice::from_ref(&x), H, |t, ids| {
            let mut drng = ChaCha8Rng::seed_from_u64(99);
            let d = t.dropout(ids[0], 0.4, &mut drng);
            t.sum_all(d)
        });
        assert!(r.max_rel_err < 1e-6, "dropout: {}", r.max_rel_err);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&[4, 6], &mut rng);
        let w = rand_tensor(&[6, 6], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xn = tape.leaf_tensor(&x);
            let wn = tape.leaf_tensor(&w);
            let h = tape.matmul(xn, wn).unwrap();
            let s = tape.softmax_lastdim(h);
            tape.value(s).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 1, 2, 2], &[0.3, -0.7, 1.1, 0.2], true);
        // causal mask for 2 positions
        let m = [0.0, f64::NEG_INFINITY, 0.0, 0.0];
        let masked = tape.add_mask(x, &m);
        let w = tape.softmax_lastdim(masked);
        let v = tape.value(w);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);

        // gradient through the masked position is exactly zero
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap()[1], 0.0);
    }
}
