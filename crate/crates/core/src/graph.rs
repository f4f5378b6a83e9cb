//! Reverse-mode autodiff over a linear tape.
//!
//! Forward operations append nodes to the tape; `backward` replays it in
//! reverse, visiting every node once. Gradients accumulate additively across
//! uses and are exported into a [`ParamStore`] by parameter name. Nodes whose
//! gradient buffer was never touched are dead for the loss and are skipped.

use std::sync::Arc;

use crate::attention::{
    gelu_grad_from, gelu_with_tanh, masked_softmax_rows, rotary_rotate,
    softmax_rows_backward, softmax_rows_backward_inplace, softmax_rows_inplace, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::fastmath::fast_exp;
use crate::mask::MaskSpec;
use crate::params::ParamStore;
use crate::tensor::{dgemm_strided, gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    /// A · Bᵀ with B stored untransposed.
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// Row-broadcast bias add: a[m×k] + bias[k].
    AddBias { a: usize, bias: usize },
    /// Saves the inner tanh values so backward avoids recomputing them.
    Gelu { a: usize, saved_tanh: Vec<f64> },
    /// Backward needs only the output probabilities; masked entries carry
    /// exact zeros there, so the mask itself is not retained.
    MaskedSoftmax { a: usize },
    /// Fused multi-head attention core over already-projected q/k/v streams:
    /// per-head strided gemms with the 1/√d_k scale folded into the score
    /// product, optional rotary rotation of q/k, masked row softmax, and the
    /// head outputs written into their feature slices. Saves the per-head
    /// probabilities for backward.
    AttendHeads {
        q: usize,
        k: usize,
        v: usize,
        num_heads: usize,
        q_pos: Option<Arc<Vec<usize>>>,
        kv_pos: Option<Arc<Vec<usize>>>,
        probs: Vec<Tensor>,
    },
    LayerNorm { a: usize, gain: usize, bias: usize },
    SliceRows { a: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    GatherRows { table: usize, ids: Arc<Vec<usize>> },
    Rotary { a: usize, positions: Arc<Vec<usize>> },
    SumAll { a: usize },
    CrossEntropyMean { logits: usize, targets: Arc<Vec<usize>> },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    params: Vec<(String, usize)>,
    registered: std::collections::BTreeMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None });
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that participates in the forward pass only.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a named parameter; its gradient is exported by
    /// [`Graph::export_grads`]. Registering the same name twice returns the
    /// existing node so shared weights accumulate naturally.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&idx) = self.registered.get(name) {
            return Ok(NodeId(idx));
        }
        let value = store.value(name)?.clone();
        let id = self.push(value, Op::Leaf);
        self.registered.insert(name.to_string(), id.0);
        self.params.push((name.to_string(), id.0));
        Ok(id)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (kb, n) = self.nodes[b.0].value.dims2()?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![kb, n],
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nn(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (n, kb) = self.nodes[b.0].value.dims2()?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, kb],
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm_nt(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMulNt { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Add { a: a.0, b: b.0 },
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Mul { a: a.0, b: b.0 },
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Scale { a: a.0, c },
        )
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let blen = self.nodes[bias.0].value.numel();
        if blen != k || self.nodes[bias.0].value.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vec![m, k],
                right: self.nodes[bias.0].value.shape().to_vec(),
            });
        }
        let bdata = self.nodes[bias.0].value.data();
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..m {
            for j in 0..k {
                out.data_mut()[r * k + j] += bdata[j];
            }
        }
        Ok(self.push(out, Op::AddBias { a: a.0, bias: bias.0 }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let numel = self.nodes[a.0].value.numel();
        let mut data = Vec::with_capacity(numel);
        let mut saved = Vec::with_capacity(numel);
        for &x in self.nodes[a.0].value.data() {
            let (y, t) = gelu_with_tanh(x);
            data.push(y);
            saved.push(t);
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Gelu {
                a: a.0,
                saved_tanh: saved,
            },
        )
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: &MaskSpec) -> Result<NodeId> {
        let out = masked_softmax_rows(&self.nodes[a.0].value, mask)?;
        Ok(self.push(out, Op::MaskedSoftmax { a: a.0 }))
    }

    /// Fused multi-head attention: `q [m×d]`, `k/v [t×d]` already projected;
    /// output `[m×d]` is the concatenation over heads of
    /// `softmax(mask, q_h·k_hᵀ/√d_h)·v_h`. When position lists are given,
    /// q/k head slices are rotary-rotated first.
    pub fn attend_heads(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &MaskSpec,
        num_heads: usize,
        rot: Option<(Arc<Vec<usize>>, Arc<Vec<usize>>)>,
    ) -> Result<NodeId> {
        let (m, d) = self.nodes[q.0].value.dims2()?;
        let (t, dk) = self.nodes[k.0].value.dims2()?;
        let (tv, dv) = self.nodes[v.0].value.dims2()?;
        if d != dk || d != dv || t != tv {
            return Err(Error::ShapeMismatch {
                op: "attend_heads",
                left: vec![m, d],
                right: vec![t, dk],
            });
        }
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config {
                field: "num_heads",
                msg: format!("d_model {d} not divisible by num_heads {num_heads}"),
            });
        }
        if mask.rows() != m || mask.cols() != t {
            return Err(Error::ShapeMismatch {
                op: "attend_heads(mask)",
                left: vec![m, t],
                right: vec![mask.rows(), mask.cols()],
            });
        }
        let hd = d / num_heads;
        if let Some((q_pos, kv_pos)) = &rot {
            if hd % 2 != 0 {
                return Err(Error::Config {
                    field: "num_heads",
                    msg: "rotary needs an even head dimension".into(),
                });
            }
            if q_pos.len() != m || kv_pos.len() != t {
                return Err(Error::Input(
                    "rotary position lists must match the q/kv row counts".into(),
                ));
            }
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![0.0; m * d];
        let mut probs = Vec::with_capacity(num_heads);
        // rotary temps reused across heads
        let mut qrot = Vec::new();
        let mut krot = Vec::new();
        for h in 0..num_heads {
            let off = h * hd;
            let mut scores = vec![0.0; m * t];
            // scores = scale · q_h · k_hᵀ
            unsafe {
                let (qp, qrs): (*const f64, isize) = match &rot {
                    Some((q_pos, _)) => {
                        copy_head(qd, m, d, off, hd, &mut qrot);
                        rotary_rotate(&mut qrot, hd, q_pos, true);
                        (qrot.as_ptr(), hd as isize)
                    }
                    None => (qd.as_ptr().add(off), d as isize),
                };
                let (kp, krs): (*const f64, isize) = match &rot {
                    Some((_, kv_pos)) => {
                        copy_head(kd, t, d, off, hd, &mut krot);
                        rotary_rotate(&mut krot, hd, kv_pos, true);
                        (krot.as_ptr(), hd as isize)
                    }
                    None => (kd.as_ptr().add(off), d as isize),
                };
                dgemm_strided(
                    m, hd, t, scale,
                    qp, qrs, 1,
                    kp, 1, krs, // kᵀ via swapped strides
                    0.0,
                    scores.as_mut_ptr(), t as isize, 1,
                );
            }
            softmax_rows_inplace(&mut scores, m, t, mask)?;
            // out_h = probs · v_h, written into its feature slice
            unsafe {
                dgemm_strided(
                    m, t, hd, 1.0,
                    scores.as_ptr(), t as isize, 1,
                    vd.as_ptr().add(off), d as isize, 1,
                    0.0,
                    out.as_mut_ptr().add(off), d as isize, 1,
                );
            }
            probs.push(Tensor::new(vec![m, t], scores)?);
        }
        let (q_pos, kv_pos) = match rot {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::AttendHeads {
                q: q.0,
                k: k.0,
                v: v.0,
                num_heads,
                q_pos,
                kv_pos,
                probs,
            },
        ))
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = crate::attention::layer_norm_rows(
            &self.nodes[a.0].value,
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
            },
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of 0..{m}", start + len),
            });
        }
        let data = self.nodes[a.0].value.data()[start * k..(start + len) * k].to_vec();
        Ok(self.push(
            Tensor::new(vec![len, k], data)?,
            Op::SliceRows { a: a.0, start },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        }
        let k = self.nodes[parts[0].0].value.dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (m, kp) = self.nodes[p.0].value.dims2()?;
            if kp != k {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, k],
                    right: vec![m, kp],
                });
            }
            rows += m;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, k], data)?,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        if len == 0 || start + len > k {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of 0..{k}", start + len),
            });
        }
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * k + start..r * k + start + len]);
        }
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { a: a.0, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat_cols",
                msg: "no parts".into(),
            });
        }
        let m = self.nodes[parts[0].0].value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (mp, kp) = self.nodes[p.0].value.dims2()?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m, total],
                    right: vec![mp, kp],
                });
            }
            widths.push(kp);
            total += kp;
        }
        let mut data = vec![0.0; m * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..m {
                data[r * total + col..r * total + col + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Arc<Vec<usize>>) -> Result<NodeId> {
        let (rows, k) = self.nodes[table.0].value.dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no indices".into()));
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * k);
        for &id in ids.iter() {
            if id >= rows {
                return Err(Error::Input(format!(
                    "row index {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(&src[id * k..(id + 1) * k]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), k], data)?,
            Op::GatherRows { table: table.0, ids },
        ))
    }

    pub fn rotary(&mut self, a: NodeId, positions: Arc<Vec<usize>>) -> Result<NodeId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        if positions.len() != m {
            return Err(Error::Input(format!(
                "rotary positions: {} entries for {m} rows",
                positions.len()
            )));
        }
        if k % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rotary",
                msg: format!("feature count {k} must be even"),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        rotary_rotate(out.data_mut(), k, &positions, true);
        Ok(self.push(out, Op::Rotary { a: a.0, positions }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 })
    }

    /// Mean over rows of the next-token negative log-likelihood.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Arc<Vec<usize>>) -> Result<NodeId> {
        let (m, v) = self.nodes[logits.0].value.dims2()?;
        if targets.len() != m {
            return Err(Error::Input(format!(
                "cross entropy: {} targets for {m} logit rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Input(format!(
                    "target id {t} out of range for vocab {v}"
                )));
            }
            let row = self.nodes[logits.0].value.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| fast_exp(x - mx)).sum::<f64>().ln();
            total += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropyMean {
                logits: logits.0,
                targets,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss node. Every node at or
    /// before the loss is visited exactly once; nodes that never received a
    /// gradient are dead and skipped.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            backprop_op(&self.ops, &mut self.nodes, i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Add every registered parameter's gradient into the store.
    pub fn export_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, idx) in &self.params {
            if let Some(g) = self.nodes[*idx].grad.as_deref() {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Gradients of registered parameters, by name. Parameters unused by the
    /// loss report zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, idx)| {
                let g = match self.nodes[*idx].grad.as_deref() {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; self.nodes[*idx].value.numel()],
                };
                (name.clone(), g)
            })
            .collect()
    }
}

/// One op's contribution to its inputs' gradients. `ops` is read-only while
/// `nodes` carries the gradient buffers, so saved forward state (softmax
/// probabilities, GELU tanh values) is borrowed without copies.
fn backprop_op(ops: &[Op], nodes: &mut [Node], i: usize, g: &[f64]) {
    match &ops[i] {
        Op::Leaf => {}
        &Op::MatMul { a, b } => {
            let (m, k) = nodes[a].value.dims2().expect("2-D");
            let n = nodes[b].value.dims2().expect("2-D").1;
            {
                let (bval, agrad) = value_and_grad(nodes, b, a);
                gemm_nt(m, n, k, g, bval, 1.0, agrad);
            }
            {
                let (aval, bgrad) = value_and_grad(nodes, a, b);
                gemm_tn(k, m, n, aval, g, 1.0, bgrad);
            }
        }
        &Op::MatMulNt { a, b } => {
            let (m, k) = nodes[a].value.dims2().expect("2-D");
            let n = nodes[b].value.dims2().expect("2-D").0;
            {
                let (bval, agrad) = value_and_grad(nodes, b, a);
                gemm_nn(m, n, k, g, bval, 1.0, agrad);
            }
            {
                let (aval, bgrad) = value_and_grad(nodes, a, b);
                gemm_tn(n, m, k, g, aval, 1.0, bgrad);
            }
        }
        &Op::Add { a, b } => {
            accumulate(nodes, a, g);
            accumulate(nodes, b, g);
        }
        &Op::Mul { a, b } => {
            let da: Vec<f64> = g
                .iter()
                .zip(nodes[b].value.data())
                .map(|(g, y)| g * y)
                .collect();
            let db: Vec<f64> = g
                .iter()
                .zip(nodes[a].value.data())
                .map(|(g, x)| g * x)
                .collect();
            accumulate(nodes, a, &da);
            accumulate(nodes, b, &db);
        }
        &Op::Scale { a, c } => {
            let da: Vec<f64> = g.iter().map(|g| g * c).collect();
            accumulate(nodes, a, &da);
        }
        &Op::AddBias { a, bias } => {
            let k = nodes[bias].value.numel();
            let m = g.len() / k;
            let mut db = vec![0.0; k];
            for r in 0..m {
                let row = &g[r * k..(r + 1) * k];
                for (acc, gv) in db.iter_mut().zip(row) {
                    *acc += gv;
                }
            }
            accumulate(nodes, a, g);
            accumulate(nodes, bias, &db);
        }
        Op::Gelu { a, saved_tanh } => {
            let a = *a;
            let da: Vec<f64> = g
                .iter()
                .zip(nodes[a].value.data())
                .zip(saved_tanh)
                .map(|((g, &x), &t)| g * gelu_grad_from(x, t))
                .collect();
            accumulate(nodes, a, &da);
        }
        Op::MaskedSoftmax { a } => {
            let a = *a;
            let mut da = vec![0.0; g.len()];
            softmax_rows_backward(&nodes[i].value, g, &mut da);
            accumulate(nodes, a, &da);
        }
        Op::AttendHeads {
            q,
            k,
            v,
            num_heads,
            q_pos,
            kv_pos,
            probs,
        } => {
            let (q, k, v, heads) = (*q, *k, *v, *num_heads);
            let (m, d) = nodes[q].value.dims2().expect("2-D");
            let t = nodes[k].value.dims2().expect("2-D").0;
            let hd = d / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let rotary = q_pos.is_some();
            let mut dprobs = vec![0.0; m * t];
            let mut dtmp_q = vec![0.0; m * hd];
            let mut dtmp_k = vec![0.0; t * hd];
            let mut dtmp_v = vec![0.0; t * hd];
            let mut qrot = Vec::new();
            let mut krot = Vec::new();
            for h in 0..heads {
                let off = h * hd;
                let p = &probs[h];
                // dprobs = g_h · v_hᵀ
                unsafe {
                    dgemm_strided(
                        m, hd, t, 1.0,
                        g.as_ptr().add(off), d as isize, 1,
                        nodes[v].value.data().as_ptr().add(off), 1, d as isize,
                        0.0,
                        dprobs.as_mut_ptr(), t as isize, 1,
                    );
                }
                // dscores in place (masked entries have p = 0)
                softmax_rows_backward_inplace(p, &mut dprobs);
                // rotated views needed for dq/dk when rotary is on
                let (qp, qrs): (*const f64, isize) = if rotary {
                    copy_head(nodes[q].value.data(), m, d, off, hd, &mut qrot);
                    rotary_rotate(&mut qrot, hd, q_pos.as_ref().expect("rotary"), true);
                    (qrot.as_ptr(), hd as isize)
                } else {
                    (unsafe { nodes[q].value.data().as_ptr().add(off) }, d as isize)
                };
                let (kp, krs): (*const f64, isize) = if rotary {
                    copy_head(nodes[k].value.data(), t, d, off, hd, &mut krot);
                    rotary_rotate(&mut krot, hd, kv_pos.as_ref().expect("rotary"), true);
                    (krot.as_ptr(), hd as isize)
                } else {
                    (unsafe { nodes[k].value.data().as_ptr().add(off) }, d as isize)
                };
                // dq_h = scale · ds · k_rot
                unsafe {
                    dgemm_strided(
                        m, t, hd, scale,
                        dprobs.as_ptr(), t as isize, 1,
                        kp, krs, 1,
                        0.0,
                        dtmp_q.as_mut_ptr(), hd as isize, 1,
                    );
                }
                // dk_h = scale · dsᵀ · q_rot
                unsafe {
                    dgemm_strided(
                        t, m, hd, scale,
                        dprobs.as_ptr(), 1, t as isize,
                        qp, qrs, 1,
                        0.0,
                        dtmp_k.as_mut_ptr(), hd as isize, 1,
                    );
                }
                // dv_h = probsᵀ · g_h
                unsafe {
                    dgemm_strided(
                        t, m, hd, 1.0,
                        p.data().as_ptr(), 1, t as isize,
                        g.as_ptr().add(off), d as isize, 1,
                        0.0,
                        dtmp_v.as_mut_ptr(), hd as isize, 1,
                    );
                }
                if rotary {
                    rotary_rotate(&mut dtmp_q, hd, q_pos.as_ref().expect("rotary"), false);
                    rotary_rotate(&mut dtmp_k, hd, kv_pos.as_ref().expect("rotary"), false);
                }
                scatter_head_add(ensure_grad(&mut nodes[q]), &dtmp_q, m, d, off, hd);
                scatter_head_add(ensure_grad(&mut nodes[k]), &dtmp_k, t, d, off, hd);
                scatter_head_add(ensure_grad(&mut nodes[v]), &dtmp_v, t, d, off, hd);
            }
        }
        &Op::LayerNorm { a, gain, bias } => {
            let (m, d) = nodes[a].value.dims2().expect("2-D");
            let gain_val = nodes[gain].value.data().to_vec();
            let mut da = vec![0.0; m * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..m {
                let x = nodes[a].value.row(r);
                let gy = &g[r * d..(r + 1) * d];
                let mean = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
                let gg: Vec<f64> = gy.iter().zip(&gain_val).map(|(g, w)| g * w).collect();
                let sum_gg: f64 = gg.iter().sum();
                let sum_gg_xhat: f64 = gg.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let df = d as f64;
                for j in 0..d {
                    dgain[j] += gy[j] * xhat[j];
                    dbias[j] += gy[j];
                    da[r * d + j] = inv / df * (df * gg[j] - sum_gg - xhat[j] * sum_gg_xhat);
                }
            }
            accumulate(nodes, a, &da);
            accumulate(nodes, gain, &dgain);
            accumulate(nodes, bias, &dbias);
        }
        &Op::SliceRows { a, start } => {
            let k = nodes[a].value.dims2().expect("2-D").1;
            let ga = ensure_grad(&mut nodes[a]);
            for (dst, gv) in ga[start * k..start * k + g.len()].iter_mut().zip(g) {
                *dst += gv;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let numel = nodes[p].value.numel();
                accumulate(nodes, p, &g[offset..offset + numel]);
                offset += numel;
            }
        }
        &Op::SliceCols { a, start } => {
            let (m, k) = nodes[a].value.dims2().expect("2-D");
            let len = nodes[i].value.dims2().expect("2-D").1;
            let ga = ensure_grad(&mut nodes[a]);
            for r in 0..m {
                let dst = &mut ga[r * k + start..r * k + start + len];
                let src = &g[r * len..(r + 1) * len];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total = nodes[i].value.dims2().expect("2-D").1;
            let m = nodes[i].value.dims2().expect("2-D").0;
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.dims2().expect("2-D").1;
                let ga = ensure_grad(&mut nodes[p]);
                for r in 0..m {
                    let dst = &mut ga[r * w..(r + 1) * w];
                    let src = &g[r * total + col..r * total + col + w];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                col += w;
            }
        }
        Op::GatherRows { table, ids } => {
            let table = *table;
            let k = nodes[table].value.dims2().expect("2-D").1;
            let gt = ensure_grad(&mut nodes[table]);
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut gt[id * k..(id + 1) * k];
                let src = &g[r * k..(r + 1) * k];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        Op::Rotary { a, positions } => {
            let a = *a;
            let k = nodes[a].value.dims2().expect("2-D").1;
            let mut da = g.to_vec();
            rotary_rotate(&mut da, k, positions, false);
            accumulate(nodes, a, &da);
        }
        &Op::SumAll { a } => {
            let g0 = g[0];
            let ga = ensure_grad(&mut nodes[a]);
            for v in ga.iter_mut() {
                *v += g0;
            }
        }
        Op::CrossEntropyMean { logits, targets } => {
            let logits = *logits;
            let (m, v) = nodes[logits].value.dims2().expect("2-D");
            let scale = g[0] / m as f64;
            let mut dl = vec![0.0; m * v];
            for (r, &t) in targets.iter().enumerate() {
                let row = nodes[logits].value.row(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let drow = &mut dl[r * v..(r + 1) * v];
                let mut sum = 0.0;
                for (d, &x) in drow.iter_mut().zip(row) {
                    let e = fast_exp(x - mx);
                    *d = e;
                    sum += e;
                }
                let inv = scale / sum;
                for d in drow.iter_mut() {
                    *d *= inv;
                }
                drow[t] -= scale;
            }
            accumulate(nodes, logits, &dl);
        }
    }
}

/// Copy one head's feature slice into a contiguous buffer.
fn copy_head(src: &[f64], rows: usize, d: usize, off: usize, hd: usize, out: &mut Vec<f64>) {
    out.clear();
    out.reserve(rows * hd);
    for r in 0..rows {
        out.extend_from_slice(&src[r * d + off..r * d + off + hd]);
    }
}

/// Add a contiguous [rows×hd] buffer into the head's feature slice of a
/// [rows×d] gradient.
fn scatter_head_add(grad: &mut [f64], tmp: &[f64], rows: usize, d: usize, off: usize, hd: usize) {
    for r in 0..rows {
        let dst = &mut grad[r * d + off..r * d + off + hd];
        let src = &tmp[r * hd..(r + 1) * hd];
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
}

fn ensure_grad(node: &mut Node) -> &mut Vec<f64> {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.value.numel()]);
    }
    node.grad.as_mut().expect("just set")
}

fn accumulate(nodes: &mut [Node], id: usize, contrib: &[f64]) {
    let g = ensure_grad(&mut nodes[id]);
    debug_assert_eq!(g.len(), contrib.len());
    for (a, b) in g.iter_mut().zip(contrib) {
        *a += b;
    }
}

/// Simultaneous read of one node's value and mutable access to another's
/// gradient; handles the self-referential case by splitting the node's
/// fields.
fn value_and_grad(nodes: &mut [Node], value_of: usize, grad_of: usize) -> (&[f64], &mut Vec<f64>) {
    use std::cmp::Ordering;
    match value_of.cmp(&grad_of) {
        Ordering::Equal => {
            let node = &mut nodes[value_of];
            if node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
            let Node { value, grad } = node;
            (value.data(), grad.as_mut().expect("just set"))
        }
        Ordering::Less => {
            let (lo, hi) = nodes.split_at_mut(grad_of);
            (lo[value_of].value.data(), ensure_grad(&mut hi[0]))
        }
        Ordering::Greater => {
            let (lo, hi) = nodes.split_at_mut(value_of);
            (hi[0].value.data(), ensure_grad(&mut lo[grad_of]))
        }
    }
}
