//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding the output value and references to its
//! parent nodes, so insertion order is a topological order. `backward` sweeps
//! the tape once in reverse, accumulating vector-Jacobian products.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Row-broadcast bias add: [n, e] + [e].
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    MaskedSoftmax {
        x: NodeId,
        mask: Mask,
    },
    CrossEntropyMasked {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    SumAll(NodeId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
    /// Persistent accumulator: repeated backward calls add into it.
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed primitives for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// A non-trainable input leaf.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// A named parameter leaf. Repeated registrations under one name return
    /// the same node, so shared weights (e.g. a tied embedding/output head)
    /// accumulate gradients from every use site.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Pre-binds `name` to an existing node; later `param(name, _)` calls
    /// resolve to it. Lets a finite-difference probe substitute one weight
    /// without touching the model.
    pub fn alias_param(&mut self, name: &str, id: NodeId) {
        self.params.insert(name.to_string(), id);
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.node(id).shape.clone(), self.node(id).data.clone())
            .expect("node shape consistent")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&[f64]> {
        self.param_id(name).and_then(|id| self.grad(id))
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = &self.node(id).shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected rank 1 or 2, got {s:?}"),
        }
    }

    fn dim_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension {
            op,
            lhs: self.node(a).shape.clone(),
            rhs: self.node(b).shape.clone(),
        }
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(self.dim_err("add", a, b));
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, data, rg, Op::Add(a, b)))
    }

    /// `x + bias` with bias broadcast over rows; the one sanctioned broadcast
    /// besides layer-norm affine parameters.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, e) = self.rows_cols(x);
        let (br, bc) = self.rows_cols(bias);
        if br != 1 || bc != e {
            return Err(self.dim_err("add_bias", x, bias));
        }
        let mut data = self.node(x).data.clone();
        let b = &self.node(bias).data;
        for r in 0..n {
            for c in 0..e {
                data[r * e + c] += b[c];
            }
        }
        let rg = self.node(x).requires_grad || self.node(bias).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, data, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let data = self.node(x).data.iter().map(|v| v * s).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        self.push(shape, data, rg, Op::Scale(x, s))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.rows_cols(x);
        let src = &self.node(x).data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let rg = self.node(x).requires_grad;
        self.push(vec![n, m], data, rg, Op::Transpose(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.node(x).data.iter().map(|&v| gelu(v)).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        self.push(shape, data, rg, Op::Gelu(x))
    }

    /// Per-row zero-mean unit-variance normalization (population variance)
    /// followed by the affine transform `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (n, e) = self.rows_cols(x);
        if self.rows_cols(gain) != (1, e) {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.rows_cols(bias) != (1, e) {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        let src = &self.node(x).data;
        let g = &self.node(gain).data;
        let b = &self.node(bias).data;
        let mut data = vec![0.0; n * e];
        for r in 0..n {
            let row = &src[r * e..(r + 1) * e];
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..e {
                data[r * e + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gain).requires_grad
            || self.node(bias).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, data, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Row-wise softmax over unmasked entries; masked entries come out as
    /// exactly 0. Max-subtraction keeps the exponentials in range.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        let (n, e) = self.rows_cols(x);
        if (mask.rows(), mask.cols()) != (n, e) {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: self.node(x).shape.clone(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let src = &self.node(x).data;
        let mut data = vec![0.0; n * e];
        for r in 0..n {
            let row = &src[r * e..(r + 1) * e];
            let mrow = mask.row(r);
            let mut max = f64::NEG_INFINITY;
            for c in 0..e {
                if mrow[c] && row[c] > max {
                    max = row[c];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask(format!(
                    "masked_softmax row {r} has no unmasked entry"
                )));
            }
            let mut sum = 0.0;
            for c in 0..e {
                if mrow[c] {
                    let v = (row[c] - max).exp();
                    data[r * e + c] = v;
                    sum += v;
                }
            }
            for c in 0..e {
                if mrow[c] {
                    data[r * e + c] /= sum;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(
            shape,
            data,
            rg,
            Op::MaskedSoftmax {
                x,
                mask: mask.clone(),
            },
        ))
    }

    /// Mean over unmasked positions of `-log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (t, v) = self.rows_cols(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy_masked",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        if n_active == 0 {
            return Err(Error::DegenerateMask(
                "cross_entropy_masked: every position is masked".into(),
            ));
        }
        let src = &self.node(logits).data;
        let mut total = 0.0;
        for (i, (&target, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if target >= v {
                return Err(Error::Index(format!(
                    "cross_entropy_masked: target {target} at position {i} >= vocab {v}"
                )));
            }
            let row = &src[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[target];
        }
        let loss = total / n_active as f64;
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Gathers rows of `table` by id; gradient scatters back into the table.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, e) = self.rows_cols(table);
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(ids.len() * e);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding_lookup: id {id} at position {i} >= table rows {v}"
                )));
            }
            data.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let rg = self.node(table).requires_grad;
        Ok(self.push(
            vec![ids.len(), e],
            data,
            rg,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenation along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat_rows: empty".into()))?;
        let (_, e) = self.rows_cols(first);
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != e {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(&self.node(p).data);
            rg |= self.node(p).requires_grad;
        }
        Ok(self.push(vec![rows, e], data, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat_cols: empty".into()))?;
        let (n, _) = self.rows_cols(first);
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != n {
                return Err(self.dim_err("concat_cols", first, p));
            }
            cols += c;
            rg |= self.node(p).requires_grad;
        }
        let mut data = vec![0.0; n * cols];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.rows_cols(p);
            let src = &self.node(p).data;
            for r in 0..n {
                data[r * cols + off..r * cols + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(vec![n, cols], data, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, e) = self.rows_cols(x);
        if start + len > n {
            return Err(Error::Index(format!(
                "slice_rows: {start}..{} out of {n} rows",
                start + len
            )));
        }
        let data = self.node(x).data[start * e..(start + len) * e].to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![len, e], data, rg, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, e) = self.rows_cols(x);
        if start + len > e {
            return Err(Error::Index(format!(
                "slice_cols: {start}..{} out of {e} cols",
                start + len
            )));
        }
        let src = &self.node(x).data;
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * e + start..r * e + start + len]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![n, len], data, rg, Op::SliceCols { x, start, len }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(x).data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.node(x).shape.clone(),
                rhs: shape,
            });
        }
        let data = self.node(x).data.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![s], rg, Op::SumAll(x))
    }

    /// Arithmetic mean of scalar nodes, built from add/scale primitives.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut acc = *xs.first().ok_or_else(|| Error::Input("mean_of: empty".into()))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    // ── reverse sweep ──────────────────────────────────────────────────

    /// Populates gradient accumulators of every node reachable from `loss`
    /// that requires gradients. Each call adds d(loss)/d(node) on top of
    /// whatever previous calls left behind.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.node(loss).shape.clone(),
                rhs: vec![1],
            });
        }
        // Fresh per-call buffers; fold into persistent accumulators at the end.
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
                match &mut self.nodes[idx].grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => self.nodes[idx].grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        if !self.node(id).requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(contrib) {
                    *b += v;
                }
            }
            None => grads[id.0] = Some(contrib.to_vec()),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let (_, n) = self.rows_cols(*b);
                if self.node(*a).requires_grad {
                    // dA = g . B^T
                    let bt = transpose_raw(&self.node(*b).data, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.add_grad(grads, *a, &da);
                }
                if self.node(*b).requires_grad {
                    // dB = A^T . g
                    let at = transpose_raw(&self.node(*a).data, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::AddBias(x, bias) => {
                self.add_grad(grads, *x, g);
                if self.node(*bias).requires_grad {
                    let (n, e) = self.rows_cols(*x);
                    let mut db = vec![0.0; e];
                    for r in 0..n {
                        for c in 0..e {
                            db[c] += g[r * e + c];
                        }
                    }
                    self.add_grad(grads, *bias, &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Transpose(x) => {
                let (m, n) = self.rows_cols(*x);
                // g has shape [n, m]; transpose back.
                let dx = transpose_raw(g, n, m);
                self.add_grad(grads, *x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = self
                    .node(*x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * gelu_deriv(v))
                    .collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (n, e) = self.rows_cols(*x);
                let src = &self.node(*x).data;
                let gw = &self.node(*gain).data;
                let mut dx = vec![0.0; n * e];
                let mut dgain = vec![0.0; e];
                let mut dbias = vec![0.0; e];
                for r in 0..n {
                    let row = &src[r * e..(r + 1) * e];
                    let grow = &g[r * e..(r + 1) * e];
                    let mean = row.iter().sum::<f64>() / e as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gw).map(|(gv, w)| gv * w).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / e as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / e as f64;
                    for c in 0..e {
                        dx[r * e + c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                    }
                }
                self.add_grad(grads, *x, &dx);
                self.add_grad(grads, *gain, &dgain);
                self.add_grad(grads, *bias, &dbias);
            }
            Op::MaskedSoftmax { x, mask } => {
                let (n, e) = self.rows_cols(*x);
                let y = &self.nodes[idx].data;
                let mut dx = vec![0.0; n * e];
                for r in 0..n {
                    let yrow = &y[r * e..(r + 1) * e];
                    let grow = &g[r * e..(r + 1) * e];
                    let mrow = mask.row(r);
                    let dot: f64 = (0..e)
                        .filter(|&c| mrow[c])
                        .map(|c| grow[c] * yrow[c])
                        .sum();
                    for c in 0..e {
                        if mrow[c] {
                            dx[r * e + c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
            } => {
                let (t, v) = self.rows_cols(*logits);
                let n_active = mask.iter().filter(|&&m| m).count() as f64;
                let src = &self.node(*logits).data;
                let gscalar = g[0];
                let mut dl = vec![0.0; t * v];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    let row = &src[i * v..(i + 1) * v];
                    let lse = log_sum_exp(row);
                    for c in 0..v {
                        let p = (row[c] - lse).exp();
                        let indicator = if c == targets[i] { 1.0 } else { 0.0 };
                        dl[i * v + c] = gscalar * (p - indicator) / n_active;
                    }
                }
                self.add_grad(grads, *logits, &dl);
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.node(*table).requires_grad {
                    let (v, e) = self.rows_cols(*table);
                    let mut dt = vec![0.0; v * e];
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..e {
                            dt[id * e + c] += g[i * e + c];
                        }
                    }
                    self.add_grad(grads, *table, &dt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.rows_cols(p);
                    self.add_grad(grads, p, &g[off..off + r * c]);
                    off += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, cols) = self.rows_cols(NodeId(idx));
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.rows_cols(p);
                    if self.node(p).requires_grad {
                        let mut dp = vec![0.0; n * c];
                        for r in 0..n {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * cols + off..r * cols + off + c]);
                        }
                        self.add_grad(grads, p, &dp);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (n, e) = self.rows_cols(*x);
                let mut dx = vec![0.0; n * e];
                dx[start * e..(start + len) * e].copy_from_slice(g);
                self.add_grad(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let (n, e) = self.rows_cols(*x);
                let mut dx = vec![0.0; n * e];
                for r in 0..n {
                    dx[r * e + start..r * e + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_grad(grads, *x, &dx);
            }
            Op::Reshape(x) => {
                self.add_grad(grads, *x, g);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.node(*x).data.len()];
                self.add_grad(grads, *x, &dx);
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
