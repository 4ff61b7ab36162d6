//! Wengert tape: ops are recorded in execution order and replayed in
//! reverse to accumulate gradients into every requires-grad leaf.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Tensor, TensorError};

static TAPE_ALLOCS: AtomicUsize = AtomicUsize::new(0);

/// Number of tapes constructed since process start. The throughput
/// benchmark asserts this stays flat across a pure-inference pass.
pub fn tape_alloc_count() -> usize {
    TAPE_ALLOCS.load(Ordering::Relaxed)
}

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

enum OpRecord {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddRow { a: usize, b: usize },
    Gelu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize, len: usize },
    Reshape { a: usize },
    Transpose { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    L2Norm { a: usize },
    CrossEntropy { logits: usize, probs: Vec<f64>, label: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: OpRecord,
}

/// Append-only op record. Single-owner: all building goes through `&mut`.
/// Gradients live in a parallel array so the reverse pass can read node
/// data while writing gradients without copying either.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        TAPE_ALLOCS.fetch_add(1, Ordering::Relaxed);
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: OpRecord) -> Var {
        self.nodes.push(Node { shape, data, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, requires_grad, OpRecord::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one was populated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn rows_cols(shape: &[usize]) -> (usize, usize) {
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                let last = *shape.last().unwrap();
                (shape.iter().product::<usize>() / last, last)
            }
        }
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![m, n], out, rg, OpRecord::Matmul { a: a.0, b: b.0 }))
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: impl FnOnce(usize, usize) -> OpRecord,
    ) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(shape, data, rg, rec(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |a, b| OpRecord::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |a, b| OpRecord::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |a, b| OpRecord::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, OpRecord::Scale { a: a.0, c })
    }

    /// Broadcast-add a length-n row vector to every row of an m-by-n matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (rows, cols) = Self::rows_cols(&self.nodes[a.0].shape);
        if self.nodes[b.0].shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[b.0].data[c];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(shape, data, rg, OpRecord::AddRow { a: a.0, b: b.0 }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: impl FnOnce(usize) -> OpRecord) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, rec(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_scalar, |a| OpRecord::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |a| OpRecord::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |a| OpRecord::Sigmoid { a })
    }

    /// Numerically stable softmax along the last axis (max subtraction).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = Self::rows_cols(&self.nodes[a.0].shape);
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..rows {
            softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, OpRecord::SoftmaxRows { a: a.0 })
    }

    /// Per-row standardization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, cols) = Self::rows_cols(&self.nodes[x.0].shape);
        if self.nodes[gain.0].shape != [cols] || self.nodes[bias.0].shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = self.nodes[gain.0].data[c] * h + self.nodes[bias.0].data[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            rg,
            OpRecord::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
        ))
    }

    /// Concatenate along `axis`; supported for rank-1 (axis 0) and rank-2.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "empty input list".into() });
        }
        let rank = self.nodes[parts[0].0].shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank });
        }
        for p in parts {
            let (sa, sb) = (&self.nodes[parts[0].0].shape, &self.nodes[p.0].shape);
            if sa.len() != sb.len() || sa.iter().zip(sb).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: sa.clone(), rhs: sb.clone() });
            }
        }
        let mut shape = self.nodes[parts[0].0].shape.clone();
        shape[axis] = parts.iter().map(|p| self.nodes[p.0].shape[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        if rank == 1 || axis == 0 {
            for p in parts {
                data.extend_from_slice(&self.nodes[p.0].data);
            }
        } else {
            // rank 2, axis 1
            let rows = shape[0];
            for r in 0..rows {
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    data.extend_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, data, rg, OpRecord::Concat { parts: ids, axis }))
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    /// Copies; the tape never aliases storage between nodes.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: "narrow", axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} out of bounds for axis size {}", start + len, shape[axis]),
            });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(out_shape.iter().product());
        if shape.len() == 1 || axis == 0 {
            let inner: usize = shape[1..].iter().product::<usize>().max(1);
            data.extend_from_slice(&self.nodes[a.0].data[start * inner..(start + len) * inner]);
        } else {
            // rank 2, axis 1
            let cols = shape[1];
            for r in 0..shape[0] {
                data.extend_from_slice(&self.nodes[a.0].data[r * cols + start..r * cols + start + len]);
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, data, rg, OpRecord::Narrow { a: a.0, axis, start, len }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, OpRecord::Reshape { a: a.0 }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "transpose", msg: format!("expected rank 2, got {s:?}") });
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = self.nodes[a.0].data[r * n + c];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, m], data, rg, OpRecord::Transpose { a: a.0 }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, OpRecord::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, OpRecord::MeanAll { a: a.0 })
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, OpRecord::L2Norm { a: a.0 })
    }

    /// Cross-entropy of a rank-1 logit vector against a class index.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let s = &self.nodes[logits.0].shape;
        let n: usize = s.iter().product();
        if label >= n {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {label} out of range for {n} classes"),
            });
        }
        let mut probs = self.nodes[logits.0].data.clone();
        softmax_row(&mut probs);
        let loss = -(probs[label].max(1e-300)).ln();
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(vec![1], vec![loss], rg, OpRecord::CrossEntropy { logits: logits.0, probs, label }))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse execution order; a second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.nodes[loss.0].shape.clone() });
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Zero-initialized (on first touch) gradient buffer for `id`, or None if
/// the node does not participate in differentiation.
fn accum<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], out: usize, g: &[f64]) {
    match nodes[out].op {
        OpRecord::Leaf => {}
        OpRecord::Matmul { a, b } => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if let Some(ga) = accum(nodes, grads, a) {
                // dA = dC · Bᵀ
                let b_data = &nodes[b].data;
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let gar = &mut ga[r * k..(r + 1) * k];
                    for (kk, slot) in gar.iter_mut().enumerate() {
                        let br = &b_data[kk * n..(kk + 1) * n];
                        *slot += gr.iter().zip(br).map(|(&x, &y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = accum(nodes, grads, b) {
                // dB = Aᵀ · dC
                let a_data = &nodes[a].data;
                for r in 0..m {
                    let ar = &a_data[r * k..(r + 1) * k];
                    let gr = &g[r * n..(r + 1) * n];
                    for (kk, &av) in ar.iter().enumerate() {
                        add_assign(&mut gb[kk * n..(kk + 1) * n], gr, av);
                    }
                }
            }
        }
        OpRecord::Add { a, b } => {
            if let Some(ga) = accum(nodes, grads, a) {
                add_assign(ga, g, 1.0);
            }
            if let Some(gb) = accum(nodes, grads, b) {
                add_assign(gb, g, 1.0);
            }
        }
        OpRecord::Sub { a, b } => {
            if let Some(ga) = accum(nodes, grads, a) {
                add_assign(ga, g, 1.0);
            }
            if let Some(gb) = accum(nodes, grads, b) {
                add_assign(gb, g, -1.0);
            }
        }
        OpRecord::Mul { a, b } => {
            if let Some(ga) = accum(nodes, grads, a) {
                mul_add_assign(ga, g, &nodes[b].data);
            }
            if let Some(gb) = accum(nodes, grads, b) {
                mul_add_assign(gb, g, &nodes[a].data);
            }
        }
        OpRecord::Scale { a, c } => {
            if let Some(ga) = accum(nodes, grads, a) {
                add_assign(ga, g, c);
            }
        }
        OpRecord::AddRow { a, b } => {
            let cols = nodes[b].shape[0];
            if let Some(ga) = accum(nodes, grads, a) {
                add_assign(ga, g, 1.0);
            }
            if let Some(gb) = accum(nodes, grads, b) {
                for row in g.chunks_exact(cols) {
                    add_assign(gb, row, 1.0);
                }
            }
        }
        OpRecord::Gelu { a } => {
            if let Some(ga) = accum(nodes, grads, a) {
                for ((gi, &gv), &x) in ga.iter_mut().zip(g).zip(&nodes[a].data) {
                    *gi += gv * gelu_deriv(x);
                }
            }
        }
        OpRecord::Tanh { a } => {
            if let Some(ga) = accum(nodes, grads, a) {
                for ((gi, &gv), &y) in ga.iter_mut().zip(g).zip(&nodes[out].data) {
                    *gi += gv * (1.0 - y * y);
                }
            }
        }
        OpRecord::Sigmoid { a } => {
            if let Some(ga) = accum(nodes, grads, a) {
                for ((gi, &gv), &y) in ga.iter_mut().zip(g).zip(&nodes[out].data) {
                    *gi += gv * y * (1.0 - y);
                }
            }
        }
        OpRecord::SoftmaxRows { a } => {
            let (_, cols) = Tape::rows_cols(&nodes[out].shape);
            if let Some(ga) = accum(nodes, grads, a) {
                let y = &nodes[out].data;
                for ((gar, gr), yr) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for ((gi, &gv), &yv) in gar.iter_mut().zip(gr).zip(yr) {
                        *gi += yv * (gv - dot);
                    }
                }
            }
        }
        OpRecord::LayerNorm { x, gain, bias, ref xhat, ref inv_std } => {
            let cols = nodes[gain].shape[0];
            if let Some(gg) = accum(nodes, grads, gain) {
                for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    mul_add_assign(gg, gr, xr);
                }
            }
            if let Some(gb) = accum(nodes, grads, bias) {
                for gr in g.chunks_exact(cols) {
                    add_assign(gb, gr, 1.0);
                }
            }
            if let Some(gx) = accum(nodes, grads, x) {
                let gain_data = &nodes[gain].data;
                let n = cols as f64;
                for (((gxr, gr), xr), &inv) in gx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(xhat.chunks_exact(cols))
                    .zip(inv_std)
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xhat = 0.0;
                    for ((&gv, &gn), &xh) in gr.iter().zip(gain_data).zip(xr) {
                        let dh = gv * gn;
                        mean_dh += dh;
                        mean_dh_xhat += dh * xh;
                    }
                    mean_dh /= n;
                    mean_dh_xhat /= n;
                    for (((gi, &gv), &gn), &xh) in gxr.iter_mut().zip(gr).zip(gain_data).zip(xr) {
                        let dh = gv * gn;
                        *gi += inv * (dh - mean_dh - xh * mean_dh_xhat);
                    }
                }
            }
        }
        OpRecord::Concat { ref parts, axis } => {
            let rank = nodes[out].shape.len();
            if rank == 1 || axis == 0 {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].data.len();
                    if let Some(gp) = accum(nodes, grads, p) {
                        add_assign(gp, &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            } else {
                let rows = nodes[out].shape[0];
                let total_cols = nodes[out].shape[1];
                let mut col_off = 0;
                for &p in parts {
                    let c = nodes[p].shape[1];
                    if let Some(gp) = accum(nodes, grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total_cols + col_off..r * total_cols + col_off + c];
                            add_assign(&mut gp[r * c..(r + 1) * c], src, 1.0);
                        }
                    }
                    col_off += c;
                }
            }
        }
        OpRecord::Narrow { a, axis, start, len } => {
            let shape = &nodes[a].shape;
            if let Some(ga) = accum(nodes, grads, a) {
                if shape.len() == 1 || axis == 0 {
                    let inner: usize = shape[1..].iter().product::<usize>().max(1);
                    add_assign(&mut ga[start * inner..(start + len) * inner], g, 1.0);
                } else {
                    let cols = shape[1];
                    for r in 0..shape[0] {
                        let dst = &mut ga[r * cols + start..r * cols + start + len];
                        add_assign(dst, &g[r * len..(r + 1) * len], 1.0);
                    }
                }
            }
        }
        OpRecord::Reshape { a } => {
            if let Some(ga) = accum(nodes, grads, a) {
                add_assign(ga, g, 1.0);
            }
        }
        OpRecord::Transpose { a } => {
            let (n, m) = (nodes[out].shape[0], nodes[out].shape[1]);
            if let Some(ga) = accum(nodes, grads, a) {
                for r in 0..n {
                    for c in 0..m {
                        ga[c * n + r] += g[r * m + c];
                    }
                }
            }
        }
        OpRecord::SumAll { a } => {
            if let Some(ga) = accum(nodes, grads, a) {
                for gi in ga.iter_mut() {
                    *gi += g[0];
                }
            }
        }
        OpRecord::MeanAll { a } => {
            let n = nodes[a].data.len() as f64;
            if let Some(ga) = accum(nodes, grads, a) {
                for gi in ga.iter_mut() {
                    *gi += g[0] / n;
                }
            }
        }
        OpRecord::L2Norm { a } => {
            let norm = nodes[out].data[0].max(1e-12);
            if let Some(ga) = accum(nodes, grads, a) {
                add_assign(ga, &nodes[a].data, g[0] / norm);
            }
        }
        OpRecord::CrossEntropy { logits, ref probs, label } => {
            if let Some(gl) = accum(nodes, grads, logits) {
                for (i, (gi, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let target = if i == label { 1.0 } else { 0.0 };
                    *gi += g[0] * (p - target);
                }
            }
        }
    }
}

fn mul_add_assign(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += gv * o;
    }
}

fn add_assign(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let ar = &a[r * k..(r + 1) * k];
        let or = &mut out[r * n..(r + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}
