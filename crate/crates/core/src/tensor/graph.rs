//! Recording graph: forward ops append to an op list, backward replays it
//! in reverse, accumulating gradients with `+=`.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    node: usize,
    graph: u64,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    /// Row-broadcast add: `a` is [m, n], `b` holds n values added to every row.
    AddRow { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Sum { a: usize },
    SelectRows { a: usize, idx: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    /// Masked rows softmax; the node's own value caches the probabilities.
    SoftmaxMasked { a: usize, mask: Vec<bool> },
    LayerNorm { a: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

/// A single computation record: ops applied in order, replayed in reverse
/// by [`Graph::backward`]. Single-threaded by design.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    id: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            node: nodes.len() - 1,
            graph: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Contract(
                "variable belongs to a different computation record".into(),
            ));
        }
        Ok(v.node)
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Insert a constant (no gradient tracked).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a trainable leaf (gradient accumulated by backward).
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.node].value.clone()
    }

    /// The scalar held by a 1-element tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.node].value.item()
    }

    /// Accumulated gradient of `v`, if any has flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.node];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Reset every gradient buffer; subsequent backward passes start fresh.
    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    // ── primitive ops ────────────────────────────────────────────────

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[ai].value, &nodes[bi].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        drop(nodes);
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::Matmul { a: ai, b: bi },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        if av.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", av.shape())));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = av.data()[r * n + c];
            }
        }
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose { a: ai }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[ai].value, &nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        drop(nodes);
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Add { a: ai, b: bi }))
    }

    /// Add a length-n row vector to every row of an [m, n] matrix.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[ai].value, &nodes[bi].value);
        let n = av.cols();
        if av.shape().len() != 2 || bv.len() != n {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.data().to_vec();
        for r in 0..av.rows() {
            for c in 0..n {
                out[r * n + c] += bv.data()[c];
            }
        }
        let shape = av.shape().to_vec();
        drop(nodes);
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::AddRow { a: ai, b: bi }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[ai].value, &nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        drop(nodes);
        let rg = self.requires(ai) || self.requires(bi);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Mul { a: ai, b: bi }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        let out: Vec<f64> = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Scale { a: ai, c }))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let total: f64 = self.nodes.borrow()[ai].value.data().iter().sum();
        let rg = self.requires(ai);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum { a: ai }))
    }

    /// Gather rows of a rank-2 tensor; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        if av.shape().len() != 2 {
            return Err(Error::Shape(format!("select_rows of {:?}", av.shape())));
        }
        if idx.is_empty() {
            return Err(Error::Shape("select_rows with no indices".into()));
        }
        let (m, n) = (av.rows(), av.cols());
        if let Some(&bad) = idx.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} out of {m}")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            out.extend_from_slice(av.row(r));
        }
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            rg,
            Op::SelectRows { a: ai, idx: idx.to_vec() },
        ))
    }

    /// Contiguous column slice of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        if av.shape().len() != 2 || start + len > av.cols() || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {:?}",
                start + len,
                av.shape()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&av.data()[r * n + start..r * n + start + len]);
        }
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            rg,
            Op::SliceCols { a: ai, start, len },
        ))
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    fn concat(&self, parts: &[Var], by_rows: bool) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let nodes = self.nodes.borrow();
        for &i in &idxs {
            if nodes[i].value.shape().len() != 2 {
                return Err(Error::Shape("concat expects rank-2 parts".into()));
            }
        }
        let value = if by_rows {
            let n = nodes[idxs[0]].value.cols();
            if idxs.iter().any(|&i| nodes[i].value.cols() != n) {
                return Err(Error::Shape("concat_rows with differing widths".into()));
            }
            let m: usize = idxs.iter().map(|&i| nodes[i].value.rows()).sum();
            let mut out = Vec::with_capacity(m * n);
            for &i in &idxs {
                out.extend_from_slice(nodes[i].value.data());
            }
            Tensor::new(vec![m, n], out)?
        } else {
            let m = nodes[idxs[0]].value.rows();
            if idxs.iter().any(|&i| nodes[i].value.rows() != m) {
                return Err(Error::Shape("concat_cols with differing heights".into()));
            }
            let n: usize = idxs.iter().map(|&i| nodes[i].value.cols()).sum();
            let mut out = Vec::with_capacity(m * n);
            for r in 0..m {
                for &i in &idxs {
                    out.extend_from_slice(nodes[i].value.row(r));
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        let rg = idxs.iter().any(|&i| nodes[i].requires_grad);
        drop(nodes);
        let op = if by_rows {
            Op::ConcatRows { parts: idxs }
        } else {
            Op::ConcatCols { parts: idxs }
        };
        Ok(self.push(value, rg, op))
    }

    /// Row-wise softmax over the positions where `mask` is true; masked
    /// positions get exactly 0. Every row must allow at least one position.
    pub fn softmax_masked(&self, logits: Var, mask: &[bool]) -> Result<Var> {
        let ai = self.check(logits)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        if av.shape().len() != 2 || mask.len() != av.len() {
            return Err(Error::Shape(format!(
                "softmax_masked {:?} with mask of {} entries",
                av.shape(),
                mask.len()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = av.row(r);
            let mrow = &mask[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                if mrow[c] && row[c] > max {
                    max = row[c];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "softmax_masked row {r} is fully masked"
                )));
            }
            let mut denom = 0.0;
            for c in 0..n {
                if mrow[c] {
                    let e = (row[c] - max).exp();
                    out[r * n + c] = e;
                    denom += e;
                }
            }
            for c in 0..n {
                if mrow[c] {
                    out[r * n + c] /= denom;
                }
            }
        }
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            rg,
            Op::SoftmaxMasked { a: ai, mask: mask.to_vec() },
        ))
    }

    /// Standardize each row to zero mean, unit variance (population,
    /// stabilized by `eps`), then apply elementwise gain and bias.
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ai, gi, bi) = (self.check(a)?, self.check(gain)?, self.check(bias)?);
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let nodes = self.nodes.borrow();
        let (av, gv, bv) = (&nodes[ai].value, &nodes[gi].value, &nodes[bi].value);
        let d = av.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm over {d} with gain {} / bias {}",
                gv.len(),
                bv.len()
            )));
        }
        let rows = av.rows();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &av.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (x[c] - mean) * is;
                xhat[r * d + c] = xh;
                out[r * d + c] = gv.data()[c] * xh + bv.data()[c];
            }
        }
        let shape = av.shape().to_vec();
        drop(nodes);
        let rg = self.requires(ai) || self.requires(gi) || self.requires(bi);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm { a: ai, gain: gi, bias: bi, xhat, inv_std },
        ))
    }

    /// Elementwise GeLU in its exact form `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        let out: Vec<f64> = av.data().iter().map(|&x| x * normal_cdf(x)).collect();
        let shape = av.shape().to_vec();
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Gelu { a: ai }))
    }

    /// Mean over rows of the negative log softmax probability of each
    /// row's target class.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ai = self.check(logits)?;
        let nodes = self.nodes.borrow();
        let av = &nodes[ai].value;
        if av.shape().len() != 2 || av.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy on {:?} with {} targets",
                av.shape(),
                targets.len()
            )));
        }
        let (m, c) = (av.rows(), av.cols());
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {bad} out of {c}")));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for r in 0..m {
            let row = av.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[r * c + j] /= denom;
            }
            loss += denom.ln() + max - row[targets[r]];
        }
        loss /= m as f64;
        drop(nodes);
        let rg = self.requires(ai);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits: ai, targets: targets.to_vec(), probs },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate `d loss / d tensor` into every requires-grad tensor the
    /// scalar `loss` was computed from.
    ///
    /// Propagation runs through per-call buffers, so calling backward twice
    /// adds the same gradients twice rather than compounding stale state.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if nodes[li].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward on non-scalar of shape {:?}",
                nodes[li].value.shape()
            )));
        }
        if !nodes[li].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        local[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = local[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            step_backward(&nodes, &op, &g, i, &mut local);
            nodes[i].op = op;
            let node = &mut nodes[i];
            let len = node.value.len();
            let store = node.grad.get_or_insert_with(|| vec![0.0; len]);
            for (s, l) in store.iter_mut().zip(&g) {
                *s += l;
            }
        }
        Ok(())
    }
}

fn add_local(local: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, contrib: &[f64]) {
    if !nodes[idx].requires_grad {
        return;
    }
    let g = local[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
    for (gi, ci) in g.iter_mut().zip(contrib) {
        *gi += ci;
    }
}

fn step_backward(
    nodes: &[Node],
    op: &Op,
    g: &[f64],
    out: usize,
    local: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let n = nodes[*b].value.cols();
            // a.grad += g . b^T
            let mut da = vec![0.0; m * k];
            for r in 0..m {
                for j in 0..k {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += g[r * n + c] * bv[j * n + c];
                    }
                    da[r * k + j] = s;
                }
            }
            add_local(local, nodes, *a, &da);
            // b.grad += a^T . g
            let mut db = vec![0.0; k * n];
            for r in 0..m {
                for j in 0..k {
                    let x = av[r * k + j];
                    if x == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        db[j * n + c] += x * g[r * n + c];
                    }
                }
            }
            add_local(local, nodes, *b, &db);
        }
        Op::Transpose { a } => {
            let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let mut da = vec![0.0; m * n];
            for r in 0..n {
                for c in 0..m {
                    da[c * n + r] = g[r * m + c];
                }
            }
            add_local(local, nodes, *a, &da);
        }
        Op::Add { a, b } => {
            add_local(local, nodes, *a, g);
            add_local(local, nodes, *b, g);
        }
        Op::AddRow { a, b } => {
            add_local(local, nodes, *a, g);
            let n = nodes[*b].value.len();
            let mut db = vec![0.0; n];
            for (i, gi) in g.iter().enumerate() {
                db[i % n] += gi;
            }
            add_local(local, nodes, *b, &db);
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let da: Vec<f64> = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
            add_local(local, nodes, *a, &da);
            let db: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
            add_local(local, nodes, *b, &db);
        }
        Op::Scale { a, c } => {
            let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            add_local(local, nodes, *a, &da);
        }
        Op::Sum { a } => {
            let da = vec![g[0]; nodes[*a].value.len()];
            add_local(local, nodes, *a, &da);
        }
        Op::SelectRows { a, idx } => {
            let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let mut da = vec![0.0; m * n];
            for (out_r, &src_r) in idx.iter().enumerate() {
                for c in 0..n {
                    da[src_r * n + c] += g[out_r * n + c];
                }
            }
            add_local(local, nodes, *a, &da);
        }
        Op::SliceCols { a, start, len } => {
            let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let mut da = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..*len {
                    da[r * n + start + c] = g[r * len + c];
                }
            }
            add_local(local, nodes, *a, &da);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                add_local(local, nodes, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::ConcatCols { parts } => {
            let m = nodes[parts[0]].value.rows();
            let total: usize = parts.iter().map(|&p| nodes[p].value.cols()).sum();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                let mut dp = vec![0.0; m * w];
                for r in 0..m {
                    dp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                add_local(local, nodes, p, &dp);
                offset += w;
            }
        }
        Op::SoftmaxMasked { a, mask } => {
            // The forward pass stored the probabilities as this node's value.
            let pv = &nodes[out].value;
            let (m, n) = (pv.rows(), pv.cols());
            let mut da = vec![0.0; m * n];
            for r in 0..m {
                let p = pv.row(r);
                let mrow = &mask[r * n..(r + 1) * n];
                let dot: f64 = (0..n)
                    .filter(|&c| mrow[c])
                    .map(|c| g[r * n + c] * p[c])
                    .sum();
                for c in 0..n {
                    if mrow[c] {
                        da[r * n + c] = p[c] * (g[r * n + c] - dot);
                    }
                }
            }
            add_local(local, nodes, *a, &da);
        }
        Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
            let gv = nodes[*gain].value.data();
            let d = gv.len();
            let rows = inv_std.len();
            let mut da = vec![0.0; rows * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                let h: Vec<f64> = gr.iter().zip(gv).map(|(gi, wi)| gi * wi).collect();
                let mean_h = h.iter().sum::<f64>() / d as f64;
                let mean_hx = h.iter().zip(xh).map(|(hi, xi)| hi * xi).sum::<f64>() / d as f64;
                for c in 0..d {
                    da[r * d + c] = inv_std[r] * (h[c] - mean_h - xh[c] * mean_hx);
                    dgain[c] += gr[c] * xh[c];
                    dbias[c] += gr[c];
                }
            }
            add_local(local, nodes, *a, &da);
            add_local(local, nodes, *gain, &dgain);
            add_local(local, nodes, *bias, &dbias);
        }
        Op::Gelu { a } => {
            let av = nodes[*a].value.data();
            let da: Vec<f64> = av
                .iter()
                .zip(g)
                .map(|(&x, gi)| gi * (normal_cdf(x) + x * normal_pdf(x)))
                .collect();
            add_local(local, nodes, *a, &da);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let m = targets.len();
            let c = probs.len() / m;
            let scale = g[0] / m as f64;
            let mut da = vec![0.0; m * c];
            for r in 0..m {
                for j in 0..c {
                    let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                    da[r * c + j] = scale * (probs[r * c + j] - indicator);
                }
            }
            add_local(local, nodes, *logits, &da);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for j in 0..k {
            let av = a[r * k + j];
            if av == 0.0 {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
