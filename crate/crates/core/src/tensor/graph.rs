use std::cell::RefCell;
use std::rc::Rc;

use super::{gemm, Float, MatRef, Result, Tensor, TensorError};

/// Recorded operation. Operand fields are node indices into the graph.
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, v: usize },
    Scale(usize, F),
    Neg(usize),
    Silu(usize),
    Sum(usize),
    Softmax(usize),
    RmsNorm { x: usize, w: usize, inv_rms: Vec<F> },
    Gather { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
    Slice { x: usize, row0: usize, col0: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RotatePairs { x: usize, cos: Rc<Vec<F>>, sin: Rc<Vec<F>> },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, v } => vec![*x, *v],
            Op::RmsNorm { x, w, .. } => vec![*x, *w],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Neg(a) | Op::Silu(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::Softmax(a) => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Slice { x, .. } | Op::RotatePairs { x, .. } => vec![*x],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    retain_grad: bool,
}

/// A dynamic computation graph. Operations are recorded in execution order,
/// so node order is already a topological order.
pub struct Graph<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, F> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F> Copy for Var<'_, F> {}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by a backward sweep, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false, false)
    }

    /// Number of recorded operations that read `var`.
    pub fn consumers(&self, var: Var<'_, F>) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.op.inputs().iter().filter(|&&i| i == var.id).count())
            .sum()
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool, retain: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            retain_grad: retain,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor<F>, op: Op<F>) -> Var<'_, F> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad, false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_from(loss, Tensor::new(shape, vec![F::one()])?)
    }

    /// Vector-Jacobian product: propagates the cotangent `seed` of `output`
    /// back to every node that requires a gradient.
    pub fn backward_from(&self, output: Var<'_, F>, seed: Tensor<F>) -> Result<Gradients<F>> {
        assert!(std::ptr::eq(output.graph, self), "var belongs to another graph");
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.shape() != seed.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward_from",
                lhs: nodes[output.id].value.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(seed);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            if nodes[id].retain_grad {
                grads[id] = Some(g);
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.retain_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec())?);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Float>(
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
    id: usize,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| {
        Tensor::zeros(nodes[id].value.shape().to_vec()).expect("node shapes are valid")
    });
    f(slot.data_mut());
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn propagate<F: Float>(nodes: &[Node<F>], id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let gm = MatRef::new(gd, m, n);
            accumulate(nodes, grads, *a, |da| {
                gemm(gm, MatRef::new(bv.data(), k, n).t(), da, true)
            });
            accumulate(nodes, grads, *b, |db| {
                gemm(MatRef::new(av.data(), m, k).t(), gm, db, true)
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (g.shape()[0], g.shape()[1]);
            accumulate(nodes, grads, *a, |da| {
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] += gd[r * n + c];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            for x in [*a, *b] {
                accumulate(nodes, grads, x, |d| add_into(d, gd));
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| {
                for (d, &g) in d.iter_mut().zip(gd) {
                    *d -= g;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(gd).zip(bv) {
                    *d += g * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av) {
                    *d += g * x;
                }
            });
        }
        Op::AddRow { x, v } => {
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
            let w = g.last_dim();
            accumulate(nodes, grads, *v, |d| {
                for row in gd.chunks_exact(w) {
                    add_into(d, row);
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(nodes, grads, *a, |d| {
                for (d, &g) in d.iter_mut().zip(gd) {
                    *d += *s * g;
                }
            });
        }
        Op::Neg(a) => {
            accumulate(nodes, grads, *a, |d| {
                for (d, &g) in d.iter_mut().zip(gd) {
                    *d -= g;
                }
            });
        }
        Op::Silu(a) => {
            let xv = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(gd).zip(xv) {
                    let s = sigmoid(x);
                    *d += g * s * (F::one() + x * (F::one() - s));
                }
            });
        }
        Op::Sum(a) => {
            let g0 = gd[0];
            accumulate(nodes, grads, *a, |d| {
                for d in d.iter_mut() {
                    *d += g0;
                }
            });
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let w = y.last_dim();
            accumulate(nodes, grads, *a, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(w)
                    .zip(gd.chunks_exact(w))
                    .zip(y.data().chunks_exact(w))
                {
                    let dot: F = grow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                    for ((d, &g), &p) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += p * (g - dot);
                    }
                }
            });
        }
        Op::RmsNorm { x, w, inv_rms } => {
            let xv = &nodes[*x].value;
            let wv = nodes[*w].value.data();
            let n = xv.last_dim();
            let nf = F::from_usize(n);
            accumulate(nodes, grads, *x, |d| {
                for (r, (drow, grow)) in d.chunks_exact_mut(n).zip(gd.chunks_exact(n)).enumerate() {
                    let xrow = xv.row(r);
                    let ir = inv_rms[r];
                    let dot: F = grow
                        .iter()
                        .zip(wv)
                        .zip(xrow)
                        .map(|((&g, &w), &x)| g * w * x)
                        .sum();
                    let coef = ir * ir * ir * dot / nf;
                    for i in 0..n {
                        drow[i] += ir * wv[i] * grow[i] - coef * xrow[i];
                    }
                }
            });
            accumulate(nodes, grads, *w, |d| {
                for (r, grow) in gd.chunks_exact(n).enumerate() {
                    let xrow = xv.row(r);
                    let ir = inv_rms[r];
                    for i in 0..n {
                        d[i] += grow[i] * xrow[i] * ir;
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let w = g.last_dim();
            accumulate(nodes, grads, *table, |d| {
                for (t, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * w..(id + 1) * w], &gd[t * w..(t + 1) * w]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[*logits].value.last_dim();
            let scale = gd[0] / F::from_usize(targets.len());
            accumulate(nodes, grads, *logits, |d| {
                for (t, &target) in targets.iter().enumerate() {
                    let row = &mut d[t * v..(t + 1) * v];
                    for (j, d) in row.iter_mut().enumerate() {
                        *d += scale * probs[t * v + j];
                    }
                    row[target] -= scale;
                }
            });
        }
        Op::Slice { x, row0, col0 } => {
            let src_cols = nodes[*x].value.last_dim();
            let (rows, cols) = (g.shape()[0], g.shape()[1]);
            accumulate(nodes, grads, *x, |d| {
                for r in 0..rows {
                    let start = (row0 + r) * src_cols + col0;
                    add_into(&mut d[start..start + cols], &gd[r * cols..(r + 1) * cols]);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = g.last_dim();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.last_dim();
                accumulate(nodes, grads, p, |d| {
                    for (r, drow) in d.chunks_exact_mut(w).enumerate() {
                        add_into(drow, &gd[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                accumulate(nodes, grads, p, |d| add_into(d, &gd[offset..offset + n]));
                offset += n;
            }
        }
        Op::RotatePairs { x, cos, sin } => {
            accumulate(nodes, grads, *x, |d| {
                for (i, (c, s)) in cos.iter().zip(sin.iter()).enumerate() {
                    let (g0, g1) = (gd[2 * i], gd[2 * i + 1]);
                    d[2 * i] += g0 * *c + g1 * *s;
                    d[2 * i + 1] += g1 * *c - g0 * *s;
                }
            });
        }
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'g, F: Float> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// A copy of the current value.
    pub fn value(&self) -> Tensor<F> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Keep this node's gradient after [`Graph::backward`] (leaves always keep theirs).
    pub fn retain_grad(self) -> Self {
        self.graph.nodes.borrow_mut()[self.id].retain_grad = true;
        self
    }

    /// A constant copy of this value, cut off from the gradient flow.
    pub fn detach(&self) -> Self {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Self) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn binary_same_shape(
        self,
        other: Self,
        op: &'static str,
        f: impl Fn(F, F) -> F,
        make: impl FnOnce(usize, usize) -> Op<F>,
    ) -> Result<Self> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.graph.record(value, make(self.id, other.id)))
    }

    fn unary(self, f: impl Fn(F) -> F, op: Op<F>) -> Self {
        let value = self.with_value(|t| t.map(f));
        self.graph.record(value, op)
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.graph.record(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Self> {
        let value = self.with_value(|t| t.transpose())?;
        Ok(self.graph.record(value, Op::Transpose(self.id)))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary_same_shape(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary_same_shape(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary_same_shape(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Adds a length-`n` vector to every row of a `…×n` tensor.
    pub fn add_row(self, v: Self) -> Result<Self> {
        self.same_graph(&v);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (x, vv) = (&nodes[self.id].value, &nodes[v.id].value);
            if vv.numel() != x.last_dim() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    lhs: x.shape().to_vec(),
                    rhs: vv.shape().to_vec(),
                });
            }
            let w = x.last_dim();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| a + vv.data()[i % w])
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.graph.record(value, Op::AddRow { x: self.id, v: v.id }))
    }

    pub fn scale(self, s: F) -> Self {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Self {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Self {
        self.unary(|x| x * sigmoid(x), Op::Silu(self.id))
    }

    pub fn sum(self) -> Self {
        let total = self.with_value(|t| t.data().iter().copied().sum());
        self.graph.record(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// Row-wise softmax over the last axis, with an optional constant additive
    /// bias of the same shape (use `-inf` to mask entries out).
    pub fn softmax_rows(self, mask: Option<&Tensor<F>>) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            if let Some(m) = mask {
                if m.shape() != x.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "softmax_rows",
                        lhs: x.shape().to_vec(),
                        rhs: m.shape().to_vec(),
                    });
                }
            }
            let w = x.last_dim();
            let mut out = x.data().to_vec();
            if let Some(m) = mask {
                for (o, &b) in out.iter_mut().zip(m.data()) {
                    *o += b;
                }
            }
            if let Some(m) = mask {
                if let Some(r) = m.data().chunks_exact(w).position(|row| row.iter().all(|&b| b == F::neg_infinity())) {
                    return Err(TensorError::AllMasked { row: r });
                }
            }
            for row in out.chunks_exact_mut(w) {
                let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                if !max.is_finite() || row.iter().any(|v| v.is_nan()) {
                    // Overflowed scores: poison the row so the loss reports it.
                    row.fill(F::nan());
                    continue;
                }
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    // Masked entries are exactly zero; skip the exp.
                    *v = if *v == F::neg_infinity() { F::zero() } else { (*v - max).exp() };
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.graph.record(value, Op::Softmax(self.id)))
    }

    /// `x / sqrt(mean(x²) + eps) * weight` per row.
    pub fn rms_norm(self, weight: Self, eps: f64) -> Result<Self> {
        self.same_graph(&weight);
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("rms_norm eps must be > 0, got {eps}")));
        }
        let (value, inv_rms) = {
            let nodes = self.graph.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let n = x.last_dim();
            if w.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "rms_norm",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let nf = F::from_usize(n);
            let eps = F::from_f64(eps);
            let mut out = Vec::with_capacity(x.numel());
            let mut inv = Vec::with_capacity(x.n_rows());
            for row in x.data().chunks_exact(n) {
                let ms: F = row.iter().map(|&v| v * v).sum::<F>() / nf;
                let ir = F::one() / (ms + eps).sqrt();
                inv.push(ir);
                out.extend(row.iter().zip(w.data()).map(|(&v, &g)| v * ir * g));
            }
            (Tensor::new(x.shape().to_vec(), out)?, inv)
        };
        Ok(self.graph.record(
            value,
            Op::RmsNorm {
                x: self.id,
                w: weight.id,
                inv_rms,
            },
        ))
    }

    /// Row lookup into a `V×d` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let table = &nodes[self.id].value;
            let (v, d) = table.dims2("embedding_gather")?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(TensorError::IndexOutOfRange {
                        what: "token id",
                        index: id,
                        bound: v,
                    });
                }
                out.extend_from_slice(table.row(id));
            }
            Tensor::new([ids.len(), d], out)?
        };
        Ok(self.graph.record(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_mean(self, targets: &[usize]) -> Result<Self> {
        let (value, probs) = {
            let nodes = self.graph.nodes.borrow();
            let logits = &nodes[self.id].value;
            let (t, v) = logits.dims2("cross_entropy_mean")?;
            if targets.len() != t {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy_mean",
                    lhs: logits.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut probs = Vec::with_capacity(t * v);
            let mut total = F::zero();
            for (r, &target) in targets.iter().enumerate() {
                if target >= v {
                    return Err(TensorError::IndexOutOfRange {
                        what: "target",
                        index: target,
                        bound: v,
                    });
                }
                let row = logits.row(r);
                let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[target];
                probs.extend(row.iter().map(|&x| (x - lse).exp()));
            }
            let mean = total / F::from_usize(t);
            (Tensor::scalar(mean), probs)
        };
        Ok(self.graph.record(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Rectangular block `rows × cols` of a rank-2 tensor starting at `(row0, col0)`.
    pub fn slice(self, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let (m, n) = x.dims2("slice")?;
            if row0 + rows > m || col0 + cols > n {
                return Err(TensorError::ShapeMismatch {
                    op: "slice",
                    lhs: x.shape().to_vec(),
                    rhs: vec![row0 + rows, col0 + cols],
                });
            }
            let mut out = Vec::with_capacity(rows * cols);
            for r in row0..row0 + rows {
                out.extend_from_slice(&x.data()[r * n + col0..r * n + col0 + cols]);
            }
            Tensor::new([rows, cols], out)?
        };
        Ok(self.graph.record(
            value,
            Op::Slice {
                x: self.id,
                row0,
                col0,
            },
        ))
    }

    /// Side-by-side concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let rows = nodes[first.id].value.dims2("concat_cols")?.0;
            let mut total = 0;
            for p in parts {
                first.same_graph(p);
                let (r, c) = nodes[p.id].value.dims2("concat_cols")?;
                if r != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[first.id].value.shape().to_vec(),
                        rhs: nodes[p.id].value.shape().to_vec(),
                    });
                }
                total += c;
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::new([rows, total], out)?
        };
        Ok(graph.record(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let cols = nodes[first.id].value.dims2("concat_rows")?.1;
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                first.same_graph(p);
                let (r, c) = nodes[p.id].value.dims2("concat_rows")?;
                if c != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: nodes[first.id].value.shape().to_vec(),
                        rhs: nodes[p.id].value.shape().to_vec(),
                    });
                }
                rows += r;
                out.extend_from_slice(nodes[p.id].value.data());
            }
            Tensor::new([rows, cols], out)?
        };
        Ok(graph.record(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Rotates consecutive element pairs `(2i, 2i+1)` of the flattened tensor
    /// by the angle whose cosine and sine are `cos[i]`, `sin[i]`.
    pub fn rotate_pairs(self, cos: Rc<Vec<F>>, sin: Rc<Vec<F>>) -> Result<Self> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            if x.numel() != 2 * cos.len() || cos.len() != sin.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "rotate_pairs",
                    lhs: x.shape().to_vec(),
                    rhs: vec![cos.len(), sin.len()],
                });
            }
            let xd = x.data();
            let mut out = Vec::with_capacity(xd.len());
            for (i, (&c, &s)) in cos.iter().zip(sin.iter()).enumerate() {
                let (a, b) = (xd[2 * i], xd[2 * i + 1]);
                out.push(a * c - b * s);
                out.push(a * s + b * c);
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        Ok(self.graph.record(value, Op::RotatePairs { x: self.id, cos, sin }))
    }
}
