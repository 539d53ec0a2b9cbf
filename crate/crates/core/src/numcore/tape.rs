//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Tape`]; nodes only ever reference
//! earlier nodes, so a single reverse sweep in insertion order is a valid
//! topological traversal. Shapes are validated before any numeric work.

use super::params::{Group, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ColMean(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    RowDot(Var, Var),
    SegmentLogSumExp(Var, Vec<usize>),
    /// Inputs, epsilon and the sigmoid gate from the forward pass.
    Dice([Var; 4], f64, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::PowScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::ColMean(a)
            | Op::SumAll(a)
            | Op::GatherRows(a, _)
            | Op::SegmentSum(a, _)
            | Op::SegmentLogSumExp(a, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Dice(v, ..) => v.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when unreachable.
    pub fn of(&self, var: Var) -> Option<&[f64]> {
        self.per_node.get(var.0).and_then(|g| g.as_deref())
    }

    /// Writes every tracked parameter gradient into the store's gradient
    /// slots, replacing what was there. Tracked parameters that the root does
    /// not reach receive zeros.
    pub fn write_into(&self, store: &mut ParamStore) {
        for &(id, _) in &self.params {
            store.get_mut(id).clear_grad();
        }
        // A parameter recorded more than once sums its contributions.
        for &(id, var) in &self.params {
            let t = store.get_mut(id);
            match self.per_node[var.0].as_deref() {
                Some(g) => t.accumulate_grad(g),
                None => {
                    let zeros = vec![0.0; t.len()];
                    t.accumulate_grad(&zeros);
                }
            }
        }
    }

    /// Parameters that were differentiable on the tape.
    pub fn tracked_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|(id, _)| *id)
    }

    /// Gradient for one parameter if it was tracked on the tape, summed over
    /// every place it was recorded.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for (_, var) in self.params.iter().filter(|(p, _)| *p == id) {
            if let Some(g) = self.per_node[var.0].as_deref() {
                match out.as_mut() {
                    Some(acc) => add_into(acc, g),
                    None => out = Some(g.to_vec()),
                }
            }
        }
        out
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    tracked: Option<Vec<Group>>,
    params: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape on which every parameter is differentiable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracked: None,
            params: Vec::new(),
        }
    }

    /// A tape on which only parameters of the given groups receive gradients;
    /// all others enter as constants.
    pub fn tracking(groups: &[Group]) -> Self {
        Self {
            nodes: Vec::new(),
            tracked: Some(groups.to_vec()),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_node(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_node(value, false)
    }

    /// Records a stored parameter. It is differentiable when its group is
    /// tracked by this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let track = match &self.tracked {
            None => true,
            Some(groups) => groups.contains(&store.group(id)),
        };
        let var = self.leaf_node(store.get(id).clone(), track);
        if track {
            self.params.push((id, var));
        }
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<[usize; 2]> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sr,
            });
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (self.value(a).data(), self.value(b).data());
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    }

    fn row_map(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let x = self.value(a);
        let r = self.value(row).data();
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.data().chunks_exact(x.cols()) {
            out.extend(chunk.iter().zip(r).map(|(&v, &w)| f(v, w)));
        }
        out
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).data().iter().map(|&v| f(v)).collect()
    }

    fn make(&mut self, shape: [usize; 2], data: Vec<f64>, op: Op) -> Result<Var> {
        let t = Tensor::new(shape[0], shape[1], data)?;
        Ok(self.push(t, op))
    }

    /// Matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (x, w) = (self.value(a).data(), self.value(b).data());
            for i in 0..m {
                let dst = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let coef = x[i * k + p];
                    if coef == 0.0 {
                        continue;
                    }
                    let src = &w[p * n..(p + 1) * n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
        self.make([m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.check_same("add", a, b)?;
        let d = self.zip_map(a, b, |p, q| p + q);
        self.make(s, d, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.check_same("sub", a, b)?;
        let d = self.zip_map(a, b, |p, q| p - q);
        self.make(s, d, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.check_same("mul", a, b)?;
        let d = self.zip_map(a, b, |p, q| p * q);
        self.make(s, d, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let s = self.check_row("add_row", a, row)?;
        let d = self.row_map(a, row, |p, q| p + q);
        self.make(s, d, Op::AddRow(a, row))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let s = self.check_row("sub_row", a, row)?;
        let d = self.row_map(a, row, |p, q| p - q);
        self.make(s, d, Op::SubRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let s = self.check_row("mul_row", a, row)?;
        let d = self.row_map(a, row, |p, q| p * q);
        self.make(s, d, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` for an `m x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != [sa[0], 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: sa,
                right: sc,
            });
        }
        let x = self.value(a);
        let c = self.value(col).data();
        let mut d = Vec::with_capacity(x.len());
        for (chunk, &w) in x.data().chunks_exact(sa[1]).zip(c) {
            d.extend(chunk.iter().map(|v| v * w));
        }
        self.make(sa, d, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let d = self.map(a, |v| v * c);
        self.make(self.shape(a), d, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let d = self.map(a, |v| v + c);
        self.make(self.shape(a), d, Op::AddScalar(a))
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        let d = self.map(a, |v| v.powf(p));
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pow_scalar".into()));
        }
        self.make(self.shape(a), d, Op::PowScalar(a, p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let d = self.map(a, logistic);
        self.make(self.shape(a), d, Op::Sigmoid(a))
    }

    /// Fused Dice gate `x (alpha + p (1 - alpha))` with
    /// `p = sigmoid((x - mean) / sqrt(var + eps))`; `alpha`, `mean` and `var`
    /// are `1 x n` rows.
    pub fn dice(&mut self, x: Var, alpha: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let s = self.check_row("dice", x, alpha)?;
        self.check_row("dice", x, mean)?;
        self.check_row("dice", x, var)?;
        let (a, m, v) = (
            self.value(alpha).data(),
            self.value(mean).data(),
            self.value(var).data(),
        );
        if v.iter().any(|&v| v + eps <= 0.0 || v.is_nan()) {
            return Err(Error::NonFinite("dice variance".into()));
        }
        let inv: Vec<f64> = v.iter().map(|&v| (v + eps).powf(-0.5)).collect();
        let xs = self.value(x).data();
        let mut gate = Vec::with_capacity(xs.len());
        let mut d = Vec::with_capacity(xs.len());
        for chunk in xs.chunks_exact(s[1]) {
            for (c, &xi) in chunk.iter().enumerate() {
                let p = logistic((xi - m[c]) * inv[c]);
                gate.push(p);
                d.push(xi * (a[c] + p * (1.0 - a[c])));
            }
        }
        self.make(s, d, Op::Dice([x, alpha, mean, var], eps, gate))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let d = self.map(a, f64::tanh);
        self.make(self.shape(a), d, Op::Tanh(a))
    }

    /// Column-wise mean over rows, producing a `1 x n` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let mut out = vec![0.0; n];
        for r in self.value(a).data().chunks_exact(n) {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.make([1, n], out, Op::ColMean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.make([1, 1], vec![s], Op::SumAll(a))
    }

    /// Mean of every entry as a `1 x 1` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: s,
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.make([rows, total], out, Op::ConcatCols(parts.to_vec()))
    }

    /// Selects rows of `table` by index (rows may repeat).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(table);
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(self.value(table).row_slice(i));
        }
        self.make(
            [indices.len(), n],
            out,
            Op::GatherRows(table, indices.to_vec()),
        )
    }

    /// Sums rows into `segments` output rows; row `i` goes to `segment_of[i]`.
    /// Segments that receive no rows are zero.
    pub fn segment_sum(&mut self, a: Var, segment_of: &[usize], segments: usize) -> Result<Var> {
        let [m, n] = self.shape(a);
        if segment_of.len() != m {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                left: [m, n],
                right: [segment_of.len(), 1],
            });
        }
        let mut out = vec![0.0; segments * n];
        for (i, &s) in segment_of.iter().enumerate() {
            if s >= segments {
                return Err(Error::IndexOutOfRange {
                    op: "segment_sum",
                    index: s,
                    len: segments,
                });
            }
            let src = self.value(a).row_slice(i);
            out[s * n..(s + 1) * n]
                .iter_mut()
                .zip(src)
                .for_each(|(o, v)| *o += v);
        }
        self.make([segments, n], out, Op::SegmentSum(a, segment_of.to_vec()))
    }

    /// Row-wise dot products of two equally shaped matrices, as an `m x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, _] = self.check_same("row_dot", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = (0..m)
            .map(|r| {
                x.row_slice(r)
                    .iter()
                    .zip(y.row_slice(r))
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect();
        self.make([m, 1], out, Op::RowDot(a, b))
    }

    /// Log-sum-exp of an `m x 1` column grouped into segments, computed with
    /// max subtraction. Every segment must be nonempty.
    pub fn segment_logsumexp(
        &mut self,
        col: Var,
        segment_of: &[usize],
        segments: usize,
    ) -> Result<Var> {
        let [m, n] = self.shape(col);
        if n != 1 || segment_of.len() != m {
            return Err(Error::ShapeMismatch {
                op: "segment_logsumexp",
                left: [m, n],
                right: [segment_of.len(), 1],
            });
        }
        let x = self.value(col).data();
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (i, &s) in segment_of.iter().enumerate() {
            if s >= segments {
                return Err(Error::IndexOutOfRange {
                    op: "segment_logsumexp",
                    index: s,
                    len: segments,
                });
            }
            max[s] = max[s].max(x[i]);
        }
        if max.contains(&f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument(
                "segment_logsumexp over an empty segment".into(),
            ));
        }
        let mut acc = vec![0.0; segments];
        for (i, &s) in segment_of.iter().enumerate() {
            acc[s] += (x[i] - max[s]).exp();
        }
        let out = acc.iter().zip(&max).map(|(a, m)| m + a.ln()).collect();
        self.make(
            [segments, 1],
            out,
            Op::SegmentLogSumExp(col, segment_of.to_vec()),
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(Error::CycleDetected {
                    node: i,
                    input: bad.0,
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients {
            per_node: grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let x = self.value(*a);
                let w = self.value(*b);
                let (m, k) = (x.rows(), x.cols());
                let n = w.cols();
                if wants(*a) {
                    send(grads, *a, &mut |da| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let wp = &w.data()[p * n..(p + 1) * n];
                                da[i * k + p] += dot(gi, wp);
                            }
                        }
                    });
                }
                if wants(*b) {
                    send(grads, *b, &mut |db| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let coef = x.data()[i * k + p];
                                if coef == 0.0 {
                                    continue;
                                }
                                db[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(gi)
                                    .for_each(|(d, u)| *d += coef * u);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, &mut |d| add_into(d, g));
                send(grads, *b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                send(grads, *a, &mut |d| add_into(d, g));
                send(grads, *b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, u)| *d -= u)
                });
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                send(grads, *a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((d, u), v)| *d += u * v)
                });
                send(grads, *b, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, u), v)| *d += u * v)
                });
            }
            Op::AddRow(a, row) | Op::SubRow(a, row) => {
                let sign = if matches!(node.op, Op::AddRow(..)) {
                    1.0
                } else {
                    -1.0
                };
                let n = self.shape(*a)[1];
                send(grads, *a, &mut |d| add_into(d, g));
                send(grads, *row, &mut |d| {
                    for r in g.chunks_exact(n) {
                        d.iter_mut().zip(r).for_each(|(d, u)| *d += sign * u);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.shape(*a)[1];
                let x = self.value(*a).data();
                let rv = self.value(*row).data();
                send(grads, *a, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        dr.iter_mut()
                            .zip(gr)
                            .zip(rv)
                            .for_each(|((d, u), w)| *d += u * w);
                    }
                });
                send(grads, *row, &mut |d| {
                    for (gr, xr) in g.chunks_exact(n).zip(x.chunks_exact(n)) {
                        d.iter_mut()
                            .zip(gr)
                            .zip(xr)
                            .for_each(|((d, u), v)| *d += u * v);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let n = self.shape(*a)[1];
                let x = self.value(*a).data();
                let c = self.value(*col).data();
                send(grads, *a, &mut |d| {
                    for ((dr, gr), w) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(c) {
                        dr.iter_mut().zip(gr).for_each(|(d, u)| *d += u * w);
                    }
                });
                send(grads, *col, &mut |d| {
                    for ((dc, gr), xr) in d.iter_mut().zip(g.chunks_exact(n)).zip(x.chunks_exact(n))
                    {
                        *dc += dot(gr, xr);
                    }
                });
            }
            Op::Scale(a, c) => {
                send(grads, *a, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, u)| *d += c * u)
                });
            }
            Op::AddScalar(a) => send(grads, *a, &mut |d| add_into(d, g)),
            Op::PowScalar(a, p) => {
                let x = self.value(*a).data();
                send(grads, *a, &mut |d| {
                    for ((d, u), v) in d.iter_mut().zip(g).zip(x) {
                        *d += u * p * v.powf(p - 1.0);
                    }
                });
            }
            Op::Dice([x, alpha, mean, var], eps, gate) => {
                let xs = self.value(*x).data();
                let (a, m, v) = (
                    self.value(*alpha).data(),
                    self.value(*mean).data(),
                    self.value(*var).data(),
                );
                let n = a.len();
                let inv: Vec<f64> = v.iter().map(|&v| (v + eps).powf(-0.5)).collect();
                let (mut dx, mut da, mut dm, mut dv) = (
                    vec![0.0; xs.len()],
                    vec![0.0; n],
                    vec![0.0; n],
                    vec![0.0; n],
                );
                let rows = xs
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(gate.chunks_exact(n));
                for (r, ((xr, gr), pr)) in rows.enumerate() {
                    for c in 0..n {
                        let (xi, u, p) = (xr[c], gr[c], pr[c]);
                        let z = (xi - m[c]) * inv[c];
                        // d y / d z
                        let dz = u * xi * (1.0 - a[c]) * p * (1.0 - p);
                        dx[r * n + c] = u * (a[c] + p * (1.0 - a[c])) + dz * inv[c];
                        da[c] += u * xi * (1.0 - p);
                        dm[c] -= dz * inv[c];
                        dv[c] -= 0.5 * dz * z / (v[c] + eps);
                    }
                }
                send(grads, *x, &mut |d| add_into(d, &dx));
                send(grads, *alpha, &mut |d| add_into(d, &da));
                send(grads, *mean, &mut |d| add_into(d, &dm));
                send(grads, *var, &mut |d| add_into(d, &dv));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(grads, *a, &mut |d| {
                    for ((d, u), s) in d.iter_mut().zip(g).zip(y) {
                        *d += u * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(grads, *a, &mut |d| {
                    for ((d, u), t) in d.iter_mut().zip(g).zip(y) {
                        *d += u * (1.0 - t * t);
                    }
                });
            }
            Op::ColMean(a) => {
                let [m, n] = self.shape(*a);
                let inv = 1.0 / m as f64;
                send(grads, *a, &mut |d| {
                    for r in d.chunks_exact_mut(n) {
                        r.iter_mut().zip(g).for_each(|(d, u)| *d += u * inv);
                    }
                });
            }
            Op::SumAll(a) => {
                let u = g[0];
                send(grads, *a, &mut |d| d.iter_mut().for_each(|d| *d += u));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    send(grads, p, &mut |d| {
                        for (r, dr) in d.chunks_exact_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(dr, src);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let n = self.shape(*table)[1];
                send(grads, *table, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SegmentSum(a, seg) => {
                let n = self.shape(*a)[1];
                send(grads, *a, &mut |d| {
                    for (r, &s) in seg.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[s * n..(s + 1) * n]);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let n = self.shape(*a)[1];
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                send(grads, *a, &mut |d| {
                    for ((dr, yr), u) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g) {
                        dr.iter_mut().zip(yr).for_each(|(d, v)| *d += u * v);
                    }
                });
                send(grads, *b, &mut |d| {
                    for ((dr, xr), u) in d.chunks_exact_mut(n).zip(x.chunks_exact(n)).zip(g) {
                        dr.iter_mut().zip(xr).for_each(|(d, v)| *d += u * v);
                    }
                });
            }
            Op::SegmentLogSumExp(col, seg) => {
                let x = self.value(*col).data();
                let lse = node.value.data();
                send(grads, *col, &mut |d| {
                    for (i, &s) in seg.iter().enumerate() {
                        d[i] += g[s] * (x[i] - lse[s]).exp();
                    }
                });
            }
        }
    }
}

// Four partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
