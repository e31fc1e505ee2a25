use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Mul,
    Add,
}

#[derive(Debug)]
enum Op {
    /// Differentiable input owned by the tape.
    Leaf,
    /// Borrowed parameter, gradient reported under the given key.
    Param(usize),
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    AddN(Vec<usize>),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    SliceRows { src: usize, start: usize },
    RowLookup { table: usize, row: usize },
    SoftmaxXent { logits: usize, target: usize, probs: Vec<f64> },
    /// Column-wise cross-entropy summed over columns with a target.
    XentColumns { logits: usize, targets: Vec<Option<usize>>, probs: Vec<f64> },
    /// `a + b·1ᵀ` for a column `b`.
    AddBias(usize, usize),
    /// Column `j` is row `ids[j]` of the table.
    Gather { table: usize, ids: Vec<usize> },
    /// Column `j` from `new` where `mask[j]`, else from `old`.
    Blend { new: usize, old: usize, mask: Vec<bool> },
    Sum(usize),
    Map { src: usize, deriv: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; inputs always precede outputs.
#[derive(Debug)]
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> Result<&Node<'a>> {
        if v.tape != self.id {
            return Err(TensorError::NotOnTape);
        }
        self.nodes.get(v.index).ok_or(TensorError::NotOnTape)
    }

    fn shape_of(&self, v: Var) -> Result<Vec<usize>> {
        let n = self.node(v)?;
        Ok(vec![n.rows, n.cols])
    }

    /// Registers a borrowed parameter; its gradient is reported under `key`.
    pub fn param(&mut self, key: usize, t: &'a Tensor) -> Var {
        let (r, c) = dims(t);
        self.push(r, c, Cow::Borrowed(t.values()), Op::Param(key), true)
    }

    /// Records an owned differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let (r, c) = dims(&t);
        self.push(r, c, Cow::Owned(t.into_values()), Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = dims(&t);
        self.push(r, c, Cow::Owned(t.into_values()), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).expect("value: variable from another tape").value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v).expect("shape: variable from another tape");
        (n.rows, n.cols)
    }

    /// Copies a recorded value out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v).expect("to_tensor: variable from another tape");
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).unwrap()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.cols != nb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![na.rows, na.cols],
                right: vec![nb.rows, nb.cols],
            });
        }
        let (m, k, n) = (na.rows, na.cols, nb.cols);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&na.value, &nb.value, &mut out, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMul(a.index, b.index), rg))
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(TensorError::ShapeMismatch {
                op: if kind == Elementwise::Add { "add" } else { "mul" },
                left: vec![na.rows, na.cols],
                right: vec![nb.rows, nb.cols],
            });
        }
        let out: Vec<f64> = match kind {
            Elementwise::Add => na.value.iter().zip(nb.value.iter()).map(|(x, y)| x + y).collect(),
            _ => na.value.iter().zip(nb.value.iter()).map(|(x, y)| x * y).collect(),
        };
        let (r, c, rg) = (na.rows, na.cols, na.requires_grad || nb.requires_grad);
        let op = if kind == Elementwise::Add { Op::Add(a.index, b.index) } else { Op::Mul(a.index, b.index) };
        Ok(self.push(r, c, Cow::Owned(out), op, rg))
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let out: Vec<f64> = match kind {
            Elementwise::Sigmoid => na.value.iter().map(|&x| kernels::sigmoid(x)).collect(),
            _ => na.value.iter().map(|&x| x.tanh()).collect(),
        };
        let (r, c, rg) = (na.rows, na.cols, na.requires_grad);
        let op = if kind == Elementwise::Sigmoid { Op::Sigmoid(a.index) } else { Op::Tanh(a.index) };
        Ok(self.push(r, c, Cow::Owned(out), op, rg))
    }

    /// Pointwise op; `b` is required for `Mul`/`Add` and ignored otherwise.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match kind {
            Elementwise::Sigmoid | Elementwise::Tanh => self.unary(kind, a),
            Elementwise::Mul | Elementwise::Add => {
                let b = b.ok_or(TensorError::ShapeMismatch {
                    op: "elementwise",
                    left: self.shape_of(a)?,
                    right: vec![],
                })?;
                self.binary(kind, a, b)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Tanh, a)
    }

    /// Sum of equally shaped values.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidShape { shape: vec![], len: 0 })?;
        let (r, c) = {
            let n = self.node(first)?;
            (n.rows, n.cols)
        };
        let mut out = vec![0.0; r * c];
        let mut rg = false;
        for &p in parts {
            let n = self.node(p)?;
            if n.rows != r || n.cols != c {
                return Err(TensorError::ShapeMismatch { op: "add_n", left: vec![r, c], right: vec![n.rows, n.cols] });
            }
            out.iter_mut().zip(n.value.iter()).for_each(|(o, v)| *o += v);
            rg |= n.requires_grad;
        }
        let idx = parts.iter().map(|p| p.index).collect();
        Ok(self.push(r, c, Cow::Owned(out), Op::AddN(idx), rg))
    }

    /// Scalar-times-tensor.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|v| v * s).collect();
        let (r, c, rg) = (na.rows, na.cols, na.requires_grad);
        Ok(self.push(r, c, Cow::Owned(out), Op::Scale(a.index, s), rg))
    }

    /// Vertical stack of values with a common column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.node(p)?.cols,
            None => return Err(TensorError::InvalidShape { shape: vec![0, 1], len: 0 }),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let n = self.node(p)?;
            if n.cols != cols {
                return Err(TensorError::ShapeMismatch { op: "concat_rows", left: vec![rows, cols], right: vec![n.rows, n.cols] });
            }
            out.extend_from_slice(&n.value);
            rows += n.rows;
            rg |= n.requires_grad;
        }
        let idx = parts.iter().map(|p| p.index).collect();
        Ok(self.push(rows, cols, Cow::Owned(out), Op::Concat(idx), rg))
    }

    /// Adds column `b` to every column of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if nb.cols != 1 || nb.rows != na.rows {
            return Err(TensorError::ShapeMismatch { op: "add_bias", left: vec![na.rows, na.cols], right: vec![nb.rows, nb.cols] });
        }
        let c = na.cols;
        let out: Vec<f64> = na.value.iter().enumerate().map(|(i, x)| x + nb.value[i / c]).collect();
        let (r, rg) = (na.rows, na.requires_grad || nb.requires_grad);
        Ok(self.push(r, c, Cow::Owned(out), Op::AddBias(a.index, b.index), rg))
    }

    /// Rows `ids` of a table, laid out as columns (`cols(table) × ids.len()`).
    pub fn gather_columns(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = self.node(table)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![nt.cols, 0], len: 0 });
        }
        if let Some(&bad) = ids.iter().find(|&&r| r >= nt.rows) {
            return Err(TensorError::RowOutOfRange { row: bad, rows: nt.rows });
        }
        let (k, b) = (nt.cols, ids.len());
        let mut out = vec![0.0; k * b];
        for (j, &id) in ids.iter().enumerate() {
            for (r, &v) in nt.value[id * k..(id + 1) * k].iter().enumerate() {
                out[r * b + j] = v;
            }
        }
        let rg = nt.requires_grad;
        Ok(self.push(k, b, Cow::Owned(out), Op::Gather { table: table.index, ids: ids.to_vec() }, rg))
    }

    /// Per-column select between two equally shaped values.
    pub fn blend_columns(&mut self, new: Var, old: Var, mask: &[bool]) -> Result<Var> {
        let (nn, no) = (self.node(new)?, self.node(old)?);
        if nn.rows != no.rows || nn.cols != no.cols || mask.len() != nn.cols {
            return Err(TensorError::ShapeMismatch { op: "blend_columns", left: vec![nn.rows, nn.cols], right: vec![no.rows, no.cols] });
        }
        let c = nn.cols;
        let out: Vec<f64> = (0..nn.value.len()).map(|i| if mask[i % c] { nn.value[i] } else { no.value[i] }).collect();
        let (r, rg) = (nn.rows, nn.requires_grad || no.requires_grad);
        Ok(self.push(r, c, Cow::Owned(out), Op::Blend { new: new.index, old: old.index, mask: mask.to_vec() }, rg))
    }

    /// Rows `start..start+len` of a matrix or vector.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = self.node(a)?;
        if len == 0 || start + len > na.rows {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                left: vec![na.rows, na.cols],
                right: vec![start, len],
            });
        }
        let c = na.cols;
        let out = na.value[start * c..(start + len) * c].to_vec();
        let rg = na.requires_grad;
        Ok(self.push(len, c, Cow::Owned(out), Op::SliceRows { src: a.index, start }, rg))
    }

    /// Row `row` of a table, returned as a column vector.
    pub fn row_lookup(&mut self, table: Var, row: usize) -> Result<Var> {
        let nt = self.node(table)?;
        if row >= nt.rows {
            return Err(TensorError::RowOutOfRange { row, rows: nt.rows });
        }
        let c = nt.cols;
        let out = nt.value[row * c..(row + 1) * c].to_vec();
        let rg = nt.requires_grad;
        Ok(self.push(c, 1, Cow::Owned(out), Op::RowLookup { table: table.index, row }, rg))
    }

    /// `-log softmax(logits)[target]` for a column of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let nl = self.node(logits)?;
        if nl.cols != 1 {
            return Err(TensorError::NotAVector { op: "softmax_cross_entropy", shape: vec![nl.rows, nl.cols] });
        }
        if target >= nl.rows {
            return Err(TensorError::TargetOutOfRange { target, size: nl.rows });
        }
        let log_probs = kernels::log_softmax(&nl.value);
        let loss = -log_probs[target];
        let rg = nl.requires_grad;
        let probs = if rg { log_probs.iter().map(|v| v.exp()).collect() } else { Vec::new() };
        let op = Op::SoftmaxXent { logits: logits.index, target, probs };
        Ok(self.push(1, 1, Cow::Owned(vec![loss]), op, rg))
    }

    /// Sum over columns `j` with `targets[j] = Some(t)` of
    /// `-log softmax(logits[:, j])[t]`.
    pub fn softmax_cross_entropy_columns(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let nl = self.node(logits)?;
        let (v, b) = (nl.rows, nl.cols);
        if targets.len() != b {
            return Err(TensorError::ShapeMismatch { op: "softmax_cross_entropy_columns", left: vec![v, b], right: vec![targets.len()] });
        }
        let rg = nl.requires_grad;
        let mut probs = if rg { vec![0.0; v * b] } else { Vec::new() };
        let mut loss = 0.0;
        let mut column = vec![0.0; v];
        for (j, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(TensorError::TargetOutOfRange { target: t, size: v });
            }
            for (r, x) in column.iter_mut().enumerate() {
                *x = nl.value[r * b + j];
            }
            let lp = kernels::log_softmax(&column);
            loss += -lp[t];
            if rg {
                for (r, l) in lp.iter().enumerate() {
                    probs[r * b + j] = l.exp();
                }
            }
        }
        let op = Op::XentColumns { logits: logits.index, targets: targets.to_vec(), probs };
        Ok(self.push(1, 1, Cow::Owned(vec![loss]), op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let s = na.value.iter().sum();
        let rg = na.requires_grad;
        Ok(self.push(1, 1, Cow::Owned(vec![s]), Op::Sum(a.index), rg))
    }

    /// Custom pointwise op given a forward map and its derivative.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|&x| f(x)).collect();
        let deriv = na.value.iter().map(|&x| df(x)).collect();
        let (r, c, rg) = (na.rows, na.cols, na.requires_grad);
        Ok(self.push(r, c, Cow::Owned(out), Op::Map { src: a.index, deriv }, rg))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate over every path
    /// through which a value was used.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss)?;
        if ln.rows * ln.cols != 1 {
            return Err(TensorError::NonScalarLoss(vec![ln.rows, ln.cols]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf | Op::Param(_) | Op::Constant => continue,
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[*a], &nodes[*b]);
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        kernels::matmul_nt_acc(g, &nb.value, ga, m, k, n);
                    }
                    if let Some(gb) = grad_slot(lower, nodes, *b) {
                        kernels::matmul_tn_acc(&na.value, g, gb, m, k, n);
                    }
                }
                Op::Add(a, b) => {
                    for i in [*a, *b] {
                        if let Some(gi) = grad_slot(lower, nodes, i) {
                            gi.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::AddN(parts) => {
                    for &i in parts {
                        if let Some(gi) = grad_slot(lower, nodes, i) {
                            gi.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        for ((x, y), z) in ga.iter_mut().zip(g).zip(vb.iter()) {
                            *x += y * z;
                        }
                    }
                    if let Some(gb) = grad_slot(lower, nodes, *b) {
                        for ((x, y), z) in gb.iter_mut().zip(g).zip(va.iter()) {
                            *x += y * z;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        for ((x, y), s) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                            *x += y * s * (1.0 - s);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        for ((x, y), t) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                            *x += y * (1.0 - t * t);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &i in parts {
                        let len = nodes[i].rows * nodes[i].cols;
                        if let Some(gi) = grad_slot(lower, nodes, i) {
                            gi.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { src, start } => {
                    let c = nodes[*src].cols;
                    if let Some(gs) = grad_slot(lower, nodes, *src) {
                        gs[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::RowLookup { table, row } => {
                    let c = nodes[*table].cols;
                    if let Some(gt) = grad_slot(lower, nodes, *table) {
                        gt[row * c..(row + 1) * c].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::SoftmaxXent { logits, target, probs } => {
                    let scale = g[0];
                    if let Some(gl) = grad_slot(lower, nodes, *logits) {
                        for (i, (x, p)) in gl.iter_mut().zip(probs).enumerate() {
                            let onehot = if i == *target { 1.0 } else { 0.0 };
                            *x += scale * (p - onehot);
                        }
                    }
                }
                Op::XentColumns { logits, targets, probs } => {
                    let scale = g[0];
                    let b = targets.len();
                    if let Some(gl) = grad_slot(lower, nodes, *logits) {
                        for (j, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for r in 0..nodes[*logits].rows {
                                let onehot = if r == t { 1.0 } else { 0.0 };
                                gl[r * b + j] += scale * (probs[r * b + j] - onehot);
                            }
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                    let c = node.cols;
                    if let Some(gb) = grad_slot(lower, nodes, *bias) {
                        for (r, x) in gb.iter_mut().enumerate() {
                            *x += g[r * c..(r + 1) * c].iter().sum::<f64>();
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let k = nodes[*table].cols;
                    let b = ids.len();
                    if let Some(gt) = grad_slot(lower, nodes, *table) {
                        for (j, &id) in ids.iter().enumerate() {
                            for r in 0..k {
                                gt[id * k + r] += g[r * b + j];
                            }
                        }
                    }
                }
                Op::Blend { new, old, mask } => {
                    let c = mask.len();
                    for (src, want) in [(*new, true), (*old, false)] {
                        if let Some(gs) = grad_slot(lower, nodes, src) {
                            for (i, (x, y)) in gs.iter_mut().zip(g).enumerate() {
                                if mask[i % c] == want {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let scale = g[0];
                    if let Some(ga) = grad_slot(lower, nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += scale);
                    }
                }
                Op::Map { src, deriv } => {
                    if let Some(gs) = grad_slot(lower, nodes, *src) {
                        for ((x, y), d) in gs.iter_mut().zip(g).zip(deriv) {
                            *x += y * d;
                        }
                    }
                }
            }
            // Intermediate gradients are not needed once propagated.
            upper[0] = None;
        }

        let mut leaves = Vec::new();
        let mut params = Vec::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[idx].op {
                Op::Param(key) => params.push((key, g)),
                Op::Leaf => leaves.push((idx, g)),
                _ => {}
            }
        }
        Ok(Gradients { tape: self.id, leaves, params })
    }
}

fn grad_slot<'g>(lower: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], i: usize) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[i];
    if !n.requires_grad {
        return None;
    }
    Some(lower[i].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Vec<f64>)>,
    params: Vec<(usize, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of an owned leaf or a parameter variable. `None` when the
    /// loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.iter().find(|(i, _)| *i == v.index).map(|(_, g)| g.as_slice())
    }

    /// Parameter gradients as `(key, grad)` pairs in tape order.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.params.iter().map(|(k, g)| (*k, g.as_slice()))
    }

    pub fn param(&self, key: usize) -> Option<&[f64]> {
        self.params.iter().find(|(k, _)| *k == key).map(|(_, g)| g.as_slice())
    }
}
