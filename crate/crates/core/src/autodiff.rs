//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep. Values are `f64` throughout; tensors are rank 1 or 2,
//! row-major. Broadcasting is limited to scalar-vs-tensor — every other
//! shape combination must match exactly.

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Tanh {
        x: TensorId,
    },
    LeakyRelu {
        x: TensorId,
        slope: f64,
    },
    Elu {
        x: TensorId,
    },
    Exp {
        x: TensorId,
    },
    Ln {
        x: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    /// a * b^T without materializing the transpose.
    MatmulNt {
        a: TensorId,
        b: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LogSoftmax {
        x: TensorId,
        axis: usize,
    },
    SumAll {
        x: TensorId,
    },
    ColSum {
        x: TensorId,
    },
    ColMax {
        x: TensorId,
        argmax: Vec<usize>,
    },
    ConcatCols {
        a: TensorId,
        b: TensorId,
    },
    StackRows {
        parts: Vec<TensorId>,
    },
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: TensorId,
        s: TensorId,
    },
    OuterAdd {
        col: TensorId,
        row: TensorId,
    },
    Reshape {
        x: TensorId,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep, addressed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Recording tape. One tape per forward pass; distinct tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        id
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf_impl(data, shape, false)
    }

    pub fn leaf_grad(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf_impl(data, shape, true)
    }

    fn leaf_impl(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!(
                "tensors must be rank 1 or 2, got {:?}",
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn binary_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb || numel(sb) == 1 {
            Ok(sa.clone())
        } else if numel(sa) == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::Shape(format!(
                "{what}: incompatible shapes {sa:?} vs {sb:?}"
            )))
        }
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let shape = self.binary_shape(a, b, what)?;
        let n = numel(&shape);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(n);
        if da.len() == db.len() {
            for i in 0..n {
                out.push(f(da[i], db[i]));
            }
        } else if db.len() == 1 {
            for i in 0..n {
                out.push(f(da[i], db[0]));
            }
        } else {
            for i in 0..n {
                out.push(f(da[0], db[i]));
            }
        }
        Ok((out, shape))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (out, shape) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(out, shape, rg, Op::Scale { x, c })
    }

    // ── elementwise unary ───────────────────────────────────────────

    fn unary(&mut self, x: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| f(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(out, shape, rg, op)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Tanh { x }, f64::tanh)
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn elu(&mut self, x: TensorId) -> TensorId {
        self.unary(
            x,
            Op::Elu { x },
            |v| if v > 0.0 { v } else { v.exp() - 1.0 },
        )
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(v) = self.nodes[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("ln of non-positive value {v}")));
        }
        Ok(self.unary(x, Op::Ln { x }, f64::ln))
    }

    // ── matrix products ─────────────────────────────────────────────

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Shape(format!(
                "{what}: expected rank-2 tensor, got {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions {k} vs {k2}"
            )));
        }
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner dimensions {k} vs {k2}"
            )));
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], rg, Op::MatmulNt { a, b }))
    }

    // ── softmax family ──────────────────────────────────────────────

    fn lanes(&self, id: TensorId, axis: usize) -> Result<(usize, usize, usize, usize)> {
        // Returns (n_lanes, lane_len, lane_stride, elem_stride).
        let s = &self.nodes[id.0].shape;
        match (s.len(), axis) {
            (1, 0) => Ok((1, s[0], 0, 1)),
            (2, 0) => Ok((s[1], s[0], 1, s[1])),
            (2, 1) => Ok((s[0], s[1], s[1], 1)),
            _ => Err(Error::Shape(format!("axis {axis} invalid for shape {s:?}"))),
        }
    }

    fn softmax_impl(&mut self, x: TensorId, axis: usize, log: bool) -> Result<TensorId> {
        let (n_lanes, lane_len, lane_stride, elem_stride) = self.lanes(x, axis)?;
        if lane_len == 0 {
            return Err(Error::Shape("softmax over empty axis".into()));
        }
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; data.len()];
        for lane in 0..n_lanes {
            let base = lane * lane_stride;
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(data[base + i * elem_stride]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                sum += (data[base + i * elem_stride] - max).exp();
            }
            if log {
                let lse = max + sum.ln();
                for i in 0..lane_len {
                    let idx = base + i * elem_stride;
                    out[idx] = data[idx] - lse;
                }
            } else {
                for i in 0..lane_len {
                    let idx = base + i * elem_stride;
                    out[idx] = (data[idx] - max).exp() / sum;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(out, shape, rg, op))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.softmax_impl(x, axis, true)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-column sum of a rank-2 tensor: `[r, c] -> [c]`.
    pub fn col_sum(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "col_sum")?;
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += data[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![c], rg, Op::ColSum { x }))
    }

    /// Per-column mean of a rank-2 tensor.
    pub fn col_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, _) = self.dims2(x, "col_mean")?;
        let s = self.col_sum(x)?;
        Ok(self.scale(s, 1.0 / r as f64))
    }

    /// Per-column maximum of a rank-2 tensor; ties resolve to the lowest row.
    pub fn col_max(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "col_max")?;
        if r == 0 {
            return Err(Error::Shape("col_max of empty tensor".into()));
        }
        let data = &self.nodes[x.0].data;
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = data[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![c], rg, Op::ColMax { x, argmax }))
    }

    // ── structural ops ──────────────────────────────────────────────

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (out, shape) = match (sa.len(), sb.len()) {
            (1, 1) => {
                let mut out = self.nodes[a.0].data.clone();
                out.extend_from_slice(&self.nodes[b.0].data);
                (out, vec![sa[0] + sb[0]])
            }
            (2, 2) if sa[0] == sb[0] => {
                let (r, ca, cb) = (sa[0], sa[1], sb[1]);
                let da = &self.nodes[a.0].data;
                let db = &self.nodes[b.0].data;
                let mut out = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
                }
                (out, vec![r, ca + cb])
            }
            _ => {
                return Err(Error::Shape(format!(
                    "concat_cols: incompatible shapes {sa:?} vs {sb:?}"
                )));
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, rg, Op::ConcatCols { a, b }))
    }

    /// Stacks rank-1 tensors of equal length into a `[k, len]` matrix.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("stack_rows of zero tensors".into()));
        }
        let len = match self.nodes[parts[0].0].shape.as_slice() {
            [n] => *n,
            s => {
                return Err(Error::Shape(format!(
                    "stack_rows expects rank-1 parts, got {s:?}"
                )))
            }
        };
        let mut out = Vec::with_capacity(parts.len() * len);
        let mut rg = false;
        for p in parts {
            if self.nodes[p.0].shape != [len] {
                return Err(Error::Shape("stack_rows: parts differ in length".into()));
            }
            out.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.rg(*p);
        }
        Ok(self.push(
            out,
            vec![parts.len(), len],
            rg,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Selects rows (rank 2) or elements (rank 1) by index, in the given order.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.nodes[x.0].shape.clone();
        let (rows, width) = match s.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => unreachable!(),
        };
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of range ({rows} rows)"
            )));
        }
        let data = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        let shape = if s.len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), width]
        };
        let rg = self.rg(x);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Contiguous rank-1 slice, as a gather.
    pub fn slice_1d(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Scales row `i` of `x` by `s[i]`; `x: [r, c]`, `s: [r]`.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "scale_rows input")?;
        if self.nodes[s.0].shape != [r] {
            return Err(Error::Shape(format!(
                "scale_rows: scale shape {:?} does not match {r} rows",
                self.nodes[s.0].shape
            )));
        }
        let dx = &self.nodes[x.0].data;
        let ds = &self.nodes[s.0].data;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(dx[i * c + j] * ds[i]);
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, vec![r, c], rg, Op::ScaleRows { x, s }))
    }

    /// `out[i][j] = col[i] + row[j]` for rank-1 inputs.
    pub fn outer_add(&mut self, col: TensorId, row: TensorId) -> Result<TensorId> {
        let m = match self.nodes[col.0].shape.as_slice() {
            [n] => *n,
            s => {
                return Err(Error::Shape(format!(
                    "outer_add col: expected rank 1, got {s:?}"
                )))
            }
        };
        let n = match self.nodes[row.0].shape.as_slice() {
            [n] => *n,
            s => {
                return Err(Error::Shape(format!(
                    "outer_add row: expected rank 1, got {s:?}"
                )))
            }
        };
        let dc = &self.nodes[col.0].data;
        let dr = &self.nodes[row.0].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(dc[i] + dr[j]);
            }
        }
        let rg = self.rg(col) || self.rg(row);
        Ok(self.push(out, vec![m, n], rg, Op::OuterAdd { col, row }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[x.0].data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} invalid",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf receives
    /// a gradient of its own shape; leaves unreachable from the loss get zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("backward: loss not on this tape".into()));
        }
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Zero-fill requires_grad leaves the loss never reached.
        for i in 0..n {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && grads[i].is_none()
            {
                grads[i] = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>],
                      id: TensorId,
                      contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
            contrib(slot);
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.binary_backward(*a, *b, g, grads, &add_to, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub { a, b } => {
                self.binary_backward(*a, *b, g, grads, &add_to, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul { a, b } => {
                self.binary_backward(*a, *b, g, grads, &add_to, |_, bv| bv, |av, _| av);
            }
            Op::Scale { x, c } => {
                let c = *c;
                add_to(grads, *x, &|dst| {
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &self.nodes[i].data;
                add_to(grads, *x, &|dst| {
                    for k in 0..dst.len() {
                        dst[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xin = &self.nodes[x.0].data;
                let slope = *slope;
                add_to(grads, *x, &|dst| {
                    for k in 0..dst.len() {
                        dst[k] += g[k] * if xin[k] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Elu { x } => {
                let xin = &self.nodes[x.0].data;
                let y = &self.nodes[i].data;
                add_to(grads, *x, &|dst| {
                    for k in 0..dst.len() {
                        dst[k] += g[k] * if xin[k] > 0.0 { 1.0 } else { y[k] + 1.0 };
                    }
                });
            }
            Op::Exp { x } => {
                let y = &self.nodes[i].data;
                add_to(grads, *x, &|dst| {
                    for k in 0..dst.len() {
                        dst[k] += g[k] * y[k];
                    }
                });
            }
            Op::Ln { x } => {
                let xin = &self.nodes[x.0].data;
                add_to(grads, *x, &|dst| {
                    for k in 0..dst.len() {
                        dst[k] += g[k] / xin[k];
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let da = &self.nodes[a.0].data;
                let db = &self.nodes[b.0].data;
                // dA = G * B^T
                add_to(grads, *a, &|dst| {
                    for i_ in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i_ * n + j] * db[p * n + j];
                            }
                            dst[i_ * k + p] += acc;
                        }
                    }
                });
                // dB = A^T * G
                add_to(grads, *b, &|dst| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i_ in 0..m {
                                acc += da[i_ * k + p] * g[i_ * n + j];
                            }
                            dst[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::MatmulNt { a, b } => {
                // C = A * B^T with A: [m,k], B: [n,k], C: [m,n]
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let da = &self.nodes[a.0].data;
                let db = &self.nodes[b.0].data;
                // dA = G * B
                add_to(grads, *a, &|dst| {
                    for i_ in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i_ * n + j] * db[j * k + p];
                            }
                            dst[i_ * k + p] += acc;
                        }
                    }
                });
                // dB = G^T * A
                add_to(grads, *b, &|dst| {
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i_ in 0..m {
                                acc += g[i_ * n + j] * da[i_ * k + p];
                            }
                            dst[j * k + p] += acc;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (n_lanes, lane_len, lane_stride, elem_stride) =
                    self.lanes(*x, *axis).expect("shape validated at forward");
                let y = &self.nodes[i].data;
                add_to(grads, *x, &|dst| {
                    for lane in 0..n_lanes {
                        let base = lane * lane_stride;
                        let mut dot = 0.0;
                        for t in 0..lane_len {
                            let idx = base + t * elem_stride;
                            dot += g[idx] * y[idx];
                        }
                        for t in 0..lane_len {
                            let idx = base + t * elem_stride;
                            dst[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (n_lanes, lane_len, lane_stride, elem_stride) =
                    self.lanes(*x, *axis).expect("shape validated at forward");
                let y = &self.nodes[i].data;
                add_to(grads, *x, &|dst| {
                    for lane in 0..n_lanes {
                        let base = lane * lane_stride;
                        let mut gsum = 0.0;
                        for t in 0..lane_len {
                            gsum += g[base + t * elem_stride];
                        }
                        for t in 0..lane_len {
                            let idx = base + t * elem_stride;
                            dst[idx] += g[idx] - y[idx].exp() * gsum;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                add_to(grads, *x, &|dst| {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::ColSum { x } => {
                let c = self.nodes[x.0].shape[1];
                add_to(grads, *x, &|dst| {
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d += g[k % c];
                    }
                });
            }
            Op::ColMax { x, argmax } => {
                let c = self.nodes[x.0].shape[1];
                add_to(grads, *x, &|dst| {
                    for (j, &arg) in argmax.iter().enumerate() {
                        dst[arg * c + j] += g[j];
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let sa = &self.nodes[a.0].shape;
                if sa.len() == 1 {
                    let ca = sa[0];
                    add_to(grads, *a, &|dst| {
                        for k in 0..ca {
                            dst[k] += g[k];
                        }
                    });
                    let cb = self.nodes[b.0].shape[0];
                    add_to(grads, *b, &|dst| {
                        for k in 0..cb {
                            dst[k] += g[ca + k];
                        }
                    });
                } else {
                    let (r, ca) = (sa[0], sa[1]);
                    let cb = self.nodes[b.0].shape[1];
                    let ct = ca + cb;
                    add_to(grads, *a, &|dst| {
                        for i_ in 0..r {
                            for j in 0..ca {
                                dst[i_ * ca + j] += g[i_ * ct + j];
                            }
                        }
                    });
                    add_to(grads, *b, &|dst| {
                        for i_ in 0..r {
                            for j in 0..cb {
                                dst[i_ * cb + j] += g[i_ * ct + ca + j];
                            }
                        }
                    });
                }
            }
            Op::StackRows { parts } => {
                let len = self.nodes[parts[0].0].shape[0];
                for (row, p) in parts.iter().enumerate() {
                    add_to(grads, *p, &|dst| {
                        for k in 0..len {
                            dst[k] += g[row * len + k];
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                let width = match self.nodes[x.0].shape.as_slice() {
                    [_] => 1,
                    [_, c] => *c,
                    _ => unreachable!(),
                };
                add_to(grads, *x, &|dst| {
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..width {
                            dst[src_row * width + j] += g[out_row * width + j];
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dx = &self.nodes[x.0].data;
                let ds = &self.nodes[s.0].data;
                add_to(grads, *x, &|dst| {
                    for i_ in 0..r {
                        for j in 0..c {
                            dst[i_ * c + j] += g[i_ * c + j] * ds[i_];
                        }
                    }
                });
                add_to(grads, *s, &|dst| {
                    for i_ in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i_ * c + j] * dx[i_ * c + j];
                        }
                        dst[i_] += acc;
                    }
                });
            }
            Op::OuterAdd { col, row } => {
                let m = self.nodes[col.0].shape[0];
                let n = self.nodes[row.0].shape[0];
                add_to(grads, *col, &|dst| {
                    for i_ in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i_ * n + j];
                        }
                        dst[i_] += acc;
                    }
                });
                add_to(grads, *row, &|dst| {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i_ in 0..m {
                            acc += g[i_ * n + j];
                        }
                        dst[j] += acc;
                    }
                });
            }
            Op::Reshape { x } => {
                add_to(grads, *x, &|dst| {
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn binary_backward(
        &self,
        a: TensorId,
        b: TensorId,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        add_to: &dyn Fn(&mut [Option<Vec<f64>>], TensorId, &dyn Fn(&mut [f64])),
        factor_a: impl Fn(f64, f64) -> f64,
        factor_b: impl Fn(f64, f64) -> f64,
    ) {
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let n = g.len();
        let scalar_a = da.len() == 1 && n > 1;
        let scalar_b = db.len() == 1 && n > 1;
        add_to(grads, a, &|dst| {
            if scalar_a {
                let mut acc = 0.0;
                for k in 0..n {
                    let bv = if scalar_b { db[0] } else { db[k] };
                    acc += g[k] * factor_a(da[0], bv);
                }
                dst[0] += acc;
            } else {
                for k in 0..n {
                    let bv = if scalar_b { db[0] } else { db[k] };
                    dst[k] += g[k] * factor_a(da[k], bv);
                }
            }
        });
        add_to(grads, b, &|dst| {
            if scalar_b {
                let mut acc = 0.0;
                for k in 0..n {
                    let av = if scalar_a { da[0] } else { da[k] };
                    acc += g[k] * factor_b(av, db[0]);
                }
                dst[0] += acc;
            } else {
                for k in 0..n {
                    let av = if scalar_a { da[0] } else { da[k] };
                    dst[k] += g[k] * factor_b(av, db[k]);
                }
            }
        });
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Compares the reverse-mode gradient of `build`'s scalar output against
/// central finite differences, coordinate by coordinate.
///
/// `build` receives a fresh tape and the id of a rank-1 leaf holding the
/// parameter vector, and returns the scalar output. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check<F>(build: F, params: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!(
            "finite_diff_check: step must be positive, got {h}"
        )));
    }
    let eval = |p: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf_grad(p.to_vec(), vec![p.len()])?;
        let out = build(&mut tape, leaf)?;
        if numel(tape.shape(out)) != 1 {
            return Err(Error::Shape(
                "finite_diff_check: output must be scalar".into(),
            ));
        }
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "finite_diff_check: non-finite output {v}"
            )));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf_grad(params.to_vec(), vec![params.len()])?;
    let out = build(&mut tape, leaf)?;
    if !tape.data(out).iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("finite_diff_check: non-finite output".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).expect("leaf requires grad").to_vec();

    let mut max_err = 0.0f64;
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = eval(&work)?;
        work[i] = orig - h;
        let fm = eval(&work)?;
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
