//! Tape-based reverse-mode automatic differentiation over small dense
//! tensors.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] walks the record once in reverse, accumulating
//! gradients. Tensors are row-major 2-D values; vectors are `(1, n)` rows
//! and scalars are `(1, 1)`. One tape covers one differentiated computation
//! (typically an episode for one agent) and is then dropped.

use std::sync::Arc;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ValueId(usize);

/// Neighbor lists of an undirected graph; shared by reference so recording
/// an operation does not copy the structure.
pub type Adjacency = Arc<Vec<Vec<usize>>>;

/// Convolution geometry for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Adaptive average pooling geometry: output cell (i, j) averages input
/// rows [⌊iH/oh⌋, ⌈(i+1)H/oh⌉) × cols [⌊jW/ow⌋, ⌈(j+1)W/ow⌉).
#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    AddConst(ValueId),
    Scale(ValueId, f64),
    MatMul(ValueId, ValueId),
    AddRow(ValueId, ValueId),
    Sigmoid(ValueId),
    Tanh(ValueId),
    Relu(ValueId),
    Elu(ValueId),
    Exp(ValueId),
    Sqrt(ValueId),
    Sqr(ValueId),
    Sum(ValueId),
    SumRows(ValueId),
    Concat(Vec<ValueId>),
    Slice(ValueId, usize),
    Index(ValueId, usize),
    Row(ValueId, usize),
    NeighborSum(ValueId, Adjacency),
    ScaleRows(ValueId, ValueId),
    StackScalars(Vec<ValueId>),
    Softmax(ValueId, f64),
    HardMax(ValueId),
    LogSumExp(ValueId),
    SubScalar(ValueId, ValueId),
    StraightThrough(ValueId),
    Conv2d(ValueId, ValueId, ValueId, ConvGeom),
    AdaptiveAvgPool(ValueId, PoolGeom),
}

struct Node {
    rows: usize,
    cols: usize,
    /// Start of this node's gradient span in the arena.
    offset: usize,
    values: Vec<f64>,
    op: Op,
}

/// The operation record. Gradients live in one flat arena indexed by
/// per-node offsets, so a backward pass allocates nothing per node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_arena: Vec<f64>,
    grad_total: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rows(&self, id: ValueId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn cols(&self, id: ValueId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn values(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `id`.
    pub fn grad(&self, id: ValueId) -> &[f64] {
        let (off, len) = self.span(id.0);
        &self.grad_arena[off..off + len]
    }

    fn span(&self, i: usize) -> (usize, usize) {
        (self.nodes[i].offset, self.nodes[i].values.len())
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> ValueId {
        debug_assert_eq!(values.len(), rows * cols);
        let offset = self.grad_total;
        self.grad_total += values.len();
        self.nodes.push(Node { rows, cols, offset, values, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Records an input tensor (parameter or constant).
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> ValueId {
        assert_eq!(values.len(), rows * cols, "input shape mismatch");
        self.push(rows, cols, values, Op::Leaf)
    }

    pub fn scalar_input(&mut self, v: f64) -> ValueId {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    fn assert_same_shape(&self, a: ValueId, b: ValueId, what: &str) {
        assert!(
            self.rows(a) == self.rows(b) && self.cols(a) == self.cols(b),
            "{what}: shape ({},{}) vs ({},{})",
            self.rows(a),
            self.cols(a),
            self.rows(b),
            self.cols(b)
        );
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "add");
        let values = zip_with(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x + y);
        self.push(self.rows(a), self.cols(a), values, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "sub");
        let values = zip_with(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x - y);
        self.push(self.rows(a), self.cols(a), values, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "mul");
        let values = zip_with(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x * y);
        self.push(self.rows(a), self.cols(a), values, Op::Mul(a, b))
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        self.push(self.rows(a), self.cols(a), values, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Scale(a, c))
    }

    /// `(m, k) · (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        mat_mul_nn(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// Adds a `(1, n)` row vector to every row of an `(m, n)` matrix.
    pub fn add_row(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!((self.rows(b), self.cols(b)), (1, n), "add_row: bias shape");
        let bv = &self.nodes[b.0].values;
        let av = &self.nodes[a.0].values;
        let mut values = Vec::with_capacity(m * n);
        for row in av.chunks(n) {
            for (x, y) in row.iter().zip(bv) {
                values.push(x + y);
            }
        }
        self.push(m, n, values, Op::AddRow(a, b))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|&x| sigmoid(x)).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Relu(a))
    }

    pub fn elu(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        self.push(self.rows(a), self.cols(a), values, Op::Elu(a))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x.sqrt()).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Sqrt(a))
    }

    pub fn sqr(&mut self, a: ValueId) -> ValueId {
        let values = self.nodes[a.0].values.iter().map(|x| x * x).collect();
        self.push(self.rows(a), self.cols(a), values, Op::Sqr(a))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s = self.nodes[a.0].values.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// Column sums: `(m, n) -> (1, n)`.
    pub fn sum_rows(&mut self, a: ValueId) -> ValueId {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += self.nodes[a.0].values[r * n + c];
            }
        }
        self.push(1, n, out, Op::SumRows(a))
    }

    /// Concatenates `(1, *)` row vectors.
    pub fn concat(&mut self, parts: &[ValueId]) -> ValueId {
        let mut values = Vec::new();
        for &p in parts {
            assert_eq!(self.rows(p), 1, "concat expects row vectors");
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let n = values.len();
        self.push(1, n, values, Op::Concat(parts.to_vec()))
    }

    /// Contiguous slice of a row vector.
    pub fn slice(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        assert_eq!(self.rows(a), 1, "slice expects a row vector");
        assert!(start + len <= self.cols(a), "slice out of range");
        let values = self.nodes[a.0].values[start..start + len].to_vec();
        self.push(1, len, values, Op::Slice(a, start))
    }

    /// Single entry by flat index.
    pub fn index(&mut self, a: ValueId, i: usize) -> ValueId {
        let v = self.nodes[a.0].values[i];
        self.push(1, 1, vec![v], Op::Index(a, i))
    }

    /// One row of a matrix (embedding lookup).
    pub fn row(&mut self, a: ValueId, r: usize) -> ValueId {
        let n = self.cols(a);
        assert!(r < self.rows(a), "row {r} out of range");
        let values = self.nodes[a.0].values[r * n..(r + 1) * n].to_vec();
        self.push(1, n, values, Op::Row(a, r))
    }

    /// Per node v: own row plus the sum of its neighbors' rows.
    pub fn neighbor_sum(&mut self, h: ValueId, adjacency: &Adjacency) -> ValueId {
        let (m, n) = (self.rows(h), self.cols(h));
        assert_eq!(m, adjacency.len(), "neighbor_sum: node count");
        let hv = &self.nodes[h.0].values;
        let mut out = hv.clone();
        for (v, neighbors) in adjacency.iter().enumerate() {
            for &u in neighbors {
                for c in 0..n {
                    out[v * n + c] += hv[u * n + c];
                }
            }
        }
        self.push(m, n, out, Op::NeighborSum(h, Arc::clone(adjacency)))
    }

    /// Scales row v of an `(m, n)` matrix by entry v of a `(1, m)` vector.
    pub fn scale_rows(&mut self, h: ValueId, s: ValueId) -> ValueId {
        let (m, n) = (self.rows(h), self.cols(h));
        assert_eq!((self.rows(s), self.cols(s)), (1, m), "scale_rows: scale shape");
        let sv = &self.nodes[s.0].values;
        let hv = &self.nodes[h.0].values;
        let mut values = Vec::with_capacity(m * n);
        for (row, &f) in hv.chunks(n).zip(sv) {
            for x in row {
                values.push(x * f);
            }
        }
        self.push(m, n, values, Op::ScaleRows(h, s))
    }

    /// Packs scalars into a `(1, k)` vector.
    pub fn stack_scalars(&mut self, parts: &[ValueId]) -> ValueId {
        let values: Vec<f64> = parts.iter().map(|&p| self.scalar(p)).collect();
        let n = values.len();
        self.push(1, n, values, Op::StackScalars(parts.to_vec()))
    }

    /// `softmax(x / tau)` over a row vector.
    pub fn softmax(&mut self, a: ValueId, tau: f64) -> ValueId {
        assert_eq!(self.rows(a), 1, "softmax expects a row vector");
        assert!(tau > 0.0, "softmax temperature must be positive");
        let values = softmax_values(&self.nodes[a.0].values, tau);
        self.push(1, self.cols(a), values, Op::Softmax(a, tau))
    }

    /// One-hot at the argmax in the forward pass; identity gradient in the
    /// backward pass (the straight-through convention).
    pub fn hard_max(&mut self, a: ValueId) -> ValueId {
        assert_eq!(self.rows(a), 1, "hard_max expects a row vector");
        let xs = &self.nodes[a.0].values;
        let arg = argmax(xs);
        let mut values = vec![0.0; xs.len()];
        values[arg] = 1.0;
        self.push(1, xs.len(), values, Op::HardMax(a))
    }

    /// Numerically stable `ln Σ exp(x)` of a row vector.
    pub fn log_sum_exp(&mut self, a: ValueId) -> ValueId {
        assert_eq!(self.rows(a), 1, "log_sum_exp expects a row vector");
        let xs = &self.nodes[a.0].values;
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
        self.push(1, 1, vec![m + s.ln()], Op::LogSumExp(a))
    }

    /// Broadcast subtraction of a scalar node from a row vector.
    pub fn sub_scalar(&mut self, a: ValueId, s: ValueId) -> ValueId {
        assert_eq!(self.nodes[s.0].values.len(), 1, "sub_scalar expects a scalar");
        let sv = self.nodes[s.0].values[0];
        let values = self.nodes[a.0].values.iter().map(|x| x - sv).collect();
        self.push(self.rows(a), self.cols(a), values, Op::SubScalar(a, s))
    }

    /// Forward emits `forward_values`; backward passes the incoming gradient
    /// through to `soft` unchanged.
    pub fn straight_through(&mut self, soft: ValueId, forward_values: Vec<f64>) -> ValueId {
        assert_eq!(
            forward_values.len(),
            self.nodes[soft.0].values.len(),
            "straight_through shape"
        );
        self.push(self.rows(soft), self.cols(soft), forward_values, Op::StraightThrough(soft))
    }

    /// 2-D convolution; `x` is `(1, in_ch·H·W)`, `w` is
    /// `(out_ch, in_ch·k·k)`, `b` is `(1, out_ch)`.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId, geom: ConvGeom) -> ValueId {
        assert_eq!(self.cols(x), geom.in_ch * geom.in_h * geom.in_w, "conv2d input size");
        assert_eq!(
            (self.rows(w), self.cols(w)),
            (geom.out_ch, geom.in_ch * geom.kernel * geom.kernel),
            "conv2d weight shape"
        );
        assert_eq!((self.rows(b), self.cols(b)), (1, geom.out_ch), "conv2d bias shape");
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![0.0; geom.out_ch * oh * ow];
        conv_forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &self.nodes[b.0].values,
            &geom,
            &mut out,
        );
        self.push(1, geom.out_ch * oh * ow, out, Op::Conv2d(x, w, b, geom))
    }

    /// Adaptive average pooling over `(1, ch·H·W)`.
    pub fn adaptive_avg_pool(&mut self, x: ValueId, geom: PoolGeom) -> ValueId {
        assert_eq!(self.cols(x), geom.ch * geom.in_h * geom.in_w, "pool input size");
        let mut out = vec![0.0; geom.ch * geom.out_h * geom.out_w];
        pool_forward(&self.nodes[x.0].values, &geom, &mut out);
        let n = out.len();
        self.push(1, n, out, Op::AdaptiveAvgPool(x, geom))
    }

    /// Backpropagates from a scalar loss, filling per-node gradients.
    pub fn backward(&mut self, loss: ValueId) {
        assert_eq!(self.nodes[loss.0].values.len(), 1, "backward target must be scalar");
        self.grad_arena.clear();
        self.grad_arena.resize(self.grad_total, 0.0);
        self.grad_arena[self.nodes[loss.0].offset] = 1.0;
        let mut scratch: Vec<f64> = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let (off, len) = self.span(i);
            if self.grad_arena[off..off + len].iter().all(|&g| g == 0.0) {
                continue;
            }
            scratch.clear();
            scratch.extend_from_slice(&self.grad_arena[off..off + len]);
            self.propagate(i, &scratch);
        }
    }

    fn propagate(&mut self, i: usize, go: &[f64]) {
        let n_cols = self.nodes[i].cols;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                add_assign(self.grad_of(a), go, 1.0);
                add_assign(self.grad_of(b), go, 1.0);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                add_assign(self.grad_of(a), go, 1.0);
                add_assign(self.grad_of(b), go, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    self.grad_arena[ao + j] += go[j] * self.nodes[b.0].values[j];
                }
                let (bo, _) = self.span(b.0);
                for j in 0..go.len() {
                    self.grad_arena[bo + j] += go[j] * self.nodes[a.0].values[j];
                }
            }
            Op::AddConst(a) => {
                let a = *a;
                add_assign(self.grad_of(a), go, 1.0);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                add_assign(self.grad_of(a), go, c);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].cols;
                // dA += G · Bᵀ
                {
                    let (ao, _) = self.span(a.0);
                    let bv = &self.nodes[b.0].values;
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += go[i * n + j] * bv[p * n + j];
                            }
                            self.grad_arena[ao + i * k + p] += acc;
                        }
                    }
                }
                // dB += Aᵀ · G
                {
                    let (bo, _) = self.span(b.0);
                    let av = &self.nodes[a.0].values;
                    let gb = &mut self.grad_arena[bo..bo + k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * go[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                add_assign(self.grad_of(a), go, 1.0);
                let n = self.nodes[b.0].cols;
                let (bo, _) = self.span(b.0);
                for (j, &g) in go.iter().enumerate() {
                    self.grad_arena[bo + j % n] += g;
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    let y = self.nodes[i].values[j];
                    self.grad_arena[ao + j] += go[j] * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    let y = self.nodes[i].values[j];
                    self.grad_arena[ao + j] += go[j] * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    if self.nodes[a.0].values[j] > 0.0 {
                        self.grad_arena[ao + j] += go[j];
                    }
                }
            }
            Op::Elu(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    let x = self.nodes[a.0].values[j];
                    let d = if x > 0.0 { 1.0 } else { self.nodes[i].values[j] + 1.0 };
                    self.grad_arena[ao + j] += go[j] * d;
                }
            }
            Op::Exp(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    self.grad_arena[ao + j] += go[j] * self.nodes[i].values[j];
                }
            }
            Op::Sqrt(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    self.grad_arena[ao + j] += go[j] / (2.0 * self.nodes[i].values[j]);
                }
            }
            Op::Sqr(a) => {
                let a = *a;
                let (ao, _) = self.span(a.0);
                for j in 0..go.len() {
                    self.grad_arena[ao + j] += go[j] * 2.0 * self.nodes[a.0].values[j];
                }
            }
            Op::Sum(a) => {
                let a = *a;
                for g in self.grad_of(a) {
                    *g += go[0];
                }
            }
            Op::SumRows(a) => {
                let a = *a;
                let n = self.nodes[a.0].cols;
                for (j, g) in self.grad_of(a).iter_mut().enumerate() {
                    *g += go[j % n];
                }
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut cursor = 0;
                for p in parts {
                    let len = self.nodes[p.0].values.len();
                    add_assign(self.grad_of(p), &go[cursor..cursor + len], 1.0);
                    cursor += len;
                }
            }
            Op::Slice(a, start) => {
                let (a, start) = (*a, *start);
                let (ao, _) = self.span(a.0);
                add_assign(
                    &mut self.grad_arena[ao + start..ao + start + go.len()],
                    go,
                    1.0,
                );
            }
            Op::Index(a, j) => {
                let (a, j) = (*a, *j);
                let (ao, _) = self.span(a.0);
                self.grad_arena[ao + j] += go[0];
            }
            Op::Row(a, r) => {
                let (a, r) = (*a, *r);
                let n = self.nodes[a.0].cols;
                let (ao, _) = self.span(a.0);
                add_assign(&mut self.grad_arena[ao + r * n..ao + (r + 1) * n], go, 1.0);
            }
            Op::NeighborSum(a, adjacency) => {
                // The operator I + A is symmetric, so the gradient applies
                // the same aggregation to the incoming gradient.
                let a = *a;
                let adjacency = Arc::clone(adjacency);
                let ga = self.grad_of(a);
                for (v, neighbors) in adjacency.iter().enumerate() {
                    for c in 0..n_cols {
                        ga[v * n_cols + c] += go[v * n_cols + c];
                    }
                    for &u in neighbors {
                        for c in 0..n_cols {
                            ga[v * n_cols + c] += go[u * n_cols + c];
                        }
                    }
                }
            }
            Op::ScaleRows(h, s) => {
                let (h, s) = (*h, *s);
                let n = self.nodes[h.0].cols;
                let rows = self.nodes[h.0].rows;
                let (ho, _) = self.span(h.0);
                let (so, _) = self.span(s.0);
                for r in 0..rows {
                    let f = self.nodes[s.0].values[r];
                    let mut ds = 0.0;
                    for c in 0..n {
                        let j = r * n + c;
                        self.grad_arena[ho + j] += go[j] * f;
                        ds += go[j] * self.nodes[h.0].values[j];
                    }
                    self.grad_arena[so + r] += ds;
                }
            }
            Op::StackScalars(parts) => {
                let parts = parts.clone();
                for (j, p) in parts.into_iter().enumerate() {
                    let (po, _) = self.span(p.0);
                    self.grad_arena[po] += go[j];
                }
            }
            Op::Softmax(a, tau) => {
                let (a, tau) = (*a, *tau);
                let (ao, _) = self.span(a.0);
                let y = &self.nodes[i].values;
                let dot: f64 = go.iter().zip(y).map(|(g, v)| g * v).sum();
                for j in 0..go.len() {
                    self.grad_arena[ao + j] += y[j] * (go[j] - dot) / tau;
                }
            }
            Op::HardMax(a) => {
                let a = *a;
                add_assign(self.grad_of(a), go, 1.0);
            }
            Op::LogSumExp(a) => {
                let a = *a;
                let lse = self.nodes[i].values[0];
                let (ao, _) = self.span(a.0);
                for j in 0..self.nodes[a.0].values.len() {
                    self.grad_arena[ao + j] += go[0] * (self.nodes[a.0].values[j] - lse).exp();
                }
            }
            Op::SubScalar(a, s) => {
                let (a, s) = (*a, *s);
                add_assign(self.grad_of(a), go, 1.0);
                let (so, _) = self.span(s.0);
                self.grad_arena[so] -= go.iter().sum::<f64>();
            }
            Op::StraightThrough(soft) => {
                let soft = *soft;
                add_assign(self.grad_of(soft), go, 1.0);
            }
            Op::Conv2d(x, w, b, geom) => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                debug_assert!(x != w && w != b && x != b);
                let (xo, xl) = self.span(x.0);
                let (wo, wl) = self.span(w.0);
                let (bo, bl) = self.span(b.0);
                let mut gx = vec![0.0; xl];
                let mut gw = vec![0.0; wl];
                let mut gb = vec![0.0; bl];
                conv_backward(
                    &self.nodes[x.0].values,
                    &self.nodes[w.0].values,
                    &geom,
                    go,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                );
                add_assign(&mut self.grad_arena[xo..xo + xl], &gx, 1.0);
                add_assign(&mut self.grad_arena[wo..wo + wl], &gw, 1.0);
                add_assign(&mut self.grad_arena[bo..bo + bl], &gb, 1.0);
            }
            Op::AdaptiveAvgPool(x, geom) => {
                let (x, geom) = (*x, *geom);
                pool_backward(&geom, go, self.grad_of(x));
            }
        }
    }

    /// Mutable gradient span of one node.
    fn grad_of(&mut self, id: ValueId) -> &mut [f64] {
        let (off, len) = self.span(id.0);
        &mut self.grad_arena[off..off + len]
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

pub fn softmax_values(xs: &[f64], tau: f64) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| ((x - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn mat_mul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], geom: &ConvGeom, out: &mut [f64]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (ih, iw, k) = (geom.in_h, geom.in_w, geom.kernel);
    for oc in 0..geom.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..geom.in_ch {
                    for ky in 0..k {
                        let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if xx < 0 || xx >= iw as isize {
                                continue;
                            }
                            acc += x[(ic * ih + y as usize) * iw + xx as usize]
                                * w[oc * geom.in_ch * k * k + (ic * k + ky) * k + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    geom: &ConvGeom,
    go: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (ih, iw, k) = (geom.in_h, geom.in_w, geom.kernel);
    for oc in 0..geom.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[(oc * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                gb[oc] += g;
                for ic in 0..geom.in_ch {
                    for ky in 0..k {
                        let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if xx < 0 || xx >= iw as isize {
                                continue;
                            }
                            let xi = (ic * ih + y as usize) * iw + xx as usize;
                            let wi = oc * geom.in_ch * k * k + (ic * k + ky) * k + kx;
                            gx[xi] += g * w[wi];
                            gw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// Pooling region for output cell `i` along an axis of length `len` split
/// into `out` cells; regions may overlap when the input is smaller than the
/// output.
fn pool_span(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn pool_forward(x: &[f64], geom: &PoolGeom, out: &mut [f64]) {
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    for c in 0..geom.ch {
        for i in 0..oh {
            let (r0, r1) = pool_span(i, ih, oh);
            for j in 0..ow {
                let (c0, c1) = pool_span(j, iw, ow);
                let mut acc = 0.0;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        acc += x[(c * ih + r) * iw + cc];
                    }
                }
                out[(c * oh + i) * ow + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
}

fn pool_backward(geom: &PoolGeom, go: &[f64], gx: &mut [f64]) {
    let (ih, iw, oh, ow) = (geom.in_h, geom.in_w, geom.out_h, geom.out_w);
    for c in 0..geom.ch {
        for i in 0..oh {
            let (r0, r1) = pool_span(i, ih, oh);
            for j in 0..ow {
                let (c0, c1) = pool_span(j, iw, ow);
                let g = go[(c * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        gx[(c * ih + r) * iw + cc] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
        let mut grad = vec![0.0; theta.len()];
        let mut probe = theta.to_vec();
        for j in 0..theta.len() {
            probe[j] = theta[j] + eps;
            let hi = f(&probe);
            probe[j] = theta[j] - eps;
            let lo = f(&probe);
            probe[j] = theta[j];
            grad[j] = (hi - lo) / (2.0 * eps);
        }
        grad
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Finite-difference oracle over a composite expression touching most
    /// scalar/vector ops.
    #[test]
    fn composite_expression_matches_finite_differences() {
        let theta = vec![0.3, -0.7, 1.2, 0.05, -0.4, 0.9];
        let eval = |t: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let x = tape.input(1, 6, t.to_vec());
            let s = tape.sigmoid(x);
            let h = tape.tanh(s);
            let e = tape.exp(h);
            let sum = tape.sum(e);
            let sliced = tape.slice(x, 1, 3);
            let sq = tape.sqr(sliced);
            let part = tape.sum(sq);
            let lse = tape.log_sum_exp(x);
            let t1 = tape.add(sum, part);
            let t2 = tape.add(t1, lse);
            let soft = tape.softmax(x, 0.7);
            let picked = tape.index(soft, 2);
            let loss = tape.add(t2, picked);
            (tape.scalar(loss), {
                tape.backward(loss);
                Some(tape.grad(x).to_vec())
            })
        };
        let (_, analytic) = eval(&theta);
        let fd = finite_diff(|t| eval(t).0, &theta, 1e-5);
        assert!(max_rel_err(&analytic.unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn matmul_and_bias_match_finite_differences() {
        // 2x3 weight, 3x2 input, bias row.
        let theta: Vec<f64> = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9, 1.0, 0.2, -0.1, 0.05, -0.15];
        let eval = |t: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let a = tape.input(2, 3, t[0..6].to_vec());
            let b = tape.input(3, 2, t[6..12].to_vec());
            let bias = tape.input(1, 2, t[12..14].to_vec());
            let prod = tape.matmul(a, b);
            let withb = tape.add_row(prod, bias);
            let act = tape.tanh(withb);
            let loss = tape.sum(act);
            tape.backward(loss);
            let mut g = tape.grad(a).to_vec();
            g.extend_from_slice(tape.grad(b));
            g.extend_from_slice(tape.grad(bias));
            (tape.scalar(loss), Some(g))
        };
        let (_, analytic) = eval(&theta);
        let fd = finite_diff(|t| eval(t).0, &theta, 1e-5);
        assert!(max_rel_err(&analytic.unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn neighbor_sum_and_scale_rows_match_finite_differences() {
        let adjacency: Adjacency = Arc::new(vec![vec![1, 2], vec![0], vec![0]]);
        let theta: Vec<f64> = vec![0.2, -0.3, 0.5, 0.1, -0.6, 0.4, 0.9, 0.3, -0.2];
        let eval = |t: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let h = tape.input(3, 2, t[0..6].to_vec());
            let s = tape.input(1, 3, t[6..9].to_vec());
            let agg = tape.neighbor_sum(h, &adjacency);
            let masked = tape.scale_rows(agg, s);
            let pooled = tape.sum_rows(masked);
            let squashed = tape.sigmoid(pooled);
            let loss = tape.sum(squashed);
            tape.backward(loss);
            let mut g = tape.grad(h).to_vec();
            g.extend_from_slice(tape.grad(s));
            (tape.scalar(loss), Some(g))
        };
        let (_, analytic) = eval(&theta);
        let fd = finite_diff(|t| eval(t).0, &theta, 1e-5);
        assert!(max_rel_err(&analytic.unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn conv_and_pool_match_finite_differences() {
        let geom = ConvGeom { in_ch: 2, in_h: 4, in_w: 4, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let pool = PoolGeom { ch: 3, in_h: 2, in_w: 2, out_h: 3, out_w: 3 };
        let nx = 2 * 16;
        let nw = 3 * 2 * 9;
        let mut theta = Vec::new();
        for i in 0..nx + nw + 3 {
            theta.push(((i * 37 % 19) as f64 - 9.0) / 11.0);
        }
        let eval = |t: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let x = tape.input(1, nx, t[0..nx].to_vec());
            let w = tape.input(3, 18, t[nx..nx + nw].to_vec());
            let b = tape.input(1, 3, t[nx + nw..].to_vec());
            let conv = tape.conv2d(x, w, b, geom);
            let act = tape.elu(conv);
            let pooled = tape.adaptive_avg_pool(act, pool);
            let sq = tape.sqr(pooled);
            let loss = tape.sum(sq);
            tape.backward(loss);
            let mut g = tape.grad(x).to_vec();
            g.extend_from_slice(tape.grad(w));
            g.extend_from_slice(tape.grad(b));
            (tape.scalar(loss), Some(g))
        };
        let (_, analytic) = eval(&theta);
        let fd = finite_diff(|t| eval(t).0, &theta, 1e-5);
        assert!(max_rel_err(&analytic.unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(1, 2, vec![0.4, 0.6]);
        let soft = tape.softmax(x, 1.0);
        let hard = tape.hard_max(soft);
        assert_eq!(tape.values(hard), &[0.0, 1.0]);
        let st = tape.straight_through(soft, vec![9.0, 9.0]);
        assert_eq!(tape.values(st), &[9.0, 9.0]);
        let merged = tape.add(hard, st);
        let loss = tape.sum(merged);
        tape.backward(loss);
        // hard_max and straight_through both hand the unit gradient to the
        // softmax, whose rows sum to zero sensitivity.
        let gx: f64 = tape.grad(x).iter().sum();
        assert!(gx.abs() < 1e-12);
    }

    #[test]
    fn hard_max_is_one_hot() {
        let mut tape = Tape::new();
        let x = tape.input(1, 4, vec![0.1, 3.0, -2.0, 3.0 - 1e-9]);
        let h = tape.hard_max(x);
        assert_eq!(tape.values(h), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_duplicates_small_inputs() {
        // 1x1 input pooled to 3x3 repeats the single value.
        let mut tape = Tape::new();
        let x = tape.input(1, 1, vec![5.0]);
        let pooled = tape.adaptive_avg_pool(x, PoolGeom { ch: 1, in_h: 1, in_w: 1, out_h: 3, out_w: 3 });
        assert_eq!(tape.values(pooled), &[5.0; 9]);
    }
}
