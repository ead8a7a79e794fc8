//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Values live on a [`Tape`]; every operation appends a node and returns a
//! [`Var`] handle. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients for every leaf created from a tensor that requires
//! them. Besides the usual dense operations the tape provides the gather /
//! scatter / segment-softmax primitives used for message passing.
//!
//! ```
//! use surroflow::autodiff::{Tape, Tensor};
//!
//! let x = Tensor::new(1, 3, vec![1.0, -2.0, 3.0]).unwrap().with_grad();
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let loss = tape.sum(v).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(v).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of 64-bit values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Tensor { rows, cols, data, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols], grad: None }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Tensor { rows, cols, data, grad: None }
    }

    pub fn identity(n: usize) -> Tensor {
        Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Marks the tensor as trainable, allocating a zeroed gradient.
    pub fn with_grad(mut self) -> Tensor {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the gradient buffer; no-op for tensors without one.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if let Some(buf) = &mut self.grad {
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Recycles large value buffers between tapes on the same thread. Fresh
/// multi-page allocations are dominated by page faults, so reusing memory
/// released by an earlier tape keeps repeated forward passes cheap.
pub(crate) mod pool {
    use std::cell::RefCell;

    const MIN_POOLED: usize = 1024;
    const MAX_BUFFERS: usize = 512;

    thread_local! {
        static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    }

    /// Empty vector with room for `len` values.
    pub fn take(len: usize) -> Vec<f64> {
        if len < MIN_POOLED {
            return Vec::with_capacity(len);
        }
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            let best = p
                .iter()
                .enumerate()
                .filter(|(_, v)| v.capacity() >= len)
                .min_by_key(|(_, v)| v.capacity())
                .map(|(i, _)| i)?;
            Some(p.swap_remove(best))
        });
        reused.unwrap_or_else(|| Vec::with_capacity(len))
    }

    pub fn filled(len: usize, value: f64) -> Vec<f64> {
        let mut v = take(len);
        v.resize(len, value);
        v
    }

    pub fn give(mut v: Vec<f64>) {
        if v.capacity() < MIN_POOLED {
            return;
        }
        v.clear();
        POOL.with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < MAX_BUFFERS {
                p.push(v);
            }
        });
    }

    pub fn collect(len: usize, iter: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut v = take(len);
        v.extend(iter);
        v
    }
}

/// Shared row-index vector, reused by many gather/scatter operations.
pub type Index = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    BlockSum(Var, usize),
    Sum(Var),
    GatherRows(Var, Index),
    ScatterSum(Var, Index),
    ScatterMax(Var, Vec<u32>),
    SegmentSoftmax(Var, Index, usize),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// the tape is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

/// `c (m×n) += a (m×k) · b (k×n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover the index ranges implied by the shapes and
    // strides, which every caller derives from checked tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies the current value into a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { rows: n.rows, cols: n.cols, data: n.value.clone(), grad: None }
    }

    /// Accumulated gradient of a leaf created from a trainable tensor.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} (value {bad})")));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::ConcatCols(a, b) | Op::ScaleRows(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Scale(a, _)
            | Op::BlockSum(a, _)
            | Op::Sum(a)
            | Op::GatherRows(a, _)
            | Op::ScatterSum(a, _)
            | Op::ScatterMax(a, _)
            | Op::SegmentSoftmax(a, _, _) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf holding a copy of `t`; gradients are tracked when `t` has a gradient buffer.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let track = t.requires_grad();
        let mut value = pool::take(t.data.len());
        value.extend_from_slice(&t.data);
        self.nodes.push(Node { rows: t.rows, cols: t.cols, value, op: Op::Leaf, needs_grad: track });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(rows, cols, data)?;
        self.push(t.rows, t.cols, t.data, Op::Leaf, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = pool::filled(m * n, 0.0);
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            (k as isize, 1),
            &self.nodes[b.0].value,
            (n as isize, 1),
            &mut out,
            0.0,
        );
        self.push(m, n, out, Op::MatMul(a, b), "matmul")
    }

    /// Elementwise sum of equal shapes, or `a` plus a `1 × cols` row broadcast to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if sa == sb {
            let out = pool::collect(av.len(), av.iter().zip(bv).map(|(x, y)| x + y));
            self.push(sa.0, sa.1, out, Op::Add(a, b), "add")
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let out = pool::collect(av.len(), (0..av.len()).map(|i| av[i] + bv[i % sa.1]));
            self.push(sa.0, sa.1, out, Op::AddRow(a, b), "add")
        } else {
            Err(shape_err("add", sa, sb))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("sub", sa, sb));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = pool::collect(av.len(), av.iter().zip(bv).map(|(x, y)| x - y));
        self.push(sa.0, sa.1, out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = pool::collect(av.len(), av.iter().zip(bv).map(|(x, y)| x * y));
        self.push(sa.0, sa.1, out, Op::Mul(a, b), "mul")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        if ra != rb {
            return Err(shape_err("concat_cols", (ra, ca), (rb, cb)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = pool::take(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        self.push(ra, ca + cb, out, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let out = pool::collect(av.len(), av.iter().map(|&x| if x > 0.0 { x } else { 0.0 }));
        self.push(r, c, out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let out = pool::collect(av.len(), av.iter().map(|&x| if x > 0.0 { x } else { slope * x }));
        self.push(r, c, out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    /// Multiplies every entry by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let out = pool::collect(av.len(), av.iter().map(|&x| x * factor));
        self.push(r, c, out, Op::Scale(a, factor), "scale")
    }

    /// Row-wise scaling. `s` is `rows × k` and `a` is `rows × (k·d)`: block
    /// `h` of row `r` is multiplied by `s[r, h]`. With `k = 1` every row is
    /// scaled by one factor.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let ((ra, ca), (rs, k)) = (self.shape(a), self.shape(s));
        if ra != rs || k == 0 || ca % k != 0 {
            return Err(shape_err("scale_rows", (ra, ca), (rs, k)));
        }
        let d = ca / k;
        let (av, sv) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let out = pool::collect(ra * ca, (0..ra * ca).map(|i| av[i] * sv[(i / ca) * k + (i % ca) / d]));
        self.push(ra, ca, out, Op::ScaleRows(a, s), "scale_rows")
    }

    /// Sums each of `blocks` equal column blocks: `rows × (blocks·d)` → `rows × blocks`.
    pub fn block_sum(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if blocks == 0 || c % blocks != 0 {
            return Err(Error::Shape(format!("block_sum: {c} columns into {blocks} blocks")));
        }
        let d = c / blocks;
        let av = &self.nodes[a.0].value;
        let out = pool::collect(
            r * blocks,
            (0..r * blocks).map(|i| {
                let (row, h) = (i / blocks, i % blocks);
                av[row * c + h * d..row * c + (h + 1) * d].iter().sum()
            }),
        );
        self.push(r, blocks, out, Op::BlockSum(a, blocks), "block_sum")
    }

    /// Sum of all entries, as a `1 × 1` value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![total], Op::Sum(a), "sum")
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: &Index) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("gather_rows: row {bad} of {r}")));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = pool::take(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(index.len(), c, out, Op::GatherRows(x, index.clone()), "gather_rows")
    }

    fn check_scatter(&self, name: &str, x: Var, index: &Index, out_rows: usize) -> Result<(usize, usize)> {
        let (r, c) = self.shape(x);
        if index.len() != r {
            return Err(Error::Shape(format!("{name}: {} indices for {r} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Index(format!("{name}: target {bad} of {out_rows}")));
        }
        Ok((r, c))
    }

    /// Output row `j` is the sum of the input rows `i` with `index[i] = j`.
    pub fn scatter_sum(&mut self, x: Var, index: &Index, out_rows: usize) -> Result<Var> {
        let (_, c) = self.check_scatter("scatter_sum", x, index, out_rows)?;
        let xv = &self.nodes[x.0].value;
        let mut out = pool::filled(out_rows * c, 0.0);
        for (i, &j) in index.iter().enumerate() {
            for k in 0..c {
                out[j * c + k] += xv[i * c + k];
            }
        }
        self.push(out_rows, c, out, Op::ScatterSum(x, index.clone()), "scatter_sum")
    }

    /// Per-column maximum over the rows sharing a target. Gradients go to the
    /// first row attaining the maximum; empty targets give 0.
    pub fn scatter_max(&mut self, x: Var, index: &Index, out_rows: usize) -> Result<Var> {
        let (_, c) = self.check_scatter("scatter_max", x, index, out_rows)?;
        let xv = &self.nodes[x.0].value;
        if index.len() >= u32::MAX as usize {
            return Err(Error::Shape(format!("scatter_max: {} rows exceed the supported count", index.len())));
        }
        let mut out = pool::filled(out_rows * c, f64::NEG_INFINITY);
        let mut arg = vec![u32::MAX; out_rows * c];
        for (i, &j) in index.iter().enumerate() {
            for k in 0..c {
                let v = xv[i * c + k];
                if arg[j * c + k] == u32::MAX || v > out[j * c + k] {
                    out[j * c + k] = v;
                    arg[j * c + k] = i as u32;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&arg) {
            if *a == u32::MAX {
                *o = 0.0;
            }
        }
        self.push(out_rows, c, out, Op::ScatterMax(x, arg), "scatter_max")
    }

    /// Softmax of each column over the rows of each segment.
    pub fn segment_softmax(&mut self, scores: Var, segment: &Index, segments: usize) -> Result<Var> {
        let (r, c) = self.check_scatter("segment_softmax", scores, segment, segments)?;
        let sv = &self.nodes[scores.0].value;
        let mut max = vec![f64::NEG_INFINITY; segments * c];
        for (i, &s) in segment.iter().enumerate() {
            for k in 0..c {
                max[s * c + k] = max[s * c + k].max(sv[i * c + k]);
            }
        }
        let mut out = pool::filled(r * c, 0.0);
        let mut denom = vec![0.0; segments * c];
        for (i, &s) in segment.iter().enumerate() {
            for k in 0..c {
                let e = (sv[i * c + k] - max[s * c + k]).exp();
                out[i * c + k] = e;
                denom[s * c + k] += e;
            }
        }
        for (i, &s) in segment.iter().enumerate() {
            for k in 0..c {
                out[i * c + k] /= denom[s * c + k];
            }
        }
        self.push(r, c, out, Op::SegmentSoftmax(scores, segment.clone(), segments), "segment_softmax")
    }

    /// Accumulates `∂loss/∂leaf` into the gradient of every trainable leaf.
    /// Calling it twice without [`reset_grads`](Self::reset_grads) doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Shape(format!("backward needs a 1x1 loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if self.leaf_grads.len() < self.nodes.len() {
                    self.leaf_grads.resize(self.nodes.len(), None);
                }
                match &mut self.leaf_grads[id] {
                    Some(acc) => {
                        acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                        pool::give(g);
                    }
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
            pool::give(g);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for g in self.leaf_grads.drain(..).flatten() {
            pool::give(g);
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let (rows, cols) = (node.rows, node.cols);
        let wants = |v: Var| nodes[v.0].needs_grad;
        // returns the gradient buffer of `v`, zero-initialised on first use
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| pool::filled(nodes[v.0].value.len(), 0.0))
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), n) = ((nodes[a.0].rows, nodes[a.0].cols), cols);
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, nodes, *a);
                    gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), ga, 1.0);
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, nodes, *b);
                    gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        slot(grads, nodes, *v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    slot(grads, nodes, *b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let ga = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let gb = slot(grads, nodes, *b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (nodes[a.0].cols, nodes[b.0].cols);
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for r in 0..rows {
                        for k in 0..ca {
                            ga[r * ca + k] += g[r * cols + k];
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for r in 0..rows {
                        for k in 0..cb {
                            gb[r * cb + k] += g[r * cols + ca + k];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[a.0].value;
                let ga = slot(grads, nodes, *a);
                for i in 0..g.len() {
                    ga[i] += if av[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
            Op::Scale(a, f) => {
                slot(grads, nodes, *a).iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
            }
            Op::ScaleRows(a, s) => {
                let k = nodes[s.0].cols;
                let d = cols / k;
                if wants(*a) {
                    let sv = &nodes[s.0].value;
                    let ga = slot(grads, nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * sv[(i / cols) * k + (i % cols) / d];
                    }
                }
                if wants(*s) {
                    let av = &nodes[a.0].value;
                    let gs = slot(grads, nodes, *s);
                    for i in 0..g.len() {
                        gs[(i / cols) * k + (i % cols) / d] += g[i] * av[i];
                    }
                }
            }
            Op::BlockSum(a, blocks) => {
                let c = nodes[a.0].cols;
                let d = c / blocks;
                let ga = slot(grads, nodes, *a);
                for i in 0..ga.len() {
                    ga[i] += g[(i / c) * blocks + (i % c) / d];
                }
            }
            Op::Sum(a) => {
                slot(grads, nodes, *a).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::GatherRows(x, index) => {
                let gx = slot(grads, nodes, *x);
                for (o, &i) in index.iter().enumerate() {
                    for k in 0..cols {
                        gx[i * cols + k] += g[o * cols + k];
                    }
                }
            }
            Op::ScatterSum(x, index) => {
                let gx = slot(grads, nodes, *x);
                for (i, &j) in index.iter().enumerate() {
                    for k in 0..cols {
                        gx[i * cols + k] += g[j * cols + k];
                    }
                }
            }
            Op::ScatterMax(x, arg) => {
                let gx = slot(grads, nodes, *x);
                for (o, &i) in arg.iter().enumerate() {
                    if i != u32::MAX {
                        gx[i as usize * cols + o % cols] += g[o];
                    }
                }
            }
            Op::SegmentSoftmax(x, segment, segments) => {
                let alpha = &node.value;
                let mut dot = vec![0.0; segments * cols];
                for (i, &s) in segment.iter().enumerate() {
                    for k in 0..cols {
                        dot[s * cols + k] += alpha[i * cols + k] * g[i * cols + k];
                    }
                }
                let gx = slot(grads, nodes, *x);
                for (i, &s) in segment.iter().enumerate() {
                    for k in 0..cols {
                        let a = alpha[i * cols + k];
                        gx[i * cols + k] += a * (g[i * cols + k] - dot[s * cols + k]);
                    }
                }
            }
        }
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool::give(node.value);
        }
        self.reset_grads();
    }
}

/// Hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`. Gradients are left in place.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, config: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Parameter("adam step counter starts at 1".into()));
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!("adam state for {} params, got {}", state.m.len(), params.len())));
    }
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = &p.grad else { continue };
        for i in 0..p.data.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes named tensors in the binary checkpoint layout:
///
/// ```text
/// magic  "SFPT" (4 bytes)
/// u32    version (1)
/// u32    tensor count
/// per tensor, in order:
///   u32  name length in bytes, then the UTF-8 name
///   u64  rows
///   u64  cols
///   f64  rows·cols values, row-major
/// ```
///
/// All integers and floats are little-endian.
pub fn write_checkpoint(mut w: impl Write, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows as u64).to_le_bytes())?;
        w.write_all(&(t.cols as u64).to_le_bytes())?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    fn bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }
    let bad = |m: &str| Error::Parse { record: "checkpoint".into(), message: m.into() };
    if &bytes::<4>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(bytes(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = u64::from_le_bytes(bytes(&mut r)?) as usize;
        let cols = u64::from_le_bytes(bytes(&mut r)?) as usize;
        let data = (0..rows * cols)
            .map(|_| Ok(f64::from_le_bytes(bytes(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(rows, cols, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(v: &[usize]) -> Index {
        v.to_vec().into()
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.5);
        let mut tape = Tape::new();
        let i = tape.leaf(&Tensor::identity(3));
        let xv = tape.leaf(&x);
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(2, 3));
        let b = tape.leaf(&Tensor::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(Error::Shape(msg)) => assert!(msg.contains("2x3") && msg.contains("matmul")),
            other => panic!("{other:?}"),
        }
        let c = tape.leaf(&Tensor::zeros(1, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
        let row = tape.leaf(&Tensor::zeros(1, 3));
        assert!(tape.add(a, row).is_ok());
    }

    #[test]
    fn relu_values_and_mask() {
        let x = Tensor::new(1, 3, vec![-1.0, 0.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.relu(v).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn scatter_and_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
        let s = tape.scatter_sum(x, &idx(&[0, 0, 1]), 2).unwrap();
        assert_eq!(tape.value(s), &[3.0, 4.0]);

        let t = Tensor::new(3, 1, vec![1.0, 5.0, 3.0]).unwrap().with_grad();
        let xm = tape.leaf(&t);
        let m = tape.scatter_max(xm, &idx(&[0, 0, 1]), 2).unwrap();
        assert_eq!(tape.value(m), &[5.0, 3.0]);
        let total = tape.sum(m).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(xm).unwrap(), &[0.0, 1.0, 1.0]);

        let z = tape.leaf(&Tensor::zeros(2, 1));
        let a = tape.segment_softmax(z, &idx(&[0, 0]), 1).unwrap();
        assert_eq!(tape.value(a), &[0.5, 0.5]);
    }

    #[test]
    fn scatter_max_ties_and_empty_segments() {
        let t = Tensor::new(3, 1, vec![2.0, 2.0, -1.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let m = tape.scatter_max(x, &idx(&[1, 1, 1]), 3).unwrap();
        assert_eq!(tape.value(m), &[0.0, 2.0, 0.0]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn index_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(2, 1));
        assert!(matches!(tape.gather_rows(x, &idx(&[2])), Err(Error::Index(_))));
        assert!(matches!(tape.scatter_sum(x, &idx(&[0, 3]), 2), Err(Error::Index(_))));
        assert!(matches!(tape.scatter_max(x, &idx(&[0]), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_gradient_and_accumulation() {
        let x = Tensor::from_fn(2, 3, |r, c| (r + c) as f64).with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(v).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(v).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::zeros(2, 1).with_grad());
        assert!(matches!(tape.backward(v), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_values_trip_an_error() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::new(1, 1, vec![1e300]).unwrap());
        assert!(matches!(tape.scale(v, 1e300), Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap().with_grad()];
        p[0].accumulate_grad(&[0.5, -2.0, 0.0]);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &mut state, &AdamConfig::default(), 1).unwrap();
        assert!((p[0].data()[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert!((p[0].data()[1] - (1.0 + 0.001)).abs() < 1e-9);
        assert_eq!(p[0].data()[2], 1.0);
        assert_eq!(p[0].grad().unwrap(), &[0.5, -2.0, 0.0]);
        assert!(adam_step(&mut p, &mut state, &AdamConfig::default(), 0).is_err());
    }

    #[test]
    fn adam_minimises_a_parabola() {
        let mut p = vec![Tensor::zeros(1, 1).with_grad()];
        let mut state = AdamState::new(&p);
        let config = AdamConfig { lr: 0.05, ..Default::default() };
        for t in 1..=200 {
            let mut tape = Tape::new();
            let w = tape.leaf(&p[0]);
            let three = tape.constant(1, 1, vec![3.0]).unwrap();
            let d = tape.sub(w, three).unwrap();
            let sq = tape.mul(d, d).unwrap();
            tape.backward(sq).unwrap();
            p[0].zero_grad();
            p[0].accumulate_grad(tape.grad(w).unwrap());
            adam_step(&mut p, &mut state, &config, t).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.5, "{}", p[0].data()[0]);
    }

    type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

    /// Compares tape gradients of `sum(w ⊙ f(inputs))` with central differences.
    fn check_gradients(inputs: Vec<Tensor>, f: &Build) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let eval = |xs: &[Tensor], weights: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
            let out = f(&mut tape, &vars).unwrap();
            let (r, c) = tape.shape(out);
            let w: Vec<f64> = match weights {
                Some(w) => w.to_vec(),
                None => (0..r * c).map(|i| 0.3 + (i % 7) as f64 * 0.17).collect(),
            };
            let wv = tape.constant(r, c, w.clone()).unwrap();
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            tape.backward(loss).unwrap();
            let grads = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
            (tape.value(loss)[0], grads, w)
        };
        let inputs: Vec<Tensor> = inputs.into_iter().map(Tensor::with_grad).collect();
        let (_, _, mut weights) = eval(&inputs, None);
        for w in weights.iter_mut() {
            *w += rng.random_range(-0.1..0.1);
        }
        let (_, grads2, _) = eval(&inputs, Some(&weights));
        let h = 1e-5;
        for (t, g) in grads2.iter().enumerate() {
            for i in 0..inputs[t].data().len() {
                let mut plus = inputs.clone();
                plus[t].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[t].data_mut()[i] -= h;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(err < 1e-4, "input {t} entry {i}: fd {fd} vs tape {}", g[i]);
            }
        }
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
    }

    #[test]
    fn gradients_of_dense_ops() {
        check_gradients(vec![rand_tensor(3, 4, 1), rand_tensor(4, 2, 2)], &|t, v| t.matmul(v[0], v[1]));
        check_gradients(vec![rand_tensor(3, 4, 3), rand_tensor(3, 4, 4)], &|t, v| t.add(v[0], v[1]));
        check_gradients(vec![rand_tensor(3, 4, 5), rand_tensor(1, 4, 6)], &|t, v| t.add(v[0], v[1]));
        check_gradients(vec![rand_tensor(2, 3, 7), rand_tensor(2, 3, 8)], &|t, v| t.sub(v[0], v[1]));
        check_gradients(vec![rand_tensor(2, 3, 9), rand_tensor(2, 3, 10)], &|t, v| t.mul(v[0], v[1]));
        check_gradients(vec![rand_tensor(3, 2, 11), rand_tensor(3, 3, 12)], &|t, v| t.concat_cols(v[0], v[1]));
        check_gradients(vec![rand_tensor(4, 3, 13)], &|t, v| t.relu(v[0]));
        check_gradients(vec![rand_tensor(4, 3, 14)], &|t, v| t.leaky_relu(v[0], 0.2));
        check_gradients(vec![rand_tensor(4, 3, 15)], &|t, v| t.scale(v[0], -1.7));
        check_gradients(vec![rand_tensor(3, 6, 16), rand_tensor(3, 2, 17)], &|t, v| t.scale_rows(v[0], v[1]));
        check_gradients(vec![rand_tensor(3, 5, 18), rand_tensor(3, 1, 19)], &|t, v| t.scale_rows(v[0], v[1]));
        check_gradients(vec![rand_tensor(3, 6, 20)], &|t, v| t.block_sum(v[0], 3));
        check_gradients(vec![rand_tensor(3, 6, 21)], &|t, v| t.sum(v[0]));
    }

    #[test]
    fn gradients_of_graph_ops() {
        let gather = idx(&[2, 0, 0, 1, 2]);
        let target = idx(&[1, 0, 1, 1, 3]);
        check_gradients(vec![rand_tensor(3, 2, 30)], &|t, v| t.gather_rows(v[0], &gather));
        check_gradients(vec![rand_tensor(5, 2, 31)], &|t, v| t.scatter_sum(v[0], &target, 4));
        check_gradients(vec![rand_tensor(5, 3, 32)], &|t, v| t.scatter_max(v[0], &target, 4));
        check_gradients(vec![rand_tensor(5, 3, 33)], &|t, v| t.segment_softmax(v[0], &target, 4));
    }

    #[test]
    fn gradients_through_a_composite_graph() {
        let src = idx(&[0, 1, 2, 2, 3]);
        let dst = idx(&[1, 2, 0, 3, 0]);
        check_gradients(vec![rand_tensor(4, 3, 40), rand_tensor(3, 4, 41), rand_tensor(1, 4, 42)], &|t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.leaky_relu(h, 0.2)?;
            let hs = t.gather_rows(h, &src)?;
            let hd = t.gather_rows(h, &dst)?;
            let e = t.mul(hs, hd)?;
            let e = t.block_sum(e, 2)?;
            let a = t.segment_softmax(e, &dst, 4)?;
            let m = t.scale_rows(hs, a)?;
            let agg = t.scatter_sum(m, &dst, 4)?;
            let mx = t.scatter_max(hs, &dst, 4)?;
            t.concat_cols(agg, mx)
        });
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Tensor::from_fn(2, 3, |r, c| r as f64 * 0.1 - c as f64);
        let b = Tensor::new(1, 1, vec![f64::MIN_POSITIVE]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a", &a), ("layer.b", &b)]).unwrap();
        assert_eq!(&buf[..4], b"SFPT");
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("layer.b".to_string(), b)]);
        assert!(read_checkpoint(&b"XXXX"[..]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scores_and_segments() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, usize, usize)> {
            (1usize..6, 1usize..4, 1usize..40).prop_flat_map(|(segments, cols, rows)| {
                (
                    proptest::collection::vec(-50.0f64..50.0, rows * cols),
                    proptest::collection::vec(0..segments, rows),
                    Just(segments),
                    Just(cols),
                )
            })
        }

        proptest! {
            #[test]
            fn segment_softmax_sums_to_one((scores, seg, segments, cols) in scores_and_segments()) {
                let rows = seg.len();
                let mut tape = Tape::new();
                let s = tape.constant(rows, cols, scores).unwrap();
                let index: Index = seg.clone().into();
                let a = tape.segment_softmax(s, &index, segments).unwrap();
                let mut sums = vec![0.0; segments * cols];
                for (r, &g) in seg.iter().enumerate() {
                    for c in 0..cols {
                        let v = tape.value(a)[r * cols + c];
                        prop_assert!(v >= 0.0);
                        sums[g * cols + c] += v;
                    }
                }
                for g in 0..segments {
                    if seg.contains(&g) {
                        for c in 0..cols {
                            prop_assert!((sums[g * cols + c] - 1.0).abs() <= 1e-12);
                        }
                    }
                }
            }

            #[test]
            fn scatter_of_identity_gather_is_identity(
                data in proptest::collection::vec(-1e6f64..1e6, 1..60),
                cols in 1usize..4,
            ) {
                let rows = data.len() / cols;
                prop_assume!(rows > 0);
                let values = data[..rows * cols].to_vec();
                let mut tape = Tape::new();
                let x = tape.constant(rows, cols, values.clone()).unwrap();
                let index: Index = (0..rows).collect::<Vec<_>>().into();
                let g = tape.gather_rows(x, &index).unwrap();
                let back = tape.scatter_sum(g, &index, rows).unwrap();
                prop_assert_eq!(tape.value(back), &values[..]);
            }
        }
    }
}
