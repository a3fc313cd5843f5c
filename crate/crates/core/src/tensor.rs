//! Reverse-mode automatic differentiation over row-major f64 matrices.
//!
//! A `Graph` records every operation in creation order; `backward` walks the
//! record in reverse, accumulating gradients by summation. Creation order is
//! also execution order, which fixes floating-point summation order and makes
//! runs with identical seeds bit-identical. Shape violations are programming
//! errors and panic with both shapes named.

use std::cell::RefCell;
use std::rc::Rc;

pub const LOG_CLAMP: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    AddRow(usize, usize),
    Sigmoid(usize),
    Gelu(usize),
    LogClamped(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    MeanAll(usize),
    SumAll(usize),
    MeanRows(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Embed { table: usize, ids: Vec<usize> },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    grad_enabled: bool,
    op: Op,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Shared, single-threaded computation graph. Cloning is cheap and refers to
/// the same underlying record.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one node of a graph, carrying its shape for cheap access.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Grad-enabled leaf holding the given row-major values.
    pub fn leaf(&self, rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        self.insert(rows, cols, values, true, Op::Leaf)
    }

    /// Leaf excluded from gradient retention (labels, masks, fixed inputs).
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        self.insert(rows, cols, values, false, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(1, 1, vec![v])
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Tensor {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Number of recorded nodes, exposed for instrumentation.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, rows: usize, cols: usize, values: Vec<f64>, grad_enabled: bool, op: Op) -> Tensor {
        assert_eq!(
            rows * cols,
            values.len(),
            "tensor shape {rows}x{cols} does not match {} values",
            values.len()
        );
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value produced in a {rows}x{cols} tensor"
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { rows, cols, values, grad: None, grad_enabled, op });
        Tensor { graph: self.clone(), id, rows, cols }
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Runs reverse-mode accumulation from a scalar root. Gradients from any
    /// previous call are discarded.
    pub fn backward(&self, root: &Tensor) {
        assert!(
            self.same_graph(&root.graph),
            "backward root belongs to a different graph"
        );
        assert!(
            root.rows == 1 && root.cols == 1,
            "backward root must be a scalar, got {}x{}",
            root.rows,
            root.cols
        );
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad = Some(vec![0.0; node.values.len()]);
        }
        inner.nodes[root.id].grad.as_mut().unwrap()[0] = 1.0;
        for id in (0..inner.nodes.len()).rev() {
            step_backward(&mut inner.nodes, id);
        }
    }
}

impl Tensor {
    pub fn graph(&self) -> Graph {
        self.graph.clone()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    /// Scalar extraction; panics unless the tensor is 1x1.
    pub fn item(&self) -> f64 {
        assert!(
            self.rows == 1 && self.cols == 1,
            "item() requires a scalar, got {}x{}",
            self.rows,
            self.cols
        );
        self.graph.inner.borrow().nodes[self.id].values[0]
    }

    /// Gradient captured by the last `backward` call.
    pub fn grad(&self) -> Vec<f64> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        assert!(node.grad_enabled, "tensor is not grad-enabled");
        node.grad
            .clone()
            .expect("gradient not available; run backward first")
    }

    fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].values)
    }

    fn with_values2<R>(&self, other: &Tensor, f: impl FnOnce(&[f64], &[f64]) -> R) -> R {
        assert!(
            self.graph.same_graph(&other.graph),
            "operands belong to different graphs"
        );
        let inner = self.graph.inner.borrow();
        f(&inner.nodes[self.id].values, &inner.nodes[other.id].values)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} times {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let out = self.with_values2(rhs, |a, b| {
            let mut out = vec![0.0; m * n];
            mm_nn_acc(a, m, k, b, n, &mut out);
            out
        });
        self.graph.insert(m, n, out, true, Op::Matmul(self.id, rhs.id))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let out = self.with_values(|x| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
            out
        });
        self.graph.insert(n, m, out, true, Op::Transpose(self.id))
    }

    fn zip_same_shape(&self, rhs: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert!(
            self.rows == rhs.rows && self.cols == rhs.cols,
            "{name} shape mismatch: {}x{} versus {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        self.with_values2(rhs, |a, b| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let out = self.zip_same_shape(rhs, "add", |x, y| x + y);
        self.graph.insert(self.rows, self.cols, out, true, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        let out = self.zip_same_shape(rhs, "sub", |x, y| x - y);
        self.graph.insert(self.rows, self.cols, out, true, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        let out = self.zip_same_shape(rhs, "mul", |x, y| x * y);
        self.graph.insert(self.rows, self.cols, out, true, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.with_values(|x| x.iter().map(|&v| v * c).collect());
        self.graph.insert(self.rows, self.cols, out, true, Op::Scale(self.id, c))
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let out = self.with_values(|x| x.iter().map(|&v| v + c).collect());
        self.graph.insert(self.rows, self.cols, out, true, Op::AddConst(self.id))
    }

    /// Adds a 1xN row to every row of an MxN tensor.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        assert!(
            row.rows == 1 && row.cols == self.cols,
            "add_row shape mismatch: {}x{} plus row {}x{}",
            self.rows, self.cols, row.rows, row.cols
        );
        let n = self.cols;
        let out = self.with_values2(row, |x, r| {
            x.iter().enumerate().map(|(i, &v)| v + r[i % n]).collect()
        });
        self.graph.insert(self.rows, self.cols, out, true, Op::AddRow(self.id, row.id))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.with_values(|x| x.iter().map(|&v| sigmoid(v)).collect());
        self.graph.insert(self.rows, self.cols, out, true, Op::Sigmoid(self.id))
    }

    pub fn gelu(&self) -> Tensor {
        let out = self.with_values(|x| x.iter().map(|&v| gelu(v)).collect());
        self.graph.insert(self.rows, self.cols, out, true, Op::Gelu(self.id))
    }

    /// Natural log with the input clamped to at least `LOG_CLAMP`; the clamped
    /// region contributes zero gradient.
    pub fn log_clamped(&self) -> Tensor {
        let out = self.with_values(|x| x.iter().map(|&v| v.max(LOG_CLAMP).ln()).collect());
        self.graph.insert(self.rows, self.cols, out, true, Op::LogClamped(self.id))
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let (m, n) = (self.rows, self.cols);
        let out = self.with_values(|x| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                softmax_into(&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
            out
        });
        self.graph.insert(m, n, out, true, Op::SoftmaxRows(self.id))
    }

    /// Per-row normalization to zero mean and unit variance (population
    /// variance, epsilon inside the square root), then gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Tensor {
        assert!(
            gain.rows == 1 && gain.cols == self.cols && bias.rows == 1 && bias.cols == self.cols,
            "layer_norm shape mismatch: {}x{} with gain {}x{} and bias {}x{}",
            self.rows, self.cols, gain.rows, gain.cols, bias.rows, bias.cols
        );
        let (m, n) = (self.rows, self.cols);
        let out = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id].values;
            let g = &inner.nodes[gain.id].values;
            let b = &inner.nodes[bias.id].values;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let (mean, inv_std) = row_stats(row);
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
            out
        };
        self.graph.insert(m, n, out, true, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id })
    }

    pub fn mean_all(&self) -> Tensor {
        assert!(self.rows * self.cols > 0, "mean_all of an empty tensor");
        let count = (self.rows * self.cols) as f64;
        let out = self.with_values(|x| vec![x.iter().sum::<f64>() / count]);
        self.graph.insert(1, 1, out, true, Op::MeanAll(self.id))
    }

    pub fn sum_all(&self) -> Tensor {
        let out = self.with_values(|x| vec![x.iter().sum::<f64>()]);
        self.graph.insert(1, 1, out, true, Op::SumAll(self.id))
    }

    /// Mean over rows, producing a 1xN tensor.
    pub fn mean_rows(&self) -> Tensor {
        assert!(self.rows > 0, "mean_rows of a tensor with no rows");
        let (m, n) = (self.rows, self.cols);
        let out = self.with_values(|x| {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += x[i * n + j];
                }
            }
            for v in out.iter_mut() {
                *v /= m as f64;
            }
            out
        });
        self.graph.insert(1, n, out, true, Op::MeanRows(self.id))
    }

    pub fn concat_rows(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, rhs.cols,
            "concat_rows width mismatch: {}x{} with {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let out = self.with_values2(rhs, |a, b| {
            let mut out = Vec::with_capacity(a.len() + b.len());
            out.extend_from_slice(a);
            out.extend_from_slice(b);
            out
        });
        self.graph
            .insert(self.rows + rhs.rows, self.cols, out, true, Op::ConcatRows(self.id, rhs.id))
    }

    pub fn concat_cols(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.rows, rhs.rows,
            "concat_cols height mismatch: {}x{} with {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let (m, n1, n2) = (self.rows, self.cols, rhs.cols);
        let out = self.with_values2(rhs, |a, b| {
            let mut out = Vec::with_capacity(m * (n1 + n2));
            for i in 0..m {
                out.extend_from_slice(&a[i * n1..(i + 1) * n1]);
                out.extend_from_slice(&b[i * n2..(i + 1) * n2]);
            }
            out
        });
        self.graph.insert(m, n1 + n2, out, true, Op::ConcatCols(self.id, rhs.id))
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        assert!(
            start <= end && end <= self.rows,
            "slice_rows {start}..{end} out of range for {}x{}",
            self.rows, self.cols
        );
        let n = self.cols;
        let out = self.with_values(|x| x[start * n..end * n].to_vec());
        self.graph.insert(end - start, n, out, true, Op::SliceRows { x: self.id, start })
    }

    /// Columns `start..end` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(
            start <= end && end <= self.cols,
            "slice_cols {start}..{end} out of range for {}x{}",
            self.rows, self.cols
        );
        let (m, n) = (self.rows, self.cols);
        let w = end - start;
        let out = self.with_values(|x| {
            let mut out = Vec::with_capacity(m * w);
            for i in 0..m {
                out.extend_from_slice(&x[i * n + start..i * n + end]);
            }
            out
        });
        self.graph.insert(m, w, out, true, Op::SliceCols { x: self.id, start })
    }

    /// Gathers rows of an embedding table; gradients scatter-add back.
    pub fn embed_rows(&self, ids: &[usize]) -> Tensor {
        let (v, d) = (self.rows, self.cols);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range for a table with {v} rows");
        }
        let out = self.with_values(|table| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&table[id * d..(id + 1) * d]);
            }
            out
        });
        self.graph
            .insert(ids.len(), d, out, true, Op::Embed { table: self.id, ids: ids.to_vec() })
    }

    pub fn backward(&self) {
        self.graph.backward(self);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + LAYER_NORM_EPS).sqrt().recip())
}

/// out (m x n) += a (m x k) * b (k x n)
fn mm_nn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// out (m x n) += a (m x k) * transpose(b) where b is n x k
fn mm_nt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, out_v) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += a_row[t] * b_row[t];
            }
            *out_v += s;
        }
    }
}

/// out (m x n) += transpose(a) * b where a is k x m and b is k x n
fn mm_tn_acc(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for t in 0..k {
        let a_row = &a[t * m..(t + 1) * m];
        let b_row = &b[t * n..(t + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

fn step_backward(nodes: &mut [Node], id: usize) {
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, n) = (nodes[id].rows, nodes[id].cols);
            let k = nodes[a].cols;
            let g = nodes[id].grad.take().unwrap();
            {
                let av = std::mem::take(&mut nodes[a].values);
                let gb = nodes[b].grad.as_mut().unwrap();
                mm_tn_acc(&av, m, k, &g, n, gb);
                nodes[a].values = av;
            }
            {
                let bv = std::mem::take(&mut nodes[b].values);
                let ga = nodes[a].grad.as_mut().unwrap();
                mm_nt_acc(&g, m, n, &bv, k, ga);
                nodes[b].values = bv;
            }
            nodes[id].grad = Some(g);
        }
        Op::Transpose(x) => {
            let (m, n) = (nodes[id].rows, nodes[id].cols);
            let g = nodes[id].grad.take().unwrap();
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..m {
                for j in 0..n {
                    gx[j * m + i] += g[i * n + j];
                }
            }
            nodes[id].grad = Some(g);
        }
        Op::Add(a, b) => {
            let g = nodes[id].grad.take().unwrap();
            accumulate(nodes[a].grad.as_mut().unwrap(), &g, 1.0);
            accumulate(nodes[b].grad.as_mut().unwrap(), &g, 1.0);
            nodes[id].grad = Some(g);
        }
        Op::Sub(a, b) => {
            let g = nodes[id].grad.take().unwrap();
            accumulate(nodes[a].grad.as_mut().unwrap(), &g, 1.0);
            accumulate(nodes[b].grad.as_mut().unwrap(), &g, -1.0);
            nodes[id].grad = Some(g);
        }
        Op::Mul(a, b) => {
            let g = nodes[id].grad.take().unwrap();
            {
                let bv = std::mem::take(&mut nodes[b].values);
                let ga = nodes[a].grad.as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                nodes[b].values = bv;
            }
            {
                let av = std::mem::take(&mut nodes[a].values);
                let gb = nodes[b].grad.as_mut().unwrap();
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
                nodes[a].values = av;
            }
            nodes[id].grad = Some(g);
        }
        Op::Scale(x, c) => {
            let g = nodes[id].grad.take().unwrap();
            accumulate(nodes[x].grad.as_mut().unwrap(), &g, c);
            nodes[id].grad = Some(g);
        }
        Op::AddConst(x) => {
            let g = nodes[id].grad.take().unwrap();
            accumulate(nodes[x].grad.as_mut().unwrap(), &g, 1.0);
            nodes[id].grad = Some(g);
        }
        Op::AddRow(x, row) => {
            let n = nodes[id].cols;
            let g = nodes[id].grad.take().unwrap();
            accumulate(nodes[x].grad.as_mut().unwrap(), &g, 1.0);
            let gr = nodes[row].grad.as_mut().unwrap();
            for (i, &gv) in g.iter().enumerate() {
                gr[i % n] += gv;
            }
            nodes[id].grad = Some(g);
        }
        Op::Sigmoid(x) => {
            let g = nodes[id].grad.take().unwrap();
            let s = std::mem::take(&mut nodes[id].values);
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..g.len() {
                gx[i] += g[i] * s[i] * (1.0 - s[i]);
            }
            nodes[id].values = s;
            nodes[id].grad = Some(g);
        }
        Op::Gelu(x) => {
            let g = nodes[id].grad.take().unwrap();
            let xv = std::mem::take(&mut nodes[x].values);
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..g.len() {
                gx[i] += g[i] * gelu_deriv(xv[i]);
            }
            nodes[x].values = xv;
            nodes[id].grad = Some(g);
        }
        Op::LogClamped(x) => {
            let g = nodes[id].grad.take().unwrap();
            let xv = std::mem::take(&mut nodes[x].values);
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..g.len() {
                if xv[i] >= LOG_CLAMP {
                    gx[i] += g[i] / xv[i];
                }
            }
            nodes[x].values = xv;
            nodes[id].grad = Some(g);
        }
        Op::SoftmaxRows(x) => {
            let (m, n) = (nodes[id].rows, nodes[id].cols);
            let g = nodes[id].grad.take().unwrap();
            let s = std::mem::take(&mut nodes[id].values);
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..m {
                let srow = &s[i * n..(i + 1) * n];
                let grow = &g[i * n..(i + 1) * n];
                let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                let gxrow = &mut gx[i * n..(i + 1) * n];
                for j in 0..n {
                    gxrow[j] += srow[j] * (grow[j] - dot);
                }
            }
            nodes[id].values = s;
            nodes[id].grad = Some(g);
        }
        Op::LayerNorm { x, gain, bias } => {
            let (m, n) = (nodes[id].rows, nodes[id].cols);
            let g = nodes[id].grad.take().unwrap();
            let xv = std::mem::take(&mut nodes[x].values);
            let gv = std::mem::take(&mut nodes[gain].values);
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let grow = &g[i * n..(i + 1) * n];
                let (mean, inv_std) = row_stats(row);
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                let dxhat: Vec<f64> = grow.iter().zip(&gv).map(|(&gg, &ga)| gg * ga).collect();
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                {
                    let gx = nodes[x].grad.as_mut().unwrap();
                    let gxrow = &mut gx[i * n..(i + 1) * n];
                    let nf = n as f64;
                    for j in 0..n {
                        gxrow[j] +=
                            inv_std / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                {
                    let ggain = nodes[gain].grad.as_mut().unwrap();
                    for j in 0..n {
                        ggain[j] += grow[j] * xhat[j];
                    }
                }
                {
                    let gbias = nodes[bias].grad.as_mut().unwrap();
                    for j in 0..n {
                        gbias[j] += grow[j];
                    }
                }
            }
            nodes[x].values = xv;
            nodes[gain].values = gv;
            nodes[id].grad = Some(g);
        }
        Op::MeanAll(x) => {
            let g = nodes[id].grad.take().unwrap();
            let count = nodes[x].values.len() as f64;
            let gx = nodes[x].grad.as_mut().unwrap();
            let gv = g[0] / count;
            for v in gx.iter_mut() {
                *v += gv;
            }
            nodes[id].grad = Some(g);
        }
        Op::SumAll(x) => {
            let g = nodes[id].grad.take().unwrap();
            let gx = nodes[x].grad.as_mut().unwrap();
            for v in gx.iter_mut() {
                *v += g[0];
            }
            nodes[id].grad = Some(g);
        }
        Op::MeanRows(x) => {
            let g = nodes[id].grad.take().unwrap();
            let m = nodes[x].rows;
            let n = nodes[x].cols;
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] += g[j] / m as f64;
                }
            }
            nodes[id].grad = Some(g);
        }
        Op::ConcatRows(a, b) => {
            let g = nodes[id].grad.take().unwrap();
            let split = nodes[a].values.len();
            accumulate(nodes[a].grad.as_mut().unwrap(), &g[..split], 1.0);
            accumulate(nodes[b].grad.as_mut().unwrap(), &g[split..], 1.0);
            nodes[id].grad = Some(g);
        }
        Op::ConcatCols(a, b) => {
            let g = nodes[id].grad.take().unwrap();
            let (m, n1, n2) = (nodes[a].rows, nodes[a].cols, nodes[b].cols);
            let n = n1 + n2;
            {
                let ga = nodes[a].grad.as_mut().unwrap();
                for i in 0..m {
                    for j in 0..n1 {
                        ga[i * n1 + j] += g[i * n + j];
                    }
                }
            }
            {
                let gb = nodes[b].grad.as_mut().unwrap();
                for i in 0..m {
                    for j in 0..n2 {
                        gb[i * n2 + j] += g[i * n + n1 + j];
                    }
                }
            }
            nodes[id].grad = Some(g);
        }
        Op::SliceRows { x, start } => {
            let g = nodes[id].grad.take().unwrap();
            let n = nodes[x].cols;
            let gx = nodes[x].grad.as_mut().unwrap();
            for (i, &gv) in g.iter().enumerate() {
                gx[start * n + i] += gv;
            }
            nodes[id].grad = Some(g);
        }
        Op::SliceCols { x, start } => {
            let g = nodes[id].grad.take().unwrap();
            let (m, w) = (nodes[id].rows, nodes[id].cols);
            let n = nodes[x].cols;
            let gx = nodes[x].grad.as_mut().unwrap();
            for i in 0..m {
                for j in 0..w {
                    gx[i * n + start + j] += g[i * w + j];
                }
            }
            nodes[id].grad = Some(g);
        }
        Op::Embed { table, ids } => {
            let g = nodes[id].grad.take().unwrap();
            let d = nodes[table].cols;
            let gt = nodes[table].grad.as_mut().unwrap();
            for (pos, &tok) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[tok * d + j] += g[pos * d + j];
                }
            }
            nodes[id].grad = Some(g);
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}
