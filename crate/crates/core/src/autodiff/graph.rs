use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Softmax { x: usize },
    LogSoftmax(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Relu(usize),
    RmsNorm { x: usize, inv: Vec<f64> },
    GatherRows { table: usize, idx: Vec<usize> },
    Pick { x: usize, rows: Vec<usize>, cols: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation record for reverse-mode differentiation.
///
/// Node ids increase strictly with insertion order. A record is single-use:
/// [`Graph::backward`] consumes it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::Shape {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t, false, "constant")
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Param, t, true, "param")
    }

    fn binary_values(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.is_scalar() {
            let x = ta.item();
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(shape_err(name, ta, tb))
        }
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::Add(a.0, b.0), v, ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::Sub(a.0, b.0), v, ng, "sub")
    }

    /// Elementwise product; one side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::Mul(a.0, b.0), v, ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        let ng = self.ng(a.0);
        self.push(Op::Scale(a.0, c), v, ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())?;
        let ng = self.ng(a.0);
        self.push(Op::AddScalar(a.0), v, ng, "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::MatMul(a.0, b.0), Tensor::new(vec![m, n], out)?, ng, "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (m, k) = require_2d("matmul_nt", ta)?;
        let (n, k2) = require_2d("matmul_nt", tb)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(ta.data(), tb.data(), m, k, n, &mut out);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(Op::MatMulNt(a.0, b.0), Tensor::new(vec![m, n], out)?, ng, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = require_2d("transpose", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let ng = self.ng(a.0);
        self.push(Op::Transpose(a.0), Tensor::new(vec![c, r], out)?, ng, "transpose")
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`; masked entries are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = require_2d("row_softmax", t)?;
        if causal && r > c {
            return Err(shape_err("causal_softmax", t, t));
        }
        let mut out = t.data().to_vec();
        for i in 0..r {
            let len = if causal { i + 1 } else { c };
            kernels::softmax_prefix(&mut out[i * c..(i + 1) * c], len);
        }
        let ng = self.ng(a.0);
        self.push(
            Op::Softmax { x: a.0 },
            Tensor::new(vec![r, c], out)?,
            ng,
            "row_softmax",
        )
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = require_2d("log_softmax", t)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::log_softmax_row(t.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a.0);
        self.push(Op::LogSoftmax(a.0), Tensor::new(vec![r, c], out)?, ng, "log_softmax")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        let ng = self.ng(a.0);
        self.push(op, v, ng, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), "sigmoid", kernels::sigmoid)
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a.0), "log_sigmoid", kernels::log_sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), "relu", |x| x.max(0.0))
    }

    /// Row-wise RMS normalisation (no gain).
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = require_2d("rms_norm", t)?;
        let mut out = vec![0.0; r * c];
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            inv.push(kernels::rms_norm_row(t.row(i), eps, &mut out[i * c..(i + 1) * c]));
        }
        let ng = self.ng(a.0);
        self.push(
            Op::RmsNorm { x: a.0, inv },
            Tensor::new(vec![r, c], out)?,
            ng,
            "rms_norm",
        )
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let (r, c) = require_2d("gather_rows", t)?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather_rows: index {i} out of {r} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table.0);
        self.push(
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len(), c], out)?,
            ng,
            "gather_rows",
        )
    }

    /// Picks `x[rows[i], cols[i]]` into a vector (gather-by-index).
    pub fn pick(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = require_2d("pick", t)?;
        if rows.len() != cols.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![rows.len()],
                rhs: vec![cols.len()],
            });
        }
        let mut out = Vec::with_capacity(rows.len());
        for (&i, &j) in rows.iter().zip(cols) {
            if i >= r || j >= c {
                return Err(Error::invalid(format!("pick: ({i},{j}) outside {r}x{c}")));
            }
            out.push(t.data()[i * c + j]);
        }
        let ng = self.ng(x.0);
        self.push(
            Op::Pick {
                x: x.0,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            Tensor::vector(out),
            ng,
            "pick",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = require_2d("slice_cols", t)?;
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.ng(x.0);
        self.push(
            Op::SliceCols { x: x.0, start },
            Tensor::new(vec![r, len], out)?,
            ng,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = &self.nodes[parts[0].0].value;
        let (r, _) = require_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (pr, pc) = require_2d("concat_cols", t)?;
            if pr != r {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            Tensor::new(vec![r, total], out)?,
            ng,
            "concat_cols",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.ng(a.0);
        self.push(Op::Sum(a.0), Tensor::scalar(s), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a.0);
        self.push(Op::Mean(a.0), Tensor::scalar(s), ng, "mean")
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Empty("add_all of no terms".into()))?;
        let mut acc = *first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar loss. Consumes the record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Consumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, g, 1.0, grads);
                self.acc_broadcast(*b, g, 1.0, grads);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, g, 1.0, grads);
                self.acc_broadcast(*b, g, -1.0, grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.ng(*a) {
                    let prod = broadcast_product(g, tb.data());
                    self.acc_broadcast(*a, &prod, 1.0, grads);
                }
                if self.ng(*b) {
                    let prod = broadcast_product(g, ta.data());
                    self.acc_broadcast(*b, &prod, 1.0, grads);
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    let buf = self.buf(*a, grads);
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.ng(*a) {
                    let buf = self.buf(*a, grads);
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if self.ng(*a) {
                    // dA = dC · Bᵀ
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_nt(g, tb.data(), m, n, k, &mut tmp);
                    add_into(self.buf(*a, grads), &tmp);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_tn_acc(ta.data(), g, m, k, n, self.buf(*b, grads));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().0;
                if self.ng(*a) {
                    // dA = dC · B
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul(g, tb.data(), m, n, k, &mut tmp);
                    add_into(self.buf(*a, grads), &tmp);
                }
                if self.ng(*b) {
                    // dB = dCᵀ · A
                    kernels::matmul_tn_acc(g, ta.data(), m, n, k, self.buf(*b, grads));
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    let (r, c) = self.nodes[*a].value.dims2().unwrap();
                    let buf = self.buf(*a, grads);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, .. } => {
                if self.ng(*x) {
                    let (r, c) = node.value.dims2().unwrap();
                    let buf = self.buf(*x, grads);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            buf[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.ng(*x) {
                    let (r, c) = node.value.dims2().unwrap();
                    let buf = self.buf(*x, grads);
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            buf[i * c + j] += gr[j] - y[i * c + j].exp() * s;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(*x) {
                    let buf = self.buf(*x, grads);
                    for ((o, gv), yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::LogSigmoid(x) => {
                if self.ng(*x) {
                    let xs = self.nodes[*x].value.data();
                    let buf = self.buf(*x, grads);
                    for ((o, gv), xv) in buf.iter_mut().zip(g).zip(xs) {
                        *o += gv * kernels::sigmoid(-xv);
                    }
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let xs = self.nodes[*x].value.data();
                    let buf = self.buf(*x, grads);
                    for ((o, gv), xv) in buf.iter_mut().zip(g).zip(xs) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RmsNorm { x, inv } => {
                if self.ng(*x) {
                    let (r, c) = node.value.dims2().unwrap();
                    let buf = self.buf(*x, grads);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let m = kernels::dot(yr, gr) / c as f64;
                        for j in 0..c {
                            buf[i * c + j] += inv[i] * (gr[j] - yr[j] * m);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.ng(*table) {
                    let c = self.nodes[*table].value.dims2().unwrap().1;
                    let buf = self.buf(*table, grads);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Pick { x, rows, cols } => {
                if self.ng(*x) {
                    let c = self.nodes[*x].value.dims2().unwrap().1;
                    let buf = self.buf(*x, grads);
                    for (k, (&i, &j)) in rows.iter().zip(cols).enumerate() {
                        buf[i * c + j] += g[k];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let (r, len) = node.value.dims2().unwrap();
                    let c = self.nodes[*x].value.dims2().unwrap().1;
                    let buf = self.buf(*x, grads);
                    for i in 0..r {
                        add_into(
                            &mut buf[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.dims2().unwrap().1;
                    if self.ng(p) {
                        let buf = self.buf(p, grads);
                        for i in 0..r {
                            add_into(
                                &mut buf[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let buf = self.buf(*a, grads);
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if self.ng(*a) {
                    let buf = self.buf(*a, grads);
                    let n = buf.len() as f64;
                    buf.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
        }
    }

    fn buf<'g>(&self, id: usize, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut Vec<f64> {
        let n = self.nodes[id].value.numel();
        grads[id].get_or_insert_with(|| vec![0.0; n])
    }

    /// Accumulates `sign·g` into node `a`, reducing when `a` was broadcast.
    fn acc_broadcast(&self, a: usize, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.ng(a) {
            return;
        }
        let buf = self.buf(a, grads);
        if buf.len() == g.len() {
            for (o, gv) in buf.iter_mut().zip(g) {
                *o += sign * gv;
            }
        } else {
            buf[0] += sign * g.iter().sum::<f64>();
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `g ⊙ other`, where `other` may be a single broadcast value.
fn broadcast_product(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(a, b)| a * b).collect()
    } else {
        g.iter().map(|a| a * other[0]).collect()
    }
}
