use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{matmul_into, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    LogSigmoid(usize),
    Clamp(usize, f64, f64),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    RowL2Normalize(usize, f64),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    BroadcastCols(usize),
    RowSum(usize),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one reverse-mode pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf handles.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that follows `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.clone(), Op::Leaf, tensor.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.clone(), Op::Leaf, false)
    }

    /// Leaf that always receives a gradient.
    pub fn variable(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.clone(), Op::Leaf, true)
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        value.requires_grad = requires_grad;
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn with_value<T>(&self, id: usize, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a 1x1 `loss`. The tape can only be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            self.consumed.set(false);
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    let (r, c) = node.value.shape();
                    Some(Tensor::new(r, c, g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).shape();
            let n = val(*b).cols;
            if needs(*a) {
                let bv = &val(*b).data;
                add_into(&mut grads[*a], m * k, |ga| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            if needs(*b) {
                let av = &val(*a).data;
                add_into(&mut grads[*b], k * n, |gb| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *o += a_ip * x;
                            }
                        }
                    }
                });
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).shape();
            add_into(&mut grads[*a], r * c, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                add_into(&mut grads[*a], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
            }
            if needs(*b) {
                add_into(&mut grads[*b], g.len(), |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x)
                });
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = &val(*b).data;
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
            }
            if needs(*b) {
                let av = &val(*a).data;
                add_into(&mut grads[*b], g.len(), |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::AddRow(a, row) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
            }
            if needs(*row) {
                let c = y.cols;
                add_into(&mut grads[*row], c, |gr| {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            add_into(&mut grads[*a], g.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x)
            });
        }
        Op::AddScalar(a) => {
            add_into(&mut grads[*a], g.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
            });
        }
        Op::Sigmoid(a) => elementwise(grads, *a, g, |i| y.data[i] * (1.0 - y.data[i])),
        Op::Tanh(a) => elementwise(grads, *a, g, |i| 1.0 - y.data[i] * y.data[i]),
        Op::Relu(a) => {
            let x = &val(*a).data;
            elementwise(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::LeakyRelu(a, slope) => {
            let x = &val(*a).data;
            elementwise(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { *slope })
        }
        Op::Exp(a) => elementwise(grads, *a, g, |i| y.data[i]),
        Op::Log(a) => {
            let x = &val(*a).data;
            elementwise(grads, *a, g, |i| 1.0 / x[i])
        }
        Op::LogSigmoid(a) => {
            let x = &val(*a).data;
            elementwise(grads, *a, g, |i| sigmoid(-x[i]))
        }
        Op::Clamp(a, lo, hi) => {
            let x = &val(*a).data;
            elementwise(grads, *a, g, |i| {
                if x[i] >= *lo && x[i] <= *hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::RowSoftmax(a) => {
            let c = y.cols;
            add_into(&mut grads[*a], g.len(), |ga| {
                for (r, (gr, yr)) in g.chunks(c).zip(y.data.chunks(c)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, s)| x * s).sum();
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::RowLogSoftmax(a) => {
            let c = y.cols;
            add_into(&mut grads[*a], g.len(), |ga| {
                for (r, (gr, yr)) in g.chunks(c).zip(y.data.chunks(c)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[r * c + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            });
        }
        Op::RowL2Normalize(a, eps) => {
            let x = val(*a);
            let c = x.cols;
            add_into(&mut grads[*a], g.len(), |ga| {
                for r in 0..x.rows {
                    let xr = &x.data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = norm + eps;
                    let proj = if norm > 0.0 {
                        xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>()
                            / (norm * denom * denom)
                    } else {
                        0.0
                    };
                    for j in 0..c {
                        ga[r * c + j] += gr[j] / denom - xr[j] * proj;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = y.cols;
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols;
                if needs(p) {
                    let rows = y.rows;
                    add_into(&mut grads[p], rows * w, |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let src_cols = val(*a).cols;
            let w = y.cols;
            add_into(&mut grads[*a], val(*a).len(), |ga| {
                for r in 0..y.rows {
                    for j in 0..w {
                        ga[r * src_cols + start + j] += g[r * w + j];
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let c = y.cols;
            add_into(&mut grads[*a], val(*a).len(), |ga| {
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[i * c + j];
                    }
                }
            });
        }
        Op::ScatterAddRows(a, idx) => {
            let c = y.cols;
            add_into(&mut grads[*a], val(*a).len(), |ga| {
                for (i, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[dst * c + j];
                    }
                }
            });
        }
        Op::BroadcastCols(a) => {
            let c = y.cols;
            add_into(&mut grads[*a], y.rows, |ga| {
                for (r, gr) in g.chunks(c).enumerate() {
                    ga[r] += gr.iter().sum::<f64>();
                }
            });
        }
        Op::RowSum(a) => {
            let c = val(*a).cols;
            add_into(&mut grads[*a], val(*a).len(), |ga| {
                for (r, chunk) in ga.chunks_mut(c).enumerate() {
                    chunk.iter_mut().for_each(|o| *o += g[r]);
                }
            });
        }
        Op::Sum(a) => {
            add_into(&mut grads[*a], val(*a).len(), |ga| {
                ga.iter_mut().for_each(|o| *o += g[0])
            });
        }
        Op::Mean(a) => {
            let n = val(*a).len().max(1) as f64;
            add_into(&mut grads[*a], val(*a).len(), |ga| {
                ga.iter_mut().for_each(|o| *o += g[0] / n)
            });
        }
    }
}

fn elementwise(grads: &mut [Option<Vec<f64>>], a: usize, g: &[f64], local: impl Fn(usize) -> f64) {
    add_into(&mut grads[a], g.len(), |ga| {
        for i in 0..g.len() {
            ga[i] += g[i] * local(i);
        }
    });
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        let mut t = self.tape.with_value(self.id, Tensor::clone);
        t.requires_grad = false;
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.with_value(self.id, Tensor::shape)
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |t| t.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn check_same(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::Shape { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn grad_any(&self, others: &[&Var<'t>]) -> bool {
        self.requires_grad() || others.iter().any(|v| v.requires_grad())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.tape.with_value(self.id, |t| t.map(f));
        self.tape.push(out, op, self.requires_grad())
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: (m, k),
                rhs: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            matmul_into(&nodes[self.id].value.data, &nodes[other.id].value.data, &mut out, m, k, n);
        }
        let rg = self.grad_any(&[other]);
        Ok(self
            .tape
            .push(Tensor::new(m, n, out)?, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Var<'t> {
        let out = self.tape.with_value(self.id, Tensor::transpose);
        self.tape.push(out, Op::Transpose(self.id), self.requires_grad())
    }

    fn zip_with(&self, other: &Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_same(other, name)?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.rows, a.cols, data)?
        };
        let rg = self.grad_any(&[other]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Adds a 1 x cols row vector to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        let rs = row.shape();
        if rs != (1, c) {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: (r, c),
                rhs: rs,
            });
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
            let mut data = a.data.clone();
            for chunk in data.chunks_mut(c.max(1)) {
                chunk.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
            }
            Tensor::new(r, c, data)?
        };
        let rg = self.grad_any(&[row]);
        Ok(self.tape.push(out, Op::AddRow(self.id, row.id), rg))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| s * x)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&self) -> Var<'t> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn row_softmax(&self) -> Var<'t> {
        let out = self.tape.with_value(self.id, |t| {
            let mut out = t.clone();
            for row in out.data.chunks_mut(t.cols.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            out
        });
        self.tape.push(out, Op::RowSoftmax(self.id), self.requires_grad())
    }

    pub fn row_log_softmax(&self) -> Var<'t> {
        let out = self.tape.with_value(self.id, |t| {
            let mut out = t.clone();
            for row in out.data.chunks_mut(t.cols.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        });
        self.tape.push(out, Op::RowLogSoftmax(self.id), self.requires_grad())
    }

    /// Scales each row to unit L2 norm using `|v| + eps` as denominator,
    /// so an all-zero row stays zero.
    pub fn row_l2_normalize(&self, eps: f64) -> Var<'t> {
        let out = self.tape.with_value(self.id, |t| {
            let mut out = t.clone();
            for row in out.data.chunks_mut(t.cols.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm + eps);
            }
            out
        });
        self.tape
            .push(out, Op::RowL2Normalize(self.id, eps), self.requires_grad())
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let rows = first.shape().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.0 != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: s,
                });
            }
            widths.push(s.1);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        {
            let nodes = tape.nodes.borrow();
            let mut offset = 0;
            for (p, w) in parts.iter().zip(&widths) {
                out.set_col_block(offset, &nodes[p.id].value)?;
                offset += w;
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        Ok(tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if start + width > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of {c} (rows {r})", start + width),
            });
        }
        let out = self.tape.with_value(self.id, |t| t.col_block(start, width));
        Ok(self
            .tape
            .push(out, Op::SliceCols(self.id, start), self.requires_grad()))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let (r, _) = self.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of {r}"),
            });
        }
        let out = self.tape.with_value(self.id, |t| t.select_rows(&idx));
        Ok(self
            .tape
            .push(out, Op::GatherRows(self.id, idx), self.requires_grad()))
    }

    /// Output has `n_out` rows; input row `i` is added into output row `idx[i]`.
    pub fn scatter_add_rows(&self, idx: Rc<[usize]>, n_out: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if idx.len() != r {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                msg: format!("{} indices for {r} rows", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                msg: format!("target row {bad} out of {n_out}"),
            });
        }
        let out = self.tape.with_value(self.id, |t| {
            let mut out = Tensor::zeros(n_out, c);
            for (i, &dst) in idx.iter().enumerate() {
                let src = &t.data[i * c..(i + 1) * c];
                out.data[dst * c..(dst + 1) * c]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, v)| *o += v);
            }
            out
        });
        Ok(self
            .tape
            .push(out, Op::ScatterAddRows(self.id, idx), self.requires_grad()))
    }

    /// Repeats an n x 1 column `width` times.
    pub fn broadcast_cols(&self, width: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if c != 1 {
            return Err(TensorError::Shape {
                op: "broadcast_cols",
                lhs: (r, c),
                rhs: (r, 1),
            });
        }
        let out = self.tape.with_value(self.id, |t| {
            let data = t.data.iter().flat_map(|&v| std::iter::repeat_n(v, width)).collect();
            Tensor::new(r, width, data).expect("broadcast shape")
        });
        Ok(self
            .tape
            .push(out, Op::BroadcastCols(self.id), self.requires_grad()))
    }

    /// Sums each row into an n x 1 column.
    pub fn row_sum(&self) -> Var<'t> {
        let out = self.tape.with_value(self.id, |t| {
            let sums = t.data.chunks(t.cols.max(1)).map(|r| r.iter().sum()).collect();
            Tensor::new(t.rows, 1, sums).expect("row_sum shape")
        });
        self.tape.push(out, Op::RowSum(self.id), self.requires_grad())
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.with_value(self.id, Tensor::sum);
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let s = self.tape.with_value(self.id, |t| t.sum() / t.len().max(1) as f64);
        self.tape
            .push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.variable(&Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        let g = y.backward().unwrap();
        assert!(close(g.get(x).unwrap().item(), 0.25, 1e-15));
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.variable(&Tensor::new(2, 3, vec![1., -2., 3., 0.5, 0., 9.]).unwrap());
        let g = x.sum().backward().unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_three_four() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::row(&[3.0, 4.0]));
        let y = x.row_l2_normalize(1e-12).value();
        assert!(close(y.get(0, 0), 0.6, 1e-12) && close(y.get(0, 1), 0.8, 1e-12));
    }

    #[test]
    fn normalize_zero_row_is_zero_with_finite_grad() {
        let tape = Tape::new();
        let x = tape.variable(&Tensor::zeros(1, 3));
        let y = x.row_l2_normalize(1e-12);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let g = y.sum().backward().unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(4, 2, 1.0, &mut rng);
        let tape = Tape::new();
        let c = tape.constant(&a).matmul(&tape.constant(&b)).unwrap().value();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get(i, p) * b.get(p, j);
                }
                assert!(close(c.get(i, j), s, 1e-12));
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(2, 3));
        let b = tape.constant(&Tensor::zeros(2, 3));
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(a.add(&tape.constant(&Tensor::zeros(3, 2))).is_err());
        assert!(a.add_row(&tape.constant(&Tensor::zeros(1, 2))).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let a = tape.variable(&Tensor::zeros(2, 2));
        assert_eq!(
            a.backward().unwrap_err(),
            TensorError::NonScalarLoss((2, 2))
        );
    }

    #[test]
    fn tape_is_consumed_once() {
        let tape = Tape::new();
        let a = tape.variable(&Tensor::scalar(1.0));
        let l = a.exp();
        l.backward().unwrap();
        assert_eq!(l.backward().unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(2, 3, vec![1., 2., 3., -1., 0., 1000.]).unwrap());
        let y = x.row_softmax().value();
        for r in 0..2 {
            assert!(close(y.row_slice(r).iter().sum::<f64>(), 1.0, 1e-15));
        }
    }

    #[test]
    fn scatter_and_gather_are_adjoint_shapes() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(3, 1, vec![1., 2., 3.]).unwrap());
        let s = x.scatter_add_rows(Rc::from(vec![0, 0, 1]), 2).unwrap().value();
        assert_eq!(s.data(), &[3.0, 3.0]);
        let g = x.gather_rows(Rc::from(vec![2, 2])).unwrap().value();
        assert_eq!(g.data(), &[3.0, 3.0]);
        assert!(x.gather_rows(Rc::from(vec![3])).is_err());
    }
}
