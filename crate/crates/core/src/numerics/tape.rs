use super::tensor::{as_matrix, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Tanh,
    Gelu,
    Relu,
    Log,
    Exp,
    Sigmoid,
}

impl Pointwise {
    pub fn name(self) -> &'static str {
        match self {
            Pointwise::Tanh => "tanh",
            Pointwise::Gelu => "gelu",
            Pointwise::Relu => "relu",
            Pointwise::Log => "log",
            Pointwise::Exp => "exp",
            Pointwise::Sigmoid => "sigmoid",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Tanh => x.tanh(),
            Pointwise::Gelu => gelu(x),
            Pointwise::Relu => x.max(0.0),
            Pointwise::Log => x.ln(),
            Pointwise::Exp => x.exp(),
            Pointwise::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::Tanh => 1.0 - y * y,
            Pointwise::Gelu => gelu_grad(x),
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Log => 1.0 / x,
            Pointwise::Exp => y,
            Pointwise::Sigmoid => y * (1.0 - y),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// An operation with a hand-written backward rule, recorded as a single node.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Pointwise(Pointwise, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    PixelShuffle {
        x: Var,
        rows: usize,
        cols: usize,
        factor: usize,
        channels: usize,
    },
    WeightedSum {
        weights: Var,
        maps: Vec<Var>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::MatMulNt(..) => "matmul_nt".into(),
            Op::Add(..) => "add".into(),
            Op::AddRow(..) => "add_row".into(),
            Op::Mul(..) => "mul".into(),
            Op::Scale(..) => "scale".into(),
            Op::MulScalar(..) => "mul_scalar".into(),
            Op::Pointwise(kind, _) => kind.name().into(),
            Op::Softmax(_) => "softmax".into(),
            Op::LayerNorm { .. } => "layer_norm".into(),
            Op::ConcatCols(..) => "concat_channels".into(),
            Op::ConcatRows(..) => "concat_rows".into(),
            Op::SliceCols(..) => "slice_cols".into(),
            Op::SliceRows(..) => "slice_rows".into(),
            Op::Reshape(_) => "reshape".into(),
            Op::Sum(_) => "sum".into(),
            Op::Mean(_) => "mean".into(),
            Op::PixelShuffle { .. } => "pixel_shuffle".into(),
            Op::WeightedSum { .. } => "weighted_sum".into(),
            Op::Custom { op, .. } => op.name().into(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of forward operations for reverse-mode
/// differentiation.
///
/// Nodes are appended in execution order, so the vector itself is a
/// topological order. Gradients accumulate only into leaves created with
/// [`Tape::leaf`]; calling [`Tape::backward`] twice doubles them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatCols(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Pointwise(_, a)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::PixelShuffle { x, .. } => vec![*x],
            Op::WeightedSum { weights, maps } => {
                let mut v = vec![*weights];
                v.extend(maps.iter().copied());
                v
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul", ta)?;
        let (k2, n) = as_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `a·bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul_nt", ta)?;
        let (n, k2) = as_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, ta.data(), tb.data(), &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.numel() != c {
            return Err(Error::dim("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::dim("mul_scalar", self.value(a).shape(), ts.shape()));
        }
        let sv = ts.data()[0];
        let out = self.value(a).map(|x| sv * x);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn pointwise(&mut self, kind: Pointwise, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if kind == Pointwise::Log {
            if let Some(i) = ta.data().iter().position(|&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::domain(
                    "log",
                    format!("entry {i} is non-positive ({})", ta.data()[i]),
                ));
            }
        }
        let out = ta.map(|x| kind.apply(x));
        self.push(out, Op::Pointwise(kind, a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.pointwise(Pointwise::Tanh, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.pointwise(Pointwise::Gelu, a)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::domain("softmax", "empty input"));
        }
        let out = Tensor::new(ta.shape().to_vec(), softmax_rows(ta.data(), ta.cols()))?;
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * inv * tg.data()[j] + tb.data()[j];
            }
            mean.push(mu);
            inv_std.push(inv);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    /// Row-wise concatenation `[a ‖ b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = as_matrix("concat_channels", ta)?;
        let (rb, cb) = as_matrix("concat_channels", tb)?;
        if ra != rb {
            return Err(Error::dim("concat_channels", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::matrix(ra, ca + cb, data)?, Op::ConcatCols(a, b))
    }

    /// Stacks `a` above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = as_matrix("concat_rows", ta)?;
        let (rb, cb) = as_matrix("concat_rows", tb)?;
        if ca != cb {
            return Err(Error::dim("concat_rows", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        self.push(Tensor::matrix(ra + rb, ca, data)?, Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = as_matrix("slice_cols", ta)?;
        if start + len > c {
            return Err(Error::dim("slice_cols", ta.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::domain("mean", "empty input"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Rearranges a `(rows·cols) × (factor²·channels)` matrix of per-cell
    /// sub-pixel values into a `(rows·factor · cols·factor) × channels`
    /// image, row-major over the enlarged grid.
    pub fn pixel_shuffle(
        &mut self,
        x: Var,
        rows: usize,
        cols: usize,
        factor: usize,
        channels: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let expect = [rows * cols, factor * factor * channels];
        if tx.shape() != expect {
            return Err(Error::dim("pixel_shuffle", tx.shape(), &expect));
        }
        let mut out = vec![0.0; tx.numel()];
        for (src, dst) in shuffle_pairs(rows, cols, factor, channels) {
            out[dst] = tx.data()[src];
        }
        let t = Tensor::matrix(rows * factor * cols * factor, channels, out)?;
        self.push(
            t,
            Op::PixelShuffle {
                x,
                rows,
                cols,
                factor,
                channels,
            },
        )
    }

    /// `Σ_k weights[k] · maps[k]` for equally shaped maps.
    pub fn weighted_sum(&mut self, weights: Var, maps: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        if tw.numel() != maps.len() || maps.is_empty() {
            return Err(Error::dim("weighted_sum", tw.shape(), &[maps.len()]));
        }
        let shape = self.value(maps[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(maps[0]).numel()];
        for (k, &m) in maps.iter().enumerate() {
            let tm = self.value(m);
            if tm.shape() != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, tm.shape()));
            }
            let w = tw.data()[k];
            for (o, v) in out.iter_mut().zip(tm.data()) {
                *o += w * v;
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum {
                weights,
                maps: maps.to_vec(),
            },
        )
    }

    /// Records the result of a custom op computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Reverse sweep from a single-element `root`, accumulating into leaf
    /// gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::domain("backward", "root must hold exactly one element"));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(&g) {
                    *s += x;
                }
                continue;
            }
            backprop_node(&self.nodes, node, &g, &mut adj)?;
        }
        Ok(())
    }
}

fn shuffle_pairs(
    rows: usize,
    cols: usize,
    factor: usize,
    channels: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let in_cols = factor * factor * channels;
    let out_w = cols * factor;
    (0..rows * cols).flat_map(move |cell| {
        let (gy, gx) = (cell / cols, cell % cols);
        (0..factor * factor).flat_map(move |sub| {
            let (dy, dx) = (sub / factor, sub % factor);
            let pixel = (gy * factor + dy) * out_w + gx * factor + dx;
            (0..channels).map(move |ch| (cell * in_cols + sub * channels + ch, pixel * channels + ch))
        })
    })
}

pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

fn adjoint<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix("matmul", val(*a))?;
            let n = val(*b).cols();
            if let Some(ga) = adjoint(nodes, adj, *a) {
                gemm_nt(m, n, k, g, val(*b).data(), ga);
            }
            if let Some(gb) = adjoint(nodes, adj, *b) {
                gemm_tn(k, m, n, val(*a).data(), g, gb);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = as_matrix("matmul_nt", val(*a))?;
            let n = val(*b).rows();
            if let Some(ga) = adjoint(nodes, adj, *a) {
                gemm_nn(m, n, k, g, val(*b).data(), ga);
            }
            if let Some(gb) = adjoint(nodes, adj, *b) {
                gemm_tn(n, m, k, g, val(*a).data(), gb);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = adjoint(nodes, adj, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = adjoint(nodes, adj, *b) {
                add_into(gb, g);
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(ga) = adjoint(nodes, adj, *a) {
                add_into(ga, g);
            }
            let c = val(*bias).numel();
            if let Some(gb) = adjoint(nodes, adj, *bias) {
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(tb) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = adjoint(nodes, adj, *b) {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(ta) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).data()[0];
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += sv * gi;
                }
            }
            if let Some(gs) = adjoint(nodes, adj, *s) {
                gs[0] += g.iter().zip(val(*a).data()).map(|(gi, ai)| gi * ai).sum::<f64>();
            }
        }
        Op::Pointwise(kind, a) => {
            let (x, y) = (val(*a).data(), node.value.data());
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * kind.derivative(x[i], y[i]);
                }
            }
        }
        Op::Softmax(a) => {
            let c = node.value.cols();
            let y = node.value.data();
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for ((grow, yrow), drow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let tx = val(*x);
            let c = tx.cols();
            let gam = val(*gamma).data();
            let xhat: Vec<f64> = tx
                .data()
                .chunks(c)
                .enumerate()
                .flat_map(|(r, row)| row.iter().map(move |v| (v - mean[r]) * inv_std[r]))
                .collect();
            if let Some(gg) = adjoint(nodes, adj, *gamma) {
                for (i, gi) in g.iter().enumerate() {
                    gg[i % c] += gi * xhat[i];
                }
            }
            if let Some(gb) = adjoint(nodes, adj, *beta) {
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            if let Some(gx) = adjoint(nodes, adj, *x) {
                for r in 0..tx.rows() {
                    let gh: Vec<f64> = (0..c).map(|j| g[r * c + j] * gam[j]).collect();
                    let xh = &xhat[r * c..(r + 1) * c];
                    let m1 = gh.iter().sum::<f64>() / c as f64;
                    let m2 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += inv_std[r] * (gh[j] - m1 - xh[j] * m2);
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let w = ca + cb;
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for (r, row) in g.chunks(w).enumerate() {
                    add_into(&mut ga[r * ca..(r + 1) * ca], &row[..ca]);
                }
            }
            if let Some(gb) = adjoint(nodes, adj, *b) {
                for (r, row) in g.chunks(w).enumerate() {
                    add_into(&mut gb[r * cb..(r + 1) * cb], &row[ca..]);
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let na = val(*a).numel();
            if let Some(ga) = adjoint(nodes, adj, *a) {
                add_into(ga, &g[..na]);
            }
            if let Some(gb) = adjoint(nodes, adj, *b) {
                add_into(gb, &g[na..]);
            }
        }
        Op::SliceCols(a, start) => {
            let c = val(*a).cols();
            let len = node.value.cols();
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for (r, row) in g.chunks(len).enumerate() {
                    add_into(&mut ga[r * c + start..r * c + start + len], row);
                }
            }
        }
        Op::SliceRows(a, start) => {
            let c = val(*a).cols();
            if let Some(ga) = adjoint(nodes, adj, *a) {
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = adjoint(nodes, adj, *a) {
                add_into(ga, g);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = adjoint(nodes, adj, *a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = adjoint(nodes, adj, *a) {
                let s = g[0] / ga.len() as f64;
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::PixelShuffle {
            x,
            rows,
            cols,
            factor,
            channels,
        } => {
            if let Some(gx) = adjoint(nodes, adj, *x) {
                for (src, dst) in shuffle_pairs(*rows, *cols, *factor, *channels) {
                    gx[src] += g[dst];
                }
            }
        }
        Op::WeightedSum { weights, maps } => {
            let w = val(*weights).data().to_vec();
            if nodes[weights.0].needs_grad {
                let gw: Vec<f64> = maps
                    .iter()
                    .map(|m| g.iter().zip(val(*m).data()).map(|(a, b)| a * b).sum())
                    .collect();
                if let Some(dst) = adjoint(nodes, adj, *weights) {
                    add_into(dst, &gw);
                }
            }
            for (k, m) in maps.iter().enumerate() {
                if let Some(gm) = adjoint(nodes, adj, *m) {
                    for (d, gi) in gm.iter_mut().zip(g) {
                        *d += w[k] * gi;
                    }
                }
            }
        }
        Op::Custom { op, inputs } => {
            let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
            let grads = op.backward(&values, &node.value, g);
            for (v, gi) in inputs.iter().zip(grads) {
                if let Some(dst) = adjoint(nodes, adj, *v) {
                    add_into(dst, &gi);
                }
            }
        }
    }
    Ok(())
}
