//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every value is a matrix; vectors are 1 × n or n × 1. Operations append a node to
//! the tape and return a [`Var`] handle. [`Graph::backward`] walks the tape in reverse
//! from a 1 × 1 output. Each op checks its output for NaN/Inf.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A node's value with its gradient slot.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Option<Array2<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    ScaleShift(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        scale: f64,
        probs: Vec<Array2<f64>>,
    },
    /// Normalization along rows (layer norm) or columns (batch norm); caches x̂ and 1/σ.
    Normalize {
        x: Var,
        by_row: bool,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SegmentSoftmax(Var, usize),
    SegmentWeightedSum {
        w: Var,
        v: Var,
        block: usize,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::ScaleShift(..) => "scale_shift",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gelu(..) => "gelu",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::BlockAttention { .. } => "block_attention",
            Op::Normalize { .. } => "normalize",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    tensor: Tensor,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax, in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_row_inplace(m: &mut Array2<f64>, row: &Array2<f64>) {
    let r = row.row(0);
    for mut o in m.rows_mut() {
        o += &r;
    }
}

fn col_sums(g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, g.ncols()));
    for r in g.rows() {
        let mut o = out.row_mut(0);
        o += &r;
    }
    out
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(op.name().to_string()));
        }
        self.nodes.push(Node {
            tensor: Tensor {
                value,
                grad: None,
                requires_grad,
            },
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].tensor.value
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].tensor.value.dim()
    }

    /// Gradient after [`Graph::backward`]; zeros if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        let t = &self.nodes[v.0].tensor;
        t.grad
            .clone()
            .unwrap_or_else(|| Array2::zeros(t.value.dim()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err("matmul", format!("({ar}×{ac})·({br}×{bc})")));
        }
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x·w + b` with `b` a 1 × out row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != wr || self.shape(b) != (1, wc) {
            return Err(shape_err(
                "affine",
                format!("({xr}×{xc})·({wr}×{wc}) + {:?}", self.shape(b)),
            ));
        }
        let mut out = self.value(x).dot(self.value(w));
        add_row_inplace(&mut out, self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Affine(x, w, b), rg)
    }

    /// `x * gamma + beta` with both rows broadcast.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.row_operand("scale_shift", x, gamma)?;
        self.row_operand("scale_shift", x, beta)?;
        let mut out = self.value(x).clone();
        let gv = self.value(gamma).row(0);
        let bv = self.value(beta).row(0);
        for mut r in out.rows_mut() {
            for ((o, g), b) in r.iter_mut().zip(gv.iter()).zip(bv.iter()) {
                *o = *o * g + b;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::ScaleShift(x, gamma, beta), rg)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    fn row_operand(&self, op: &str, a: Var, row: Var) -> Result<()> {
        let (_, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(shape_err(
                op,
                format!("row operand {:?} for {:?}", self.shape(row), self.shape(a)),
            ));
        }
        Ok(())
    }

    /// `a + row` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand("add_row", a, row)?;
        let mut out = self.value(a).clone();
        add_row_inplace(&mut out, self.value(row));
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a * row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).row(0);
        for mut o in out.rows_mut() {
            o *= &r;
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a) * s;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant array (dropout masks, loss weights).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Result<Var> {
        if self.shape(a) != c.dim() {
            return Err(shape_err(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(a), c.dim()),
            ));
        }
        let out = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).map_err(|e| shape_err("concat_cols", e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| shape_err("concat_rows", e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row r is input row `idx[r]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(a);
        let mut out = Array2::zeros((idx.len(), c));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    /// softmax(Q Kᵀ · scale) V independently within each block of `block` consecutive rows.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, scale: f64) -> Result<Var> {
        let (n, dk) = self.shape(q);
        let (nv, dv) = self.shape(v);
        if self.shape(k) != (n, dk) || nv != n || block == 0 || n % block != 0 {
            return Err(shape_err(
                "block_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, block {block}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let mut out = Array2::zeros((n, dv));
        let mut probs = Vec::with_capacity(n / block);
        for b in 0..n / block {
            let rows = s![b * block..(b + 1) * block, ..];
            let qb = self.value(q).slice(rows);
            let kb = self.value(k).slice(rows);
            let vb = self.value(v).slice(rows);
            let mut p = qb.dot(&kb.t()) * scale;
            softmax_rows(&mut p);
            out.slice_mut(rows).assign(&p.dot(&vb));
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            },
            rg,
        )
    }

    fn normalize(&mut self, x: Var, by_row: bool, eps: f64) -> Result<Var> {
        let a = self.value(x);
        let axis = if by_row { Axis(1) } else { Axis(0) };
        let m = a.len_of(axis) as f64;
        let lanes = a.lanes(axis);
        let mut inv_std = Vec::new();
        let mut xhat = Array2::zeros(a.dim());
        for (i, lane) in lanes.into_iter().enumerate() {
            let mean = lane.sum() / m;
            let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let mut out = if by_row {
                xhat.row_mut(i)
            } else {
                xhat.column_mut(i)
            };
            for (o, v) in out.iter_mut().zip(lane.iter()) {
                *o = (v - mean) * inv;
            }
        }
        let rg = self.rg(x);
        self.push(
            xhat.clone(),
            Op::Normalize {
                x,
                by_row,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// (x − mean) / sqrt(var + eps) along each row.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.normalize(x, true, eps)
    }

    /// (x − mean) / sqrt(var + eps) down each column, using biased batch statistics.
    pub fn batch_norm_raw(&mut self, x: Var, eps: f64) -> Result<Var> {
        if self.shape(x).0 < 2 {
            return Err(Error::Batch("batch normalization needs at least 2 rows".into()));
        }
        self.normalize(x, false, eps)
    }

    /// Softmax of an n × 1 column within consecutive blocks of `block` rows.
    pub fn segment_softmax(&mut self, x: Var, block: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if c != 1 || block == 0 || n % block != 0 {
            return Err(shape_err("segment_softmax", format!("{n}×{c}, block {block}")));
        }
        let mut out = self.value(x).clone().into_shape_with_order((n / block, block)).expect("contiguous");
        softmax_rows(&mut out);
        let out = out.into_shape_with_order((n, 1)).expect("contiguous");
        let rg = self.rg(x);
        self.push(out, Op::SegmentSoftmax(x, block), rg)
    }

    /// out_b = Σ_t w[bT + t] · v[bT + t, :] over blocks of `block` rows.
    pub fn segment_weighted_sum(&mut self, w: Var, v: Var, block: usize) -> Result<Var> {
        let (n, c) = self.shape(w);
        let (nv, d) = self.shape(v);
        if c != 1 || nv != n || block == 0 || n % block != 0 {
            return Err(shape_err(
                "segment_weighted_sum",
                format!("w {n}×{c}, v {nv}×{d}, block {block}"),
            ));
        }
        let (wv, vv) = (self.value(w), self.value(v));
        let mut out = Array2::zeros((n / block, d));
        for i in 0..n {
            let wi = wv[[i, 0]];
            let mut row = out.row_mut(i / block);
            row.scaled_add(wi, &vv.row(i));
        }
        let rg = self.rg(w) || self.rg(v);
        self.push(out, Op::SegmentWeightedSum { w, v, block }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        let t = &mut self.nodes[v.0].tensor;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(existing) => *existing += &g,
            None => t.grad = Some(g),
        }
    }

    /// Reverse sweep from a 1 × 1 output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.shape(out) != (1, 1) {
            return Err(shape_err("backward", format!("output is {:?}, not a scalar", self.shape(out))));
        }
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
        self.nodes[out.0].tensor.grad = Some(Array2::ones((1, 1)));
        for idx in (0..=out.0).rev() {
            let Some(g) = self.nodes[idx].tensor.grad.take() else {
                continue;
            };
            if !self.nodes[idx].tensor.requires_grad {
                self.nodes[idx].tensor.grad = Some(g);
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, idx: usize, op: &Op, g: &Array2<f64>) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::Affine(x, w, b) => {
                if self.rg(*x) {
                    let gx = g.dot(&self.value(*w).t());
                    self.accumulate(*x, gx);
                }
                if self.rg(*w) {
                    let gw = self.value(*x).t().dot(g);
                    self.accumulate(*w, gw);
                }
                self.accumulate(*b, col_sums(g));
            }
            Op::ScaleShift(x, gamma, beta) => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).row(0);
                let mut gx = g.clone();
                let mut gg = Array2::zeros((1, gv.len()));
                for (mut gr, xr) in gx.rows_mut().into_iter().zip(xv.rows()) {
                    for (((o, s), xe), acc) in gr.iter_mut().zip(gv.iter()).zip(xr.iter()).zip(gg.iter_mut()) {
                        *acc += *o * xe;
                        *o *= s;
                    }
                }
                let gb = col_sums(g);
                self.accumulate(*x, gx);
                self.accumulate(*gamma, gg);
                self.accumulate(*beta, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, -g);
            }
            Op::Mul(a, b) => {
                let ga = g * self.value(*b);
                let gb = g * self.value(*a);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).row(0);
                let mut ga = g.clone();
                for mut o in ga.rows_mut() {
                    o *= &r;
                }
                let gr = col_sums(&(g * self.value(*a)));
                self.accumulate(*a, ga);
                self.accumulate(*row, gr);
            }
            Op::Scale(a, s) => self.accumulate(*a, g * *s),
            Op::MulConst(a, c) => self.accumulate(*a, g * c),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].tensor.value;
                let ga = g * &y.mapv(|s| s * (1.0 - s));
                self.accumulate(*a, ga);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].tensor.value;
                let ga = g * &y.mapv(|t| 1.0 - t * t);
                self.accumulate(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let ga = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|gv, xv| if *xv > 0.0 { *gv } else { slope * gv });
                self.accumulate(*a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = ndarray::Zip::from(g).and(x).map_collect(|gv, xv| gv * gelu_grad(*xv));
                self.accumulate(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accumulate(p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                let w = g.ncols();
                ga.slice_mut(s![.., *start..*start + w]).assign(g);
                self.accumulate(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    self.accumulate(p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (o, &i) in rows.iter().enumerate() {
                    let mut r = ga.row_mut(i);
                    r += &g.row(o);
                }
                self.accumulate(*a, ga);
            }
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                scale,
                probs,
            } => {
                let (n, dk) = self.shape(*q);
                let dv = self.shape(*v).1;
                let mut gq = Array2::zeros((n, dk));
                let mut gk = Array2::zeros((n, dk));
                let mut gv = Array2::zeros((n, dv));
                for (b, p) in probs.iter().enumerate() {
                    let rows = s![b * block..(b + 1) * block, ..];
                    let go = g.slice(rows);
                    let qb = self.value(*q).slice(rows);
                    let kb = self.value(*k).slice(rows);
                    let vb = self.value(*v).slice(rows);
                    gv.slice_mut(rows).assign(&p.t().dot(&go));
                    let gp = go.dot(&vb.t());
                    let dots = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gs = p * &(&gp - &dots) * *scale;
                    gq.slice_mut(rows).assign(&gs.dot(&kb));
                    gk.slice_mut(rows).assign(&gs.t().dot(&qb));
                }
                self.accumulate(*q, gq);
                self.accumulate(*k, gk);
                self.accumulate(*v, gv);
            }
            Op::Normalize {
                x,
                by_row,
                xhat,
                inv_std,
            } => {
                let axis = if *by_row { Axis(1) } else { Axis(0) };
                let m = xhat.len_of(axis) as f64;
                let mut gx = Array2::zeros(xhat.dim());
                for (i, ((gl, xl), inv)) in g
                    .lanes(axis)
                    .into_iter()
                    .zip(xhat.lanes(axis))
                    .zip(inv_std)
                    .enumerate()
                {
                    let sum_g = gl.sum();
                    let sum_gx: f64 = gl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum();
                    let mut out = if *by_row {
                        gx.row_mut(i)
                    } else {
                        gx.column_mut(i)
                    };
                    for ((o, gv), xv) in out.iter_mut().zip(gl.iter()).zip(xl.iter()) {
                        *o = inv / m * (m * gv - sum_g - xv * sum_gx);
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::SegmentSoftmax(x, block) => {
                let y = &self.nodes[idx].tensor.value;
                let n = y.nrows();
                let mut gx = Array2::zeros((n, 1));
                for b in 0..n / block {
                    let r = b * block..(b + 1) * block;
                    let dot: f64 = r.clone().map(|i| g[[i, 0]] * y[[i, 0]]).sum();
                    for i in r {
                        gx[[i, 0]] = y[[i, 0]] * (g[[i, 0]] - dot);
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::SegmentWeightedSum { w, v, block } => {
                let (n, d) = self.shape(*v);
                let wv = self.value(*w);
                let vv = self.value(*v);
                let mut gw = Array2::zeros((n, 1));
                let mut gvv = Array2::zeros((n, d));
                for i in 0..n {
                    let go = g.row(i / block);
                    gw[[i, 0]] = go.dot(&vv.row(i));
                    gvv.row_mut(i).scaled_add(wv[[i, 0]], &go);
                }
                self.accumulate(*w, gw);
                self.accumulate(*v, gvv);
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(*a, ga);
            }
        }
    }
}
