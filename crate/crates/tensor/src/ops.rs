//! Built-in primitives and their tape helpers.

use crate::error::{expect_shape, OpError, Result};
use crate::flops;
use crate::tape::{BackwardCtx, Forward, Op, Tape, Var};
use crate::tensor::Tensor;

fn matrix_dims(what: &str, t: &Tensor) -> Result<(usize, usize), OpError> {
    if t.rank() != 2 {
        return Err(OpError::Shape(format!("{what}: expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×n`, `out: k×n`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable without changing the
    // result between runs.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Recip,
    Square,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    /// Smooth L1 with transition width β.
    Huber(f64),
    /// Clamp with pass-through gradient on the closed interval.
    Clamp(f64, f64),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Recip => 1.0 / x,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Huber(beta) => {
                let a = x.abs();
                if a < beta {
                    0.5 * x * x / beta
                } else {
                    a - 0.5 * beta
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Recip => -y * y,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::Huber(beta) => {
                if x.abs() < beta {
                    x / beta
                } else {
                    x.signum()
                }
            }
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Op for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Recip => "recip",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Huber(_) => "huber",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        match self {
            Unary::Log if x.data().iter().any(|&v| v <= 0.0) => {
                return Err(OpError::Domain("log of a non-positive value".into()))
            }
            Unary::Sqrt if x.data().iter().any(|&v| v < 0.0) => {
                return Err(OpError::Domain("sqrt of a negative value".into()))
            }
            _ => {}
        }
        Ok(Forward::new(x.map(|v| self.apply(v))))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let mut g = ctx.grad.clone();
        for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(x.data()).zip(ctx.output.data()) {
            *gv *= self.derivative(xv, yv);
        }
        vec![Some(g)]
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

impl Op for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, b) = (inputs[0], inputs[1]);
        expect_shape("right operand", b.shape(), a.shape())?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match self {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        Ok(Forward::new(Tensor::new(a.shape().to_vec(), data).expect("same shape")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad;
        match self {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Binary::Mul => {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().zip(b.data()).for_each(|(v, &w)| *v *= w);
                    t
                });
                let gb = ctx.needs[1].then(|| {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().zip(a.data()).for_each(|(v, &w)| *v *= w);
                    t
                });
                vec![ga, gb]
            }
        }
    }
}

/// `a[i, j] + b[j]` for `a: n×k`, `b: 1×k`.
struct AddRow;

impl Op for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (_, k) = matrix_dims("lhs", a)?;
        expect_shape("row", b.shape(), &[1, k])?;
        let mut out = a.clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(Forward::new(out))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let k = ctx.inputs[1].len();
        let gb = ctx.needs[1].then(|| {
            let mut acc = vec![0.0; k];
            for row in ctx.grad.data().chunks_exact(k) {
                for (a, &g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
            Tensor::new(vec![1, k], acc).expect("row shape")
        });
        vec![Some(ctx.grad.clone()), gb]
    }
}

/// `a[i, j] · s[i]` for `a: n×k`, `s: n×1`.
struct ScaleRows;

impl Op for ScaleRows {
    fn name(&self) -> &'static str {
        "scale_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, s) = (inputs[0], inputs[1]);
        let (n, k) = matrix_dims("lhs", a)?;
        expect_shape("row scales", s.shape(), &[n, 1])?;
        let mut out = a.clone();
        for (row, &sv) in out.data_mut().chunks_exact_mut(k.max(1)).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(Forward::new(out))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, s) = (ctx.inputs[0], ctx.inputs[1]);
        let k = a.cols().max(1);
        let ga = ctx.needs[0].then(|| {
            let mut g = ctx.grad.clone();
            for (row, &sv) in g.data_mut().chunks_exact_mut(k).zip(s.data()) {
                row.iter_mut().for_each(|v| *v *= sv);
            }
            g
        });
        let gs = ctx.needs[1].then(|| {
            let data = ctx
                .grad
                .data()
                .chunks_exact(k)
                .zip(a.data().chunks_exact(k))
                .map(|(g, x)| dot(g, x))
                .collect();
            Tensor::new(s.shape().to_vec(), data).expect("scale shape")
        });
        vec![ga, gs]
    }
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = matrix_dims("lhs", a)?;
        let (k2, n) = matrix_dims("rhs", b)?;
        if k != k2 {
            return Err(OpError::Shape(format!(
                "inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        flops::add((m * k * n) as u64);
        Ok(Forward::new(Tensor::new(vec![m, n], out).expect("matmul shape")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let ga = ctx.needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            gemm_nt_acc(ctx.grad.data(), b.data(), &mut out, m, n, k);
            Tensor::new(vec![m, k], out).expect("grad shape")
        });
        let gb = ctx.needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            gemm_tn_acc(a.data(), ctx.grad.data(), &mut out, m, k, n);
            Tensor::new(vec![k, n], out).expect("grad shape")
        });
        vec![ga, gb]
    }
}

fn transpose_data(t: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = t[i * cols + j];
        }
    }
    out
}

struct Transpose;

impl Op for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (r, c) = matrix_dims("input", inputs[0])?;
        let data = transpose_data(inputs[0].data(), r, c);
        Ok(Forward::new(Tensor::new(vec![c, r], data).expect("transpose")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (r, c) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
        let data = transpose_data(ctx.grad.data(), c, r);
        vec![Some(Tensor::new(vec![r, c], data).expect("transpose"))]
    }
}

struct Reshape(Vec<usize>);

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        if self.0.iter().product::<usize>() != x.len() {
            return Err(OpError::Shape(format!("cannot reshape {:?} into {:?}", x.shape(), self.0)));
        }
        Ok(Forward::new(x.clone().reshaped(self.0.clone()).expect("checked")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let shape = ctx.inputs[0].shape().to_vec();
        vec![Some(ctx.grad.clone().reshaped(shape).expect("same size"))]
    }
}

/// Concatenate matrices along columns.
struct ConcatCols;

impl Op for ConcatCols {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        if inputs.is_empty() {
            return Err(OpError::Shape("concat of zero tensors".into()));
        }
        let rows = matrix_dims("part 0", inputs[0])?.0;
        let mut total = 0;
        for (i, t) in inputs.iter().enumerate() {
            let (r, c) = matrix_dims(&format!("part {i}"), t)?;
            if r != rows {
                return Err(OpError::Shape(format!("part {i} has {r} rows, expected {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for t in inputs {
                out.extend_from_slice(t.row(r));
            }
        }
        Ok(Forward::new(Tensor::new(vec![rows, total], out).expect("concat")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let rows = ctx.grad.rows();
        let total = ctx.grad.cols();
        let mut offset = 0;
        let mut out = Vec::with_capacity(ctx.inputs.len());
        for (t, &need) in ctx.inputs.iter().zip(ctx.needs) {
            let c = t.shape()[1];
            if need {
                let mut data = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    data.extend_from_slice(&ctx.grad.data()[r * total + offset..r * total + offset + c]);
                }
                out.push(Some(Tensor::new(vec![rows, c], data).expect("concat grad")));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct SliceCols {
    start: usize,
    end: usize,
}

impl Op for SliceCols {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (rows, cols) = matrix_dims("input", inputs[0])?;
        if self.start >= self.end || self.end > cols {
            return Err(OpError::Shape(format!(
                "column range {}..{} out of bounds for {cols} columns",
                self.start, self.end
            )));
        }
        let w = self.end - self.start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&inputs[0].row(r)[self.start..self.end]);
        }
        Ok(Forward::new(Tensor::new(vec![rows, w], out).expect("slice")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let cols = x.shape()[1];
        let w = self.end - self.start;
        let mut g = Tensor::zeros(x.shape().to_vec());
        for r in 0..x.shape()[0] {
            g.data_mut()[r * cols + self.start..r * cols + self.end]
                .copy_from_slice(&ctx.grad.data()[r * w..(r + 1) * w]);
        }
        vec![Some(g)]
    }
}

/// Row gather; repeated indices accumulate in backward.
struct GatherRows(Vec<usize>);

impl Op for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (rows, cols) = matrix_dims("input", inputs[0])?;
        let mut out = Vec::with_capacity(self.0.len() * cols);
        for &i in &self.0 {
            if i >= rows {
                return Err(OpError::Shape(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(inputs[0].row(i));
        }
        Ok(Forward::new(Tensor::new(vec![self.0.len(), cols], out).expect("gather")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let cols = x.shape()[1];
        let mut g = Tensor::zeros(x.shape().to_vec());
        for (k, &i) in self.0.iter().enumerate() {
            let src = &ctx.grad.data()[k * cols..(k + 1) * cols];
            for (d, s) in g.row_mut(i).iter_mut().zip(src) {
                *d += s;
            }
        }
        vec![Some(g)]
    }
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

struct Sum {
    mean: bool,
}

impl Op for Sum {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        if x.is_empty() {
            return Err(OpError::Shape("reduction over an empty tensor".into()));
        }
        let s: f64 = x.data().iter().sum();
        let v = if self.mean { s / x.len() as f64 } else { s };
        Ok(Forward::new(Tensor::scalar(v)))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let g = ctx.grad.data()[0];
        let g = if self.mean { g / x.len() as f64 } else { g };
        vec![Some(Tensor::full(x.shape().to_vec(), g))]
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax over the last axis.
struct SoftmaxRows;

impl Op for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        let width = *x.shape().last().ok_or_else(|| OpError::Shape("softmax of a scalar".into()))?;
        if width == 0 {
            return Err(OpError::Shape("softmax over an empty axis".into()));
        }
        let mut out = x.clone();
        out.data_mut().chunks_exact_mut(width).for_each(softmax_in_place);
        Ok(Forward::new(out))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let y = ctx.output;
        let width = *y.shape().last().expect("checked in forward");
        let mut g = ctx.grad.clone();
        for (gr, yr) in g.data_mut().chunks_exact_mut(width).zip(y.data().chunks_exact(width)) {
            let s = dot(gr, yr);
            for (gv, &yv) in gr.iter_mut().zip(yr) {
                *gv = yv * (*gv - s);
            }
        }
        vec![Some(g)]
    }
}

/// Divide each row by its Euclidean norm.
struct NormalizeRows;

impl Op for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        let k = x.cols();
        if k == 0 {
            return Err(OpError::Shape("normalize over an empty axis".into()));
        }
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for row in out.data_mut().chunks_exact_mut(k) {
            let n = dot(row, row).sqrt();
            if n == 0.0 {
                return Err(OpError::Domain("cannot normalize a zero row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(Forward::with_saved(out, norms))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let norms: &Vec<f64> = ctx.saved();
        let k = ctx.output.cols();
        let mut g = ctx.grad.clone();
        for ((gr, yr), &n) in g
            .data_mut()
            .chunks_exact_mut(k)
            .zip(ctx.output.data().chunks_exact(k))
            .zip(norms)
        {
            let s = dot(gr, yr);
            for (gv, &yv) in gr.iter_mut().zip(yr) {
                *gv = (*gv - yv * s) / n;
            }
        }
        vec![Some(g)]
    }
}

/// Euclidean norm of each row, shape `n×1`.
struct RowNorms;

impl Op for RowNorms {
    fn name(&self) -> &'static str {
        "l2_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        let k = x.cols().max(1);
        let data = x.data().chunks_exact(k).map(|r| dot(r, r).sqrt()).collect();
        Ok(Forward::new(Tensor::new(vec![x.rows(), 1], data).expect("norms")))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let k = x.cols().max(1);
        let mut g = x.clone();
        for ((row, &n), &gn) in g
            .data_mut()
            .chunks_exact_mut(k)
            .zip(ctx.output.data())
            .zip(ctx.grad.data())
        {
            let f = if n > 0.0 { gn / n } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= f);
        }
        vec![Some(g)]
    }
}

// ---------------------------------------------------------------------------
// Tape helpers

impl Tape {
    pub fn unary(&mut self, x: Var, op: Unary) -> Result<Var> {
        self.apply(op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Mul, &[a, b])
    }

    /// Broadcast-add a `1×k` row to every row of an `n×k` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(AddRow, &[a, row])
    }

    /// Multiply each row of `a` by the matching entry of the `n×1` column `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.apply(ScaleRows, &[a, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Reshape(shape.into()), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, a: Var, range: std::ops::Range<usize>) -> Result<Var> {
        self.apply(SliceCols { start: range.start, end: range.end }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(GatherRows(indices), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum { mean: false }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum { mean: true }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(SoftmaxRows, &[a])
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(NormalizeRows, &[a])
    }

    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        self.apply(RowNorms, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::AddScalar(c))
    }
}
