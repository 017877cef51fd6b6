//! Coordinate MLPs and positional encoding.

use std::f64::consts::PI;

use avatar_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamSet};

/// `[x, sin(2^k π x), cos(2^k π x)]` for `k < octaves`, per input column.
pub fn positional_encoding(x: &Tensor, octaves: usize) -> Tensor {
    let (n, c) = (x.rows(), x.cols());
    let width = c * (1 + 2 * octaves);
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        let row = x.row(r);
        out.extend_from_slice(row);
        for k in 0..octaves {
            let f = (1u64 << k) as f64 * PI;
            out.extend(row.iter().map(|v| (f * v).sin()));
            out.extend(row.iter().map(|v| (f * v).cos()));
        }
    }
    Tensor::new(vec![n, width], out).expect("encoding shape")
}

pub fn encoding_width(inputs: usize, octaves: usize) -> usize {
    inputs * (1 + 2 * octaves)
}

/// Fully connected stack with tanh between layers and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        Self { prefix: prefix.into(), dims }
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Glorot-uniform weights, zero biases. The last layer is scaled by
    /// `head_gain` so fresh networks start near their bias outputs.
    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng, head_gain: f64) {
        for l in 0..self.layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let gain = if l + 1 == self.layers() { head_gain } else { 1.0 };
            let bound = gain * (6.0 / (i + o) as f64).sqrt();
            let w = (0..i * o).map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }).collect();
            params.insert(self.weight_name(l), Tensor::matrix(i, o, w).unwrap());
            params.insert(self.bias_name(l), Tensor::zeros(vec![1, o]));
        }
    }

    pub fn zero(&self, params: &mut ParamSet) {
        for l in 0..self.layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            params.insert(self.weight_name(l), Tensor::zeros(vec![i, o]));
            params.insert(self.bias_name(l), Tensor::zeros(vec![1, o]));
        }
    }

    /// Zeroes only the last layer: the output is exactly the zero map while
    /// hidden features stay random, so gradients still reach every layer.
    pub fn zero_output(&self, params: &mut ParamSet) {
        let l = self.layers() - 1;
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        params.insert(self.weight_name(l), Tensor::zeros(vec![i, o]));
        params.insert(self.bias_name(l), Tensor::zeros(vec![1, o]));
    }

    pub fn set_output_bias(&self, params: &mut ParamSet, bias: &[f64]) {
        let b = Tensor::matrix(1, bias.len(), bias.to_vec()).unwrap();
        params.insert(self.bias_name(self.layers() - 1), b);
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layers() {
            let w = bound.var(&self.weight_name(l))?;
            let b = bound.var(&self.bias_name(l))?;
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if l + 1 < self.layers() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Multiply-adds of one forward pass over `rows` inputs.
    pub fn macs(&self, rows: usize) -> u64 {
        self.dims.windows(2).map(|w| (rows * w[0] * w[1]) as u64).sum()
    }
}

/// Bound linear map `x W + b`.
pub fn linear(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.w"))?;
    let z = tape.matmul(x, w)?;
    match bound.get(&format!("{prefix}.b")) {
        Some(b) => Ok(tape.add_row(z, b)?),
        None => Ok(z),
    }
}

pub fn init_linear(params: &mut ParamSet, rng: &mut impl Rng, prefix: &str, i: usize, o: usize, bias: bool) {
    let bound = (6.0 / (i + o) as f64).sqrt();
    let w = (0..i * o).map(|_| rng.gen_range(-bound..bound)).collect();
    params.insert(format!("{prefix}.w"), Tensor::matrix(i, o, w).unwrap());
    if bias {
        params.insert(format!("{prefix}.b"), Tensor::zeros(vec![1, o]));
    }
}
