//! Fused single-head scaled dot-product attention.

use crate::error::{OpError, Result};
use crate::flops;
use crate::ops::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place};
use crate::tape::{BackwardCtx, Forward, Op, Tape, Var};
use crate::tensor::Tensor;

/// `softmax(Q Kᵀ / √d) V`, applied independently to `groups` equal row blocks
/// of the query and key/value matrices.
pub struct Attention {
    pub groups: usize,
}

struct Dims {
    nq: usize,
    nk: usize,
    dk: usize,
    dv: usize,
}

impl Attention {
    fn dims(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Dims, OpError> {
        for (name, t) in [("query", q), ("key", k), ("value", v)] {
            if t.rank() != 2 {
                return Err(OpError::Shape(format!("{name} must be a matrix, got {:?}", t.shape())));
            }
        }
        let g = self.groups;
        if g == 0 || q.rows() % g != 0 || k.rows() % g != 0 {
            return Err(OpError::Shape(format!(
                "{} query rows / {} key rows not divisible into {g} groups",
                q.rows(),
                k.rows()
            )));
        }
        if q.cols() != k.cols() {
            return Err(OpError::Shape(format!(
                "query width {} differs from key width {}",
                q.cols(),
                k.cols()
            )));
        }
        if k.rows() != v.rows() {
            return Err(OpError::Shape(format!(
                "{} keys but {} values",
                k.rows(),
                v.rows()
            )));
        }
        Ok(Dims { nq: q.rows() / g, nk: k.rows() / g, dk: q.cols(), dv: v.cols() })
    }
}

impl Op for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let Dims { nq, nk, dk, dv } = self.dims(q, k, v)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let g = self.groups;
        let mut probs = vec![0.0; g * nq * nk];
        let mut out = vec![0.0; g * nq * dv];
        for gi in 0..g {
            let qg = &q.data()[gi * nq * dk..(gi + 1) * nq * dk];
            let kg = &k.data()[gi * nk * dk..(gi + 1) * nk * dk];
            let vg = &v.data()[gi * nk * dv..(gi + 1) * nk * dv];
            let p = &mut probs[gi * nq * nk..(gi + 1) * nq * nk];
            gemm_nt_acc(qg, kg, p, nq, dk, nk);
            for row in p.chunks_exact_mut(nk) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm_acc(p, vg, &mut out[gi * nq * dv..(gi + 1) * nq * dv], nq, nk, dv);
        }
        flops::add((g * nq * nk * (dk + dv)) as u64);
        let value = Tensor::new(vec![g * nq, dv], out).expect("attention shape");
        Ok(Forward::with_saved(value, probs))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (q, k, v) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let Dims { nq, nk, dk, dv } = self.dims(q, k, v).expect("validated in forward");
        let probs: &Vec<f64> = ctx.saved();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut dp = vec![0.0; nq * nk];
        for gi in 0..self.groups {
            let qg = &q.data()[gi * nq * dk..(gi + 1) * nq * dk];
            let kg = &k.data()[gi * nk * dk..(gi + 1) * nk * dk];
            let vg = &v.data()[gi * nk * dv..(gi + 1) * nk * dv];
            let p = &probs[gi * nq * nk..(gi + 1) * nq * nk];
            let go = &ctx.grad.data()[gi * nq * dv..(gi + 1) * nq * dv];
            // dV = Pᵀ dO
            gemm_tn_acc(p, go, &mut gv[gi * nk * dv..(gi + 1) * nk * dv], nq, nk, dv);
            // dP = dO Vᵀ, then through the row softmax
            dp.iter_mut().for_each(|x| *x = 0.0);
            gemm_nt_acc(go, vg, &mut dp, nq, dv, nk);
            for (dr, pr) in dp.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let s = dot(dr, pr);
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - s) * scale;
                }
            }
            gemm_acc(&dp, kg, &mut gq[gi * nq * dk..(gi + 1) * nq * dk], nq, nk, dk);
            gemm_tn_acc(&dp, qg, &mut gk[gi * nk * dk..(gi + 1) * nk * dk], nq, nk, dk);
        }
        let wrap = |t: &Tensor, d: Vec<f64>, need: bool| {
            need.then(|| Tensor::new(t.shape().to_vec(), d).expect("grad shape"))
        };
        vec![wrap(q, gq, ctx.needs[0]), wrap(k, gk, ctx.needs[1]), wrap(v, gv, ctx.needs[2])]
    }
}

impl Tape {
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.apply(Attention { groups: 1 }, &[q, k, v])
    }

    /// Attention restricted to `groups` independent row blocks.
    pub fn grouped_attention(&mut self, q: Var, k: Var, v: Var, groups: usize) -> Result<Var> {
        self.apply(Attention { groups }, &[q, k, v])
    }
}
