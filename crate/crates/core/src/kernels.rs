//! Per-Gaussian geometry kernels as tape ops with hand-written VJPs.
//!
//! Blended transforms are stored as `N × 12` rows, each a row-major 3×4
//! matrix `[A_R | A_T]`.

use avatar_tensor::geometry::{quat_matrix_vjp, unit_quat_matrix, Mat3};
use avatar_tensor::{BackwardCtx, Forward, Op, OpError, Tape, Tensor, Var};

use crate::error::Result;
use crate::sh::{sh_basis_jacobian, sh_basis_unit, SH_COEFFS};

fn rows_of(t: &Tensor, cols: usize, what: &str) -> Result<usize, OpError> {
    if t.rank() != 2 || t.cols() != cols {
        return Err(OpError::Shape(format!("{what}: expected N×{cols}, got {:?}", t.shape())));
    }
    Ok(t.rows())
}

fn same_rows(a: usize, b: usize, what: &str) -> Result<(), OpError> {
    if a != b {
        return Err(OpError::Shape(format!("{what}: row counts {a} and {b} differ")));
    }
    Ok(())
}

#[inline]
fn rot_of(a: &[f64]) -> Mat3 {
    [[a[0], a[1], a[2]], [a[4], a[5], a[6]], [a[8], a[9], a[10]]]
}

fn grad_tensor(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
}

/// `Σ = R(q) diag(s)² R(q)ᵀ` from raw quaternions `N×4` and scales `N×3`,
/// flattened to `N×9`. The quaternion is normalized inside.
pub struct Covariance;

impl Op for Covariance {
    fn name(&self) -> &'static str {
        "covariance"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (q, s) = (inputs[0], inputs[1]);
        let n = rows_of(q, 4, "quaternions")?;
        same_rows(n, rows_of(s, 3, "scales")?, "covariance")?;
        let mut out = vec![0.0; n * 9];
        for i in 0..n {
            let qr = q.row(i);
            let norm = qr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(OpError::Domain(format!("zero quaternion at row {i}")));
            }
            let r = unit_quat_matrix([qr[0] / norm, qr[1] / norm, qr[2] / norm, qr[3] / norm]);
            let s2 = s.row(i).iter().map(|v| v * v).collect::<Vec<_>>();
            let o = &mut out[i * 9..i * 9 + 9];
            for a in 0..3 {
                for b in 0..3 {
                    o[a * 3 + b] = (0..3).map(|k| r[a][k] * s2[k] * r[b][k]).sum();
                }
            }
        }
        Ok(Forward::new(Tensor::new(vec![n, 9], out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (q, s) = (ctx.inputs[0], ctx.inputs[1]);
        let n = q.rows();
        let mut gq = vec![0.0; n * 4];
        let mut gs = vec![0.0; n * 3];
        for i in 0..n {
            let qr = q.row(i);
            let raw = [qr[0], qr[1], qr[2], qr[3]];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = unit_quat_matrix(raw.map(|v| v / norm));
            let sr = s.row(i);
            let g = ctx.grad.row(i);
            let mut gr = [[0.0; 3]; 3];
            for a in 0..3 {
                for k in 0..3 {
                    let s2 = sr[k] * sr[k];
                    gr[a][k] = (0..3).map(|b| (g[a * 3 + b] + g[b * 3 + a]) * r[b][k]).sum::<f64>() * s2;
                }
            }
            for k in 0..3 {
                let mut acc = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        acc += g[a * 3 + b] * r[a][k] * r[b][k];
                    }
                }
                gs[i * 3 + k] = acc * 2.0 * sr[k];
            }
            gq[i * 4..i * 4 + 4].copy_from_slice(&quat_matrix_vjp(raw, &gr));
        }
        vec![Some(grad_tensor(q, gq)), Some(grad_tensor(s, gs))]
    }
}

/// `x′ = A_R x + A_T` per row.
pub struct LbsPoints;

impl Op for LbsPoints {
    fn name(&self) -> &'static str {
        "lbs_points"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, x) = (inputs[0], inputs[1]);
        let n = rows_of(a, 12, "blended transforms")?;
        same_rows(n, rows_of(x, 3, "points")?, "lbs_points")?;
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let (ar, xr) = (a.row(i), x.row(i));
            for r in 0..3 {
                out[i * 3 + r] =
                    ar[r * 4] * xr[0] + ar[r * 4 + 1] * xr[1] + ar[r * 4 + 2] * xr[2] + ar[r * 4 + 3];
            }
        }
        Ok(Forward::new(Tensor::new(vec![n, 3], out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, x) = (ctx.inputs[0], ctx.inputs[1]);
        let n = a.rows();
        let mut ga = vec![0.0; n * 12];
        let mut gx = vec![0.0; n * 3];
        for i in 0..n {
            let (ar, xr, g) = (a.row(i), x.row(i), ctx.grad.row(i));
            for r in 0..3 {
                for c in 0..3 {
                    ga[i * 12 + r * 4 + c] = g[r] * xr[c];
                    gx[i * 3 + c] += g[r] * ar[r * 4 + c];
                }
                ga[i * 12 + r * 4 + 3] = g[r];
            }
        }
        vec![Some(grad_tensor(a, ga)), Some(grad_tensor(x, gx))]
    }
}

/// `A_R v`, or `A_Rᵀ v` when `transpose` is set.
pub struct LbsRotate {
    pub transpose: bool,
}

impl Op for LbsRotate {
    fn name(&self) -> &'static str {
        "lbs_rotate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, v) = (inputs[0], inputs[1]);
        let n = rows_of(a, 12, "blended transforms")?;
        same_rows(n, rows_of(v, 3, "vectors")?, "lbs_rotate")?;
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let r = rot_of(a.row(i));
            let vr = v.row(i);
            for p in 0..3 {
                out[i * 3 + p] = (0..3)
                    .map(|q| if self.transpose { r[q][p] * vr[q] } else { r[p][q] * vr[q] })
                    .sum();
            }
        }
        Ok(Forward::new(Tensor::new(vec![n, 3], out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, v) = (ctx.inputs[0], ctx.inputs[1]);
        let n = a.rows();
        let mut ga = vec![0.0; n * 12];
        let mut gv = vec![0.0; n * 3];
        for i in 0..n {
            let r = rot_of(a.row(i));
            let (vr, g) = (v.row(i), ctx.grad.row(i));
            for p in 0..3 {
                for q in 0..3 {
                    if self.transpose {
                        // y_q = Σ_p R_pq v_p
                        ga[i * 12 + p * 4 + q] = vr[p] * g[q];
                        gv[i * 3 + p] += r[p][q] * g[q];
                    } else {
                        ga[i * 12 + p * 4 + q] = g[p] * vr[q];
                        gv[i * 3 + q] += r[p][q] * g[p];
                    }
                }
            }
        }
        vec![Some(grad_tensor(a, ga)), Some(grad_tensor(v, gv))]
    }
}

/// `A_R Σ A_Rᵀ` for row-flattened 3×3 `Σ`.
pub struct Congruence;

impl Op for Congruence {
    fn name(&self) -> &'static str {
        "congruence"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (a, s) = (inputs[0], inputs[1]);
        let n = rows_of(a, 12, "blended transforms")?;
        same_rows(n, rows_of(s, 9, "covariances")?, "congruence")?;
        let mut out = vec![0.0; n * 9];
        for i in 0..n {
            let r = rot_of(a.row(i));
            let sr = s.row(i);
            let mut rs = [[0.0; 3]; 3];
            for p in 0..3 {
                for q in 0..3 {
                    rs[p][q] = (0..3).map(|k| r[p][k] * sr[k * 3 + q]).sum();
                }
            }
            for p in 0..3 {
                for q in 0..3 {
                    out[i * 9 + p * 3 + q] = (0..3).map(|k| rs[p][k] * r[q][k]).sum();
                }
            }
        }
        Ok(Forward::new(Tensor::new(vec![n, 9], out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, s) = (ctx.inputs[0], ctx.inputs[1]);
        let n = a.rows();
        let mut ga = vec![0.0; n * 12];
        let mut gs = vec![0.0; n * 9];
        for i in 0..n {
            let r = rot_of(a.row(i));
            let sr = s.row(i);
            let g = ctx.grad.row(i);
            let sm = |p: usize, q: usize| sr[p * 3 + q];
            let gm = |p: usize, q: usize| g[p * 3 + q];
            // dΣ = Rᵀ G R
            for p in 0..3 {
                for q in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            acc += r[k][p] * gm(k, l) * r[l][q];
                        }
                    }
                    gs[i * 9 + p * 3 + q] = acc;
                }
            }
            // dR = G R Σᵀ + Gᵀ R Σ
            for p in 0..3 {
                for q in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        for l in 0..3 {
                            acc += gm(p, k) * r[k][l] * sm(q, l) + gm(k, p) * r[k][l] * sm(l, q);
                        }
                    }
                    ga[i * 12 + p * 4 + q] = acc;
                }
            }
        }
        vec![Some(grad_tensor(a, ga)), Some(grad_tensor(s, gs))]
    }
}

/// Evaluates per-row SH coefficients `N × 16C` (layout `[j·C + c]`) at unit
/// directions `N × 3`, giving `N × C`.
pub struct ShEval {
    pub channels: usize,
}

impl Op for ShEval {
    fn name(&self) -> &'static str {
        "sh_eval"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let (d, c) = (inputs[0], inputs[1]);
        let ch = self.channels;
        let n = rows_of(d, 3, "directions")?;
        same_rows(n, rows_of(c, SH_COEFFS * ch, "coefficients")?, "sh_eval")?;
        let mut out = vec![0.0; n * ch];
        for i in 0..n {
            let dr = d.row(i);
            let y = sh_basis_unit([dr[0], dr[1], dr[2]]);
            let cr = c.row(i);
            for k in 0..ch {
                out[i * ch + k] = (0..SH_COEFFS).map(|j| y[j] * cr[j * ch + k]).sum();
            }
        }
        Ok(Forward::new(Tensor::new(vec![n, ch], out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (d, c) = (ctx.inputs[0], ctx.inputs[1]);
        let ch = self.channels;
        let n = d.rows();
        let mut gd = vec![0.0; n * 3];
        let mut gc = vec![0.0; c.len()];
        for i in 0..n {
            let dr = [d.row(i)[0], d.row(i)[1], d.row(i)[2]];
            let y = sh_basis_unit(dr);
            let jac = sh_basis_jacobian(dr);
            let (cr, g) = (c.row(i), ctx.grad.row(i));
            for j in 0..SH_COEFFS {
                let mut wj = 0.0;
                for k in 0..ch {
                    gc[i * SH_COEFFS * ch + j * ch + k] = y[j] * g[k];
                    wj += g[k] * cr[j * ch + k];
                }
                for a in 0..3 {
                    gd[i * 3 + a] += wj * jac[j][a];
                }
            }
        }
        vec![Some(grad_tensor(d, gd)), Some(grad_tensor(c, gc))]
    }
}

/// Tape helpers for the kernels above.
pub trait KernelTape {
    fn covariance(&mut self, q: Var, s: Var) -> Result<Var>;
    fn lbs_points(&mut self, a: Var, x: Var) -> Result<Var>;
    fn lbs_rotate(&mut self, a: Var, v: Var, transpose: bool) -> Result<Var>;
    fn congruence(&mut self, a: Var, sigma: Var) -> Result<Var>;
    fn sh_eval(&mut self, dirs: Var, coeffs: Var, channels: usize) -> Result<Var>;
}

impl KernelTape for Tape {
    fn covariance(&mut self, q: Var, s: Var) -> Result<Var> {
        Ok(self.apply(Covariance, &[q, s])?)
    }

    fn lbs_points(&mut self, a: Var, x: Var) -> Result<Var> {
        Ok(self.apply(LbsPoints, &[a, x])?)
    }

    fn lbs_rotate(&mut self, a: Var, v: Var, transpose: bool) -> Result<Var> {
        Ok(self.apply(LbsRotate { transpose }, &[a, v])?)
    }

    fn congruence(&mut self, a: Var, sigma: Var) -> Result<Var> {
        Ok(self.apply(Congruence, &[a, sigma])?)
    }

    fn sh_eval(&mut self, dirs: Var, coeffs: Var, channels: usize) -> Result<Var> {
        Ok(self.apply(ShEval { channels }, &[dirs, coeffs])?)
    }
}

/// Plain-value covariance for a unit quaternion and scales.
pub fn covariance_matrix(q: [f64; 4], s: [f64; 3]) -> Mat3 {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = unit_quat_matrix(q.map(|v| v / norm));
    let mut out = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            out[a][b] = (0..3).map(|k| r[a][k] * s[k] * s[k] * r[b][k]).sum();
        }
    }
    out
}

