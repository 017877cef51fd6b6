//! Rendering-equation shading: Lambert + GGX microfacet BRDF (metallic 0),
//! clamped SH visibility, and quadrature over the light probe texels.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use avatar_tensor::geometry::{add3, dot3, norm3, Vec3};
use avatar_tensor::{BackwardCtx, Forward, Op, OpError, Tape, Tensor, Var};

use crate::error::Result;
use crate::sh::{probe_directions, sh_basis_unit, EnvLightProbe, PROBE_TEXELS, SH_COEFFS};

/// Normal-incidence reflectance of a dielectric.
pub const DEFAULT_F0: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfParams {
    pub albedo: [f64; 3],
    /// Perceptual roughness γ; the GGX width is `α = γ²`.
    pub roughness: f64,
    pub f0: f64,
}

impl BrdfParams {
    pub fn new(albedo: [f64; 3], roughness: f64) -> Self {
        Self { albedo, roughness, f0: DEFAULT_F0 }
    }
}

/// Specular lobe value and its partials.
#[derive(Clone, Copy, Debug, Default)]
struct Spec {
    value: f64,
    d_nl: f64,
    d_nv: f64,
    d_nh: f64,
    d_vh: f64,
    d_a2: f64,
}

fn ggx(nl: f64, nv: f64, nh: f64, vh: f64, a2: f64, f0: f64) -> Spec {
    if f0 == 0.0 {
        return Spec::default();
    }
    let q = nh * nh * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * q * q);
    let dd_nh = -4.0 * a2 * nh * (a2 - 1.0) / (PI * q * q * q);
    let dd_a2 = (q - 2.0 * a2 * nh * nh) / (PI * q * q * q);

    let rv = (nv * nv * (1.0 - a2) + a2).sqrt();
    let rl = (nl * nl * (1.0 - a2) + a2).sqrt();
    let s = nl * rv + nv * rl;
    let v = 0.5 / s;
    let dv_ds = -0.5 / (s * s);
    let ds_nl = rv + nv * nl * (1.0 - a2) / rl;
    let ds_nv = rl + nl * nv * (1.0 - a2) / rv;
    let ds_a2 = nl * (1.0 - nv * nv) / (2.0 * rv) + nv * (1.0 - nl * nl) / (2.0 * rl);

    let f90 = (50.0 * f0).clamp(0.0, 1.0);
    let m = 1.0 - vh;
    let m4 = m * m * m * m;
    let f = f0 + (f90 - f0) * m4 * m;
    let df_vh = -5.0 * (f90 - f0) * m4;

    Spec {
        value: d * v * f,
        d_nl: d * f * dv_ds * ds_nl,
        d_nv: d * f * dv_ds * ds_nv,
        d_nh: dd_nh * v * f,
        d_vh: d * v * df_vh,
        d_a2: dd_a2 * v * f + d * f * dv_ds * ds_a2,
    }
}

/// `f(ω_i, ω_o)` per color channel; zero below either horizon.
pub fn brdf_eval(params: &BrdfParams, n: Vec3, wi: Vec3, wo: Vec3) -> [f64; 3] {
    let (nl, nv) = (dot3(n, wi), dot3(n, wo));
    if nl <= 0.0 || nv <= 0.0 {
        return [0.0; 3];
    }
    let hs = add3(wi, wo);
    let hn = norm3(hs);
    let h = [hs[0] / hn, hs[1] / hn, hs[2] / hn];
    let g = params.roughness;
    let spec = ggx(nl, nv, dot3(n, h), dot3(wo, h), g * g * g * g, params.f0).value;
    params.albedo.map(|a| a / PI + spec)
}

/// `clamp(Σ v_j Y_j(ω), 0, 1)` for a unit direction.
pub fn visibility(v: &[f64; SH_COEFFS], w: Vec3) -> f64 {
    let y = sh_basis_unit(w);
    v.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0)
}

/// Per-texel quadrature data shared by every shading call.
pub struct ProbeTable {
    pub dirs: Vec<Vec3>,
    pub solid_angle: Vec<f64>,
    pub basis: Vec<[f64; SH_COEFFS]>,
}

impl ProbeTable {
    pub fn shared() -> Arc<ProbeTable> {
        static TABLE: OnceLock<Arc<ProbeTable>> = OnceLock::new();
        TABLE
            .get_or_init(|| {
                let pd = probe_directions();
                Arc::new(ProbeTable {
                    dirs: pd.iter().map(|p| p.direction).collect(),
                    solid_angle: pd.iter().map(|p| p.solid_angle).collect(),
                    basis: pd.iter().map(|p| sh_basis_unit(p.direction)).collect(),
                })
            })
            .clone()
    }
}

/// One surface point to shade.
#[derive(Clone, Copy, Debug)]
pub struct ShadePoint {
    pub normal: Vec3,
    /// Unit direction from the point toward the camera.
    pub wo: Vec3,
    pub visibility: [f64; SH_COEFFS],
}

struct Texel<'a> {
    dir: Vec3,
    solid_angle: f64,
    basis: &'a [f64; SH_COEFFS],
}

/// Calls `f` for every texel above the horizon of `n`, with `n · ω_i`.
fn for_each_lit_texel<'a>(table: &'a ProbeTable, n: Vec3, mut f: impl FnMut(usize, Texel<'a>, f64)) {
    for i in 0..PROBE_TEXELS {
        let dir = table.dirs[i];
        let nl = dot3(n, dir);
        if nl <= 0.0 {
            continue;
        }
        f(i, Texel { dir, solid_angle: table.solid_angle[i], basis: &table.basis[i] }, nl);
    }
}

fn half_vector(l: Vec3, v: Vec3) -> (Vec3, f64) {
    let s = add3(l, v);
    let len = norm3(s);
    ([s[0] / len, s[1] / len, s[2] / len], len)
}

fn shade_one(
    table: &ProbeTable,
    radiance: &[f64],
    n: Vec3,
    wo: Vec3,
    albedo: &[f64],
    rough: f64,
    vis: &[f64],
    f0: f64,
) -> [f64; 3] {
    let nv = dot3(n, wo);
    let mut out = [0.0; 3];
    if nv <= 0.0 {
        return out;
    }
    let a2 = rough.powi(4);
    for_each_lit_texel(table, n, |i, tx, nl| {
        let v_raw: f64 = vis.iter().zip(tx.basis).map(|(a, b)| a * b).sum();
        let v = v_raw.clamp(0.0, 1.0);
        if v == 0.0 {
            return;
        }
        let (h, _) = half_vector(tx.dir, wo);
        let spec = ggx(nl, nv, dot3(n, h), dot3(wo, h), a2, f0).value;
        let w = v * nl * tx.solid_angle;
        for c in 0..3 {
            out[c] += radiance[i * 3 + c] * w * (albedo[c] / PI + spec);
        }
    });
    out
}

/// Outgoing radiance of a single point.
pub fn shade(point: &ShadePoint, params: &BrdfParams, probe: &EnvLightProbe) -> [f64; 3] {
    let table = ProbeTable::shared();
    let radiance: Vec<f64> = probe.radiance().iter().flatten().copied().collect();
    shade_one(
        &table,
        &radiance,
        point.normal,
        point.wo,
        &params.albedo,
        params.roughness,
        &point.visibility,
        params.f0,
    )
}

/// Differentiable shading of `N` points.
///
/// Inputs: unit normals `N×3`, unit view directions `N×3`, albedo `N×3`,
/// roughness `N×1`, visibility coefficients `N×16`, probe radiance `T×3`.
pub struct Shade {
    pub table: Arc<ProbeTable>,
    pub f0: f64,
}

impl Shade {
    pub fn new(f0: f64) -> Self {
        Self { table: ProbeTable::shared(), f0 }
    }
}

impl Op for Shade {
    fn name(&self) -> &'static str {
        "shade"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let n = inputs[0].rows();
        for (t, c, what) in [
            (inputs[0], 3, "normals"),
            (inputs[1], 3, "view directions"),
            (inputs[2], 3, "albedo"),
            (inputs[3], 1, "roughness"),
            (inputs[4], SH_COEFFS, "visibility"),
        ] {
            if t.rank() != 2 || t.rows() != n || t.cols() != c {
                return Err(OpError::Shape(format!("{what}: expected {n}×{c}, got {:?}", t.shape())));
            }
        }
        if inputs[5].shape() != [PROBE_TEXELS, 3] {
            return Err(OpError::Shape(format!("probe radiance must be {PROBE_TEXELS}×3")));
        }
        let rad = inputs[5].data();
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let nr = inputs[0].row(i);
            let wr = inputs[1].row(i);
            let o = shade_one(
                &self.table,
                rad,
                [nr[0], nr[1], nr[2]],
                [wr[0], wr[1], wr[2]],
                inputs[2].row(i),
                inputs[3].row(i)[0],
                inputs[4].row(i),
                self.f0,
            );
            out[i * 3..i * 3 + 3].copy_from_slice(&o);
        }
        Ok(Forward::new(Tensor::new(vec![n, 3], out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let ins = ctx.inputs;
        let n_pts = ins[0].rows();
        let rad = ins[5].data();
        let mut gn = vec![0.0; n_pts * 3];
        let mut gwo = vec![0.0; n_pts * 3];
        let mut galb = vec![0.0; n_pts * 3];
        let mut grough = vec![0.0; n_pts];
        let mut gvis = vec![0.0; n_pts * SH_COEFFS];
        let mut grad_rad = vec![0.0; PROBE_TEXELS * 3];
        for p in 0..n_pts {
            let g = ctx.grad.row(p);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let nr = ins[0].row(p);
            let n = [nr[0], nr[1], nr[2]];
            let wr = ins[1].row(p);
            let wo = [wr[0], wr[1], wr[2]];
            let nv = dot3(n, wo);
            if nv <= 0.0 {
                continue;
            }
            let albedo = ins[2].row(p);
            let rough = ins[3].row(p)[0];
            let a2 = rough.powi(4);
            let vis = ins[4].row(p);
            let mut d_n = [0.0; 3];
            let mut d_wo = [0.0; 3];
            let mut d_a2 = 0.0;
            for_each_lit_texel(&self.table, n, |i, tx, nl| {
                let v_raw: f64 = vis.iter().zip(tx.basis).map(|(a, b)| a * b).sum();
                let v = v_raw.clamp(0.0, 1.0);
                let passes = (0.0..=1.0).contains(&v_raw);
                if v == 0.0 && !passes {
                    return;
                }
                let (h, hlen) = half_vector(tx.dir, wo);
                let nh = dot3(n, h);
                let vh = dot3(wo, h);
                let s = ggx(nl, nv, nh, vh, a2, self.f0);
                let l = &rad[i * 3..i * 3 + 3];
                let w = v * nl * tx.solid_angle;
                let mut e = 0.0;
                let mut gl = 0.0;
                for c in 0..3 {
                    let fd = albedo[c] / std::f64::consts::PI + s.value;
                    e += g[c] * l[c] * fd;
                    gl += g[c] * l[c];
                    galb[p * 3 + c] += g[c] * l[c] * w / std::f64::consts::PI;
                    grad_rad[i * 3 + c] += g[c] * w * fd;
                }
                if passes {
                    let dv = e * nl * tx.solid_angle;
                    for (gj, b) in gvis[p * SH_COEFFS..(p + 1) * SH_COEFFS].iter_mut().zip(tx.basis) {
                        *gj += dv * b;
                    }
                }
                let ds = gl * w;
                let d_nl = e * v * tx.solid_angle + ds * s.d_nl;
                let d_nv = ds * s.d_nv;
                let d_nh = ds * s.d_nh;
                let d_vh = ds * s.d_vh;
                d_a2 += ds * s.d_a2;
                let dh = [n[0] * d_nh + wo[0] * d_vh, n[1] * d_nh + wo[1] * d_vh, n[2] * d_nh + wo[2] * d_vh];
                let hdh = dot3(h, dh);
                for k in 0..3 {
                    d_n[k] += tx.dir[k] * d_nl + wo[k] * d_nv + h[k] * d_nh;
                    d_wo[k] += n[k] * d_nv + h[k] * d_vh + (dh[k] - h[k] * hdh) / hlen;
                }
            });
            gn[p * 3..p * 3 + 3].copy_from_slice(&d_n);
            gwo[p * 3..p * 3 + 3].copy_from_slice(&d_wo);
            grough[p] = d_a2 * 4.0 * rough.powi(3);
        }
        let t = |k: usize, d: Vec<f64>| Some(Tensor::new(ins[k].shape().to_vec(), d).unwrap());
        vec![t(0, gn), t(1, gwo), t(2, galb), t(3, grough), t(4, gvis), t(5, grad_rad)]
    }
}

pub trait ShadeTape {
    #[allow(clippy::too_many_arguments)]
    fn shade(&mut self, f0: f64, normals: Var, wo: Var, albedo: Var, rough: Var, vis: Var, radiance: Var) -> Result<Var>;
}

impl ShadeTape for Tape {
    fn shade(&mut self, f0: f64, normals: Var, wo: Var, albedo: Var, rough: Var, vis: Var, radiance: Var) -> Result<Var> {
        Ok(self.apply(Shade::new(f0), &[normals, wo, albedo, rough, vis, radiance])?)
    }
}
