//! Pinhole cameras, Gaussian projection and alpha compositing.
//!
//! Pixel centers sit at integer coordinates. Splats are sorted globally by
//! camera depth (ties by index) and composited front to back; any
//! contribution with `α < 1/255` is skipped.

use std::sync::Arc;

use avatar_tensor::geometry::{cross3, dot3, mat_vec, normalize3, sub3, transpose, Mat3, Vec3};
use avatar_tensor::{BackwardCtx, Forward, Op, OpError, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::Image;

pub const NEAR: f64 = 0.01;
pub const COV_FLOOR: f64 = 0.3;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
const TILE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation. Camera axes: x right, y down, z forward.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(rotation: Mat3, translation: Vec3, intrinsics: [f64; 4], width: usize, height: usize) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::invalid("camera needs positive focal lengths and a nonempty image"));
        }
        let rtr = avatar_tensor::geometry::mat_mul(&transpose(&rotation), &rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                if (v - e).abs() > 1e-9 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(Self { rotation, translation, fx, fy, cx, cy, width, height })
    }

    /// Camera at `eye` looking at `target` with `up` roughly upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let f = normalize3(sub3(target, eye)).ok_or_else(|| Error::invalid("eye equals target"))?;
        let r = normalize3(cross3(f, up)).ok_or_else(|| Error::invalid("up is parallel to the view axis"))?;
        let d = cross3(f, r);
        let rotation = [r, d, f];
        let t = mat_vec(&rotation, eye);
        let intr = [focal, focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        Self::new(rotation, [-t[0], -t[1], -t[2]], intr, width, height)
    }

    pub fn center(&self) -> Vec3 {
        let rt = transpose(&self.rotation);
        let c = mat_vec(&rt, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn to_camera(&self, x: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, x);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Pixel coordinates and depth, or `None` in front of the near plane.
    pub fn project_point(&self, x: Vec3) -> Option<([f64; 2], f64)> {
        let t = self.to_camera(x);
        (t[2] > NEAR).then(|| ([self.fx * t[0] / t[2] + self.cx, self.fy * t[1] / t[2] + self.cy], t[2]))
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Viewing direction through the image center.
    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }
}

/// Screen-space Gaussian ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Tie-break key for equal depths.
    pub index: usize,
    pub mean: [f64; 2],
    /// `[Σxx, Σxy, Σyy]`, floor already applied.
    pub cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub payload: Vec<f64>,
}

/// Perspective Jacobian rows `∂(u,v)/∂t` at camera point `t`.
fn perspective_jacobian(cam: &Camera, t: Vec3) -> [[f64; 3]; 2] {
    let iz = 1.0 / t[2];
    [
        [cam.fx * iz, 0.0, -cam.fx * t[0] * iz * iz],
        [0.0, cam.fy * iz, -cam.fy * t[1] * iz * iz],
    ]
}

struct Projection {
    t: Vec3,
    jac: [[f64; 3]; 2],
    /// Covariance in camera axes, `W Σ Wᵀ`.
    m: Mat3,
    mean: [f64; 2],
    cov: [f64; 3],
}

fn project_full(cam: &Camera, x: Vec3, sigma: &[f64]) -> Option<Projection> {
    let t = cam.to_camera(x);
    if t[2] <= NEAR {
        return None;
    }
    let w = &cam.rotation;
    let mut ws = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ws[i][j] = (0..3).map(|k| w[i][k] * sigma[k * 3 + j]).sum();
        }
    }
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| ws[i][k] * w[j][k]).sum();
        }
    }
    let jac = perspective_jacobian(cam, t);
    let mut jm = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            jm[i][j] = (0..3).map(|k| jac[i][k] * m[k][j]).sum();
        }
    }
    let c = |i: usize, j: usize| -> f64 { (0..3).map(|k| jm[i][k] * jac[j][k]).sum() };
    let cov = [c(0, 0) + COV_FLOOR, 0.5 * (c(0, 1) + c(1, 0)), c(1, 1) + COV_FLOOR];
    let mean = [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy];
    Some(Projection { t, jac, m, mean, cov })
}

/// Projects one 3D Gaussian (`sigma` row-major 3×3); `None` when culled.
pub fn project(cam: &Camera, mean: Vec3, sigma: &Mat3) -> Option<([f64; 2], [f64; 3], f64)> {
    let flat: Vec<f64> = sigma.iter().flatten().copied().collect();
    project_full(cam, mean, &flat).map(|p| (p.mean, p.cov, p.t[2]))
}

fn conic_of(cov: [f64; 3]) -> Option<[f64; 3]> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    (det > 0.0 && det.is_finite()).then(|| [cov[2] / det, -cov[1] / det, cov[0] / det])
}

/// Radius beyond which a splat's α is below the cutoff.
fn cutoff_radius(cov: [f64; 3], opacity: f64) -> Option<f64> {
    let level = (255.0 * opacity).ln();
    if !(level > 0.0) {
        return None;
    }
    let mid = 0.5 * (cov[0] + cov[2]);
    let disc = (0.25 * (cov[0] - cov[2]).powi(2) + cov[1] * cov[1]).sqrt();
    let lambda_max = mid + disc;
    Some((2.0 * level * lambda_max).sqrt() * (1.0 + 1e-9) + 1e-9)
}

/// Structure-of-arrays view of depth-sorted splats.
struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    /// Splat ids in compositing order.
    order: Vec<usize>,
    mean: Vec<[f64; 2]>,
    conic: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    payload: Vec<f64>,
    /// Per tile, positions into `order`; `None` means brute force.
    tiles: Option<Vec<Vec<u32>>>,
}

impl Frame {
    fn tiles_x(&self) -> usize {
        self.width.div_ceil(TILE)
    }

    fn bin(&mut self, cov: &[[f64; 3]]) {
        let (tx, ty) = (self.tiles_x(), self.height.div_ceil(TILE));
        let mut tiles = vec![Vec::new(); tx * ty];
        for (pos, &k) in self.order.iter().enumerate() {
            let Some(r) = cutoff_radius(cov[k], self.opacity[k]) else { continue };
            let [u, v] = self.mean[k];
            let x0 = (u - r).ceil().max(0.0);
            let x1 = (u + r).floor().min(self.width as f64 - 1.0);
            let y0 = (v - r).ceil().max(0.0);
            let y1 = (v + r).floor().min(self.height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
            for tyi in y0 / TILE..=y1 / TILE {
                for txi in x0 / TILE..=x1 / TILE {
                    tiles[tyi * tx + txi].push(pos as u32);
                }
            }
        }
        self.tiles = Some(tiles);
    }

    fn candidates(&self, px: usize, py: usize) -> Candidates<'_> {
        match &self.tiles {
            Some(t) => Candidates::Tile(t[(py / TILE) * self.tiles_x() + px / TILE].iter()),
            None => Candidates::All(0..self.order.len()),
        }
    }

    /// Visits contributing splats of pixel `(px, py)` front to back with
    /// `(id, α, gaussian, dx, dy)`.
    fn for_each_contribution(&self, px: usize, py: usize, mut f: impl FnMut(usize, f64, f64, f64, f64)) {
        for pos in self.candidates(px, py) {
            let k = self.order[pos];
            let [u, v] = self.mean[k];
            let (dx, dy) = (px as f64 - u, py as f64 - v);
            let [a, b, c] = self.conic[k];
            let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
            let g = power.exp();
            let alpha = self.opacity[k] * g;
            if alpha < ALPHA_MIN {
                continue;
            }
            f(k, alpha, g, dx, dy);
        }
    }

    /// `(H·W) × (C+1)` with coverage in the last column.
    fn composite(&self) -> Vec<f64> {
        let c = self.channels;
        let stride = c + 1;
        let mut out = vec![0.0; self.width * self.height * stride];
        for py in 0..self.height {
            for px in 0..self.width {
                let o = &mut out[(py * self.width + px) * stride..][..stride];
                let mut t = 1.0;
                self.for_each_contribution(px, py, |k, alpha, _, _, _| {
                    let w = t * alpha;
                    let p = &self.payload[k * c..(k + 1) * c];
                    for ch in 0..c {
                        o[ch] += w * p[ch];
                    }
                    o[c] += w;
                    t *= 1.0 - alpha;
                });
            }
        }
        out
    }
}

enum Candidates<'a> {
    Tile(std::slice::Iter<'a, u32>),
    All(std::ops::Range<usize>),
}

impl Iterator for Candidates<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match self {
            Candidates::Tile(it) => it.next().map(|&p| p as usize),
            Candidates::All(r) => r.next(),
        }
    }
}

fn sort_order(depth: &[f64], index: &[usize], live: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = live.collect();
    order.sort_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(index[a].cmp(&index[b])));
    order
}

/// Composited splat payloads plus coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub color: Image,
    pub alpha: Image,
}

impl RenderedImage {
    fn from_raw(width: usize, height: usize, channels: usize, raw: &[f64]) -> Self {
        let stride = channels + 1;
        let mut color = Vec::with_capacity(width * height * channels);
        let mut alpha = Vec::with_capacity(width * height);
        for px in raw.chunks_exact(stride) {
            color.extend_from_slice(&px[..channels]);
            alpha.push(px[channels]);
        }
        Self {
            color: Image::new(width, height, channels, color).unwrap(),
            alpha: Image::new(width, height, 1, alpha).unwrap(),
        }
    }

    /// Splits a raster tape output `(H·W) × (C+1)`.
    pub fn from_tensor(cam: &Camera, t: &Tensor) -> Self {
        Self::from_raw(cam.width, cam.height, t.cols() - 1, t.data())
    }
}

fn frame_from_splats(splats: &[Splat2D], cam: &Camera) -> Result<(Frame, Vec<[f64; 3]>)> {
    let channels = splats.first().map_or(0, |s| s.payload.len());
    let mut conic = Vec::with_capacity(splats.len());
    for s in splats {
        if s.payload.len() != channels {
            return Err(Error::invalid("splats carry payloads of different widths"));
        }
        conic.push(conic_of(s.cov).ok_or_else(|| Error::invalid(format!("splat {} has a singular covariance", s.index)))?);
    }
    let depth: Vec<f64> = splats.iter().map(|s| s.depth).collect();
    let index: Vec<usize> = splats.iter().map(|s| s.index).collect();
    let frame = Frame {
        width: cam.width,
        height: cam.height,
        channels,
        order: sort_order(&depth, &index, 0..splats.len()),
        mean: splats.iter().map(|s| s.mean).collect(),
        conic,
        opacity: splats.iter().map(|s| s.opacity).collect(),
        payload: splats.iter().flat_map(|s| s.payload.iter().copied()).collect(),
        tiles: None,
    };
    Ok((frame, splats.iter().map(|s| s.cov).collect()))
}

/// Tile-binned compositing.
pub fn rasterize(splats: &[Splat2D], cam: &Camera) -> Result<RenderedImage> {
    let (mut frame, cov) = frame_from_splats(splats, cam)?;
    frame.bin(&cov);
    Ok(RenderedImage::from_raw(cam.width, cam.height, frame.channels, &frame.composite()))
}

/// Reference compositing that visits every splat at every pixel.
pub fn rasterize_bruteforce(splats: &[Splat2D], cam: &Camera) -> Result<RenderedImage> {
    let (frame, _) = frame_from_splats(splats, cam)?;
    Ok(RenderedImage::from_raw(cam.width, cam.height, frame.channels, &frame.composite()))
}

/// Projects 3D Gaussians into splats, dropping culled ones.
pub fn project_all(cam: &Camera, means: &Tensor, covs: &Tensor, opacity: &Tensor, payload: &Tensor) -> Vec<Splat2D> {
    (0..means.rows())
        .filter_map(|i| {
            let m = means.row(i);
            let p = project_full(cam, [m[0], m[1], m[2]], covs.row(i))?;
            Some(Splat2D {
                index: i,
                mean: p.mean,
                cov: p.cov,
                depth: p.t[2],
                opacity: opacity.row(i)[0],
                payload: payload.row(i).to_vec(),
            })
        })
        .collect()
}

/// Differentiable projection + compositing.
///
/// Inputs: world means `N×3`, world covariances `N×9`, opacities `N×1`,
/// payloads `N×C`. Output `(H·W) × (C+1)`, the last column being coverage.
pub struct Rasterize {
    pub camera: Arc<Camera>,
}

struct RasterSaved {
    proj: Vec<Option<Projection>>,
    frame: Frame,
}

impl Rasterize {
    fn prepare(&self, inputs: &[&Tensor]) -> Result<RasterSaved, OpError> {
        let (means, covs, opac, payload) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let n = means.rows();
        let check = |t: &Tensor, c: usize, what: &str| {
            if t.rank() != 2 || t.rows() != n || (c > 0 && t.cols() != c) {
                Err(OpError::Shape(format!("{what}: expected {n}×{c}, got {:?}", t.shape())))
            } else {
                Ok(())
            }
        };
        check(means, 3, "means")?;
        check(covs, 9, "covariances")?;
        check(opac, 1, "opacities")?;
        check(payload, 0, "payloads")?;
        let cam = &*self.camera;
        let mut proj = Vec::with_capacity(n);
        let mut conic = vec![[0.0; 3]; n];
        let mut mean = vec![[0.0; 2]; n];
        let mut depth = vec![f64::INFINITY; n];
        let mut cov2 = vec![[0.0; 3]; n];
        for i in 0..n {
            let m = means.row(i);
            let p = project_full(cam, [m[0], m[1], m[2]], covs.row(i));
            if let Some(p) = &p {
                conic[i] = conic_of(p.cov)
                    .ok_or_else(|| OpError::Domain(format!("singular screen covariance for Gaussian {i}")))?;
                mean[i] = p.mean;
                depth[i] = p.t[2];
                cov2[i] = p.cov;
            }
            proj.push(p);
        }
        let index: Vec<usize> = (0..n).collect();
        let order = sort_order(&depth, &index, (0..n).filter(|&i| proj[i].is_some()));
        let mut frame = Frame {
            width: cam.width,
            height: cam.height,
            channels: payload.cols(),
            order,
            mean,
            conic,
            opacity: opac.data().to_vec(),
            payload: payload.data().to_vec(),
            tiles: None,
        };
        frame.bin(&cov2);
        Ok(RasterSaved { proj, frame })
    }
}

impl Op for Rasterize {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let saved = self.prepare(inputs)?;
        let out = saved.frame.composite();
        let cam = &*self.camera;
        let value = Tensor::new(vec![cam.pixels(), saved.frame.channels + 1], out).unwrap();
        Ok(Forward::with_saved(value, saved))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let saved: &RasterSaved = ctx.saved();
        let frame = &saved.frame;
        let cam = &*self.camera;
        let n = ctx.inputs[0].rows();
        let c = frame.channels;
        let stride = c + 1;
        let mut g_payload = vec![0.0; n * c];
        let mut g_opac = vec![0.0; n];
        let mut g_mean2 = vec![[0.0f64; 2]; n];
        let mut g_conic = vec![[0.0f64; 3]; n];
        let mut contrib: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
        let mut back = vec![0.0; stride];
        for py in 0..cam.height {
            for px in 0..cam.width {
                let g = &ctx.grad.data()[(py * cam.width + px) * stride..][..stride];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                contrib.clear();
                let mut t = 1.0;
                frame.for_each_contribution(px, py, |k, alpha, gauss, dx, dy| {
                    contrib.push((k, alpha, gauss, dx, dy, t));
                    t *= 1.0 - alpha;
                });
                back.iter_mut().for_each(|b| *b = 0.0);
                for &(k, alpha, gauss, dx, dy, t) in contrib.iter().rev() {
                    let p = &frame.payload[k * c..(k + 1) * c];
                    let w = t * alpha;
                    let mut d_alpha = 0.0;
                    for ch in 0..c {
                        g_payload[k * c + ch] += w * g[ch];
                        d_alpha += g[ch] * (p[ch] - back[ch]);
                        back[ch] = p[ch] * alpha + (1.0 - alpha) * back[ch];
                    }
                    d_alpha += g[c] * (1.0 - back[c]);
                    back[c] = alpha + (1.0 - alpha) * back[c];
                    d_alpha *= t;
                    g_opac[k] += d_alpha * gauss;
                    let d_power = d_alpha * alpha;
                    let [a, b, cc] = frame.conic[k];
                    g_mean2[k][0] += d_power * (a * dx + b * dy);
                    g_mean2[k][1] += d_power * (b * dx + cc * dy);
                    g_conic[k][0] += -0.5 * d_power * dx * dx;
                    g_conic[k][1] += -d_power * dx * dy;
                    g_conic[k][2] += -0.5 * d_power * dy * dy;
                }
            }
        }

        let mut g_means = vec![0.0; n * 3];
        let mut g_covs = vec![0.0; n * 9];
        let w = &cam.rotation;
        for i in 0..n {
            let Some(p) = &saved.proj[i] else { continue };
            let [a, b, cc] = frame.conic[i];
            let kmat = [[a, b], [b, cc]];
            let gk = [[g_conic[i][0], 0.5 * g_conic[i][1]], [0.5 * g_conic[i][1], g_conic[i][2]]];
            // dL/dΣ2 = −K Gk K
            let mut gs = [[0.0; 2]; 2];
            for r in 0..2 {
                for s in 0..2 {
                    let mut acc = 0.0;
                    for u in 0..2 {
                        for v in 0..2 {
                            acc += kmat[r][u] * gk[u][v] * kmat[v][s];
                        }
                    }
                    gs[r][s] = -acc;
                }
            }
            let jac = p.jac;
            // dL/dM = Jᵀ Gs J
            let mut gm = [[0.0; 3]; 3];
            for r in 0..3 {
                for s in 0..3 {
                    let mut acc = 0.0;
                    for u in 0..2 {
                        for v in 0..2 {
                            acc += jac[u][r] * gs[u][v] * jac[v][s];
                        }
                    }
                    gm[r][s] = acc;
                }
            }
            // dL/dJ = Gs J (M + Mᵀ)
            let mut gj = [[0.0; 3]; 2];
            for r in 0..2 {
                for s in 0..3 {
                    let mut acc = 0.0;
                    for u in 0..2 {
                        for v in 0..3 {
                            acc += gs[r][u] * jac[u][v] * (p.m[v][s] + p.m[s][v]);
                        }
                    }
                    gj[r][s] = acc;
                }
            }
            // dL/dΣ = Wᵀ Gm W
            for r in 0..3 {
                for s in 0..3 {
                    let mut acc = 0.0;
                    for u in 0..3 {
                        for v in 0..3 {
                            acc += w[u][r] * gm[u][v] * w[v][s];
                        }
                    }
                    g_covs[i * 9 + r * 3 + s] = acc;
                }
            }
            let [x, y, z] = p.t;
            let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
            let (fx, fy) = (cam.fx, cam.fy);
            let [gu, gv] = g_mean2[i];
            let mut gt = [gu * fx * iz, gv * fy * iz, -gu * fx * x * iz2 - gv * fy * y * iz2];
            gt[0] += gj[0][2] * (-fx * iz2);
            gt[1] += gj[1][2] * (-fy * iz2);
            gt[2] += gj[0][0] * (-fx * iz2)
                + gj[0][2] * (2.0 * fx * x * iz3)
                + gj[1][1] * (-fy * iz2)
                + gj[1][2] * (2.0 * fy * y * iz3);
            for r in 0..3 {
                g_means[i * 3 + r] = (0..3).map(|u| w[u][r] * gt[u]).sum();
            }
        }
        let t = |like: &Tensor, d: Vec<f64>| Some(Tensor::new(like.shape().to_vec(), d).unwrap());
        vec![
            t(ctx.inputs[0], g_means),
            t(ctx.inputs[1], g_covs),
            t(ctx.inputs[2], g_opac),
            t(ctx.inputs[3], g_payload),
        ]
    }
}

pub trait RasterTape {
    fn rasterize(&mut self, cam: &Arc<Camera>, means: Var, covs: Var, opacity: Var, payload: Var) -> Result<Var>;
}

impl RasterTape for Tape {
    fn rasterize(&mut self, cam: &Arc<Camera>, means: Var, covs: Var, opacity: Var, payload: Var) -> Result<Var> {
        Ok(self.apply(Rasterize { camera: cam.clone() }, &[means, covs, opacity, payload])?)
    }
}

/// Camera-facing test used by projection helpers: `n · (eye − x) > 0`.
pub fn faces(cam: &Camera, x: Vec3, n: Vec3) -> bool {
    dot3(n, sub3(cam.center(), x)) > 0.0
}
