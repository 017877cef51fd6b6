//! Training losses: masked L1, a fixed convolutional perceptual proxy,
//! normal reconstruction, and the contrastive geometric-consistency term.

use std::sync::Arc;

use avatar_tensor::geometry::{axis_angle_matrix, cross3, dot3, mat_mul, mat_vec, normalize3, sub3, transpose};
use avatar_tensor::Vec3;
use avatar_tensor::{gemm_acc, gemm_nt_acc, BackwardCtx, Forward, Op, OpError, Tape, Tensor, Unary, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::{rasterize, Camera, Splat2D};

/// Transition width of the smooth L1 used in place of `|·|`.
pub const HUBER_BETA: f64 = 1e-6;
/// Grazing margin of the co-visibility test, degrees.
pub const COVIS_MARGIN_DEG: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lpips: f64,
    pub normal: f64,
    pub gc: f64,
    /// Sampled feature pairs per layer for the contrastive term.
    pub pairs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lpips: 0.1, normal: 0.05, gc: 0.01, pairs: 64 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lpips, self.normal, self.gc].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.pairs < 2 {
            return Err(Error::Config("contrastive sampling needs at least 2 pairs".into()));
        }
        Ok(())
    }
}

/// Ground truth for one view as `(H·W) × C` tensors.
#[derive(Clone, Debug)]
pub struct Targets {
    pub width: usize,
    pub height: usize,
    pub rgb: Tensor,
    pub normal: Tensor,
    /// 1 where the ground-truth coverage is positive.
    pub mask: Tensor,
}

fn image_tensor(img: &Image) -> Tensor {
    Tensor::matrix(img.pixels(), img.channels(), img.data().to_vec()).unwrap()
}

impl Targets {
    pub fn new(rgb: &Image, normal: &Image, alpha: &Image) -> Result<Self> {
        let (w, h) = (rgb.width(), rgb.height());
        for img in [normal, alpha] {
            if img.width() != w || img.height() != h {
                return Err(Error::invalid("target images differ in size"));
            }
        }
        if rgb.channels() != 3 || normal.channels() != 3 || alpha.channels() != 1 {
            return Err(Error::invalid("targets need rgb, normal and single-channel alpha"));
        }
        let mask = alpha.data().iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            width: w,
            height: h,
            rgb: image_tensor(rgb),
            normal: image_tensor(normal),
            mask: Tensor::matrix(w * h, 1, mask).unwrap(),
        })
    }

    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Mean smooth-L1 difference over masked pixels and all channels.
///
/// `mask` is `(H·W) × 1`; `pred` and `target` are `(H·W) × C`.
pub fn l1_image(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::invalid(format!("l1: prediction {shape:?} vs target {:?}", target.shape())));
    }
    if mask.shape() != [shape[0], 1] {
        return Err(Error::invalid(format!("l1: mask must be {}×1, got {:?}", shape[0], mask.shape())));
    }
    let count = mask.data().iter().filter(|&&m| m > 0.0).count();
    if count == 0 {
        return Err(Error::invalid("l1: empty foreground mask"));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let h = tape.unary(d, Unary::Huber(HUBER_BETA))?;
    let m = tape.constant(mask.clone());
    let hm = tape.scale_rows(h, m)?;
    let s = tape.sum(hm)?;
    Ok(tape.scale(s, 1.0 / (count * shape[1]) as f64)?)
}

/// Encoded-normal reconstruction loss, masked like [`l1_image`].
pub fn normal_loss(tape: &mut Tape, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    l1_image(tape, pred, target, mask)
}

/// 3×3, stride-2, padding-1 convolution over an `(H·W) × C_in` image.
/// Weights are fixed; only the input receives a gradient.
pub struct Conv2d {
    pub width: usize,
    pub height: usize,
    pub cin: usize,
    pub cout: usize,
    /// `(9·C_in) × C_out`, row index `(ky·3 + kx)·C_in + c`.
    pub weights: Arc<Vec<f64>>,
    pub bias: Arc<Vec<f64>>,
}

impl Conv2d {
    pub fn output_size(&self) -> (usize, usize) {
        ((self.width + 1) / 2, (self.height + 1) / 2)
    }

    /// Input pixel for output `(ox, oy)` and tap `(kx, ky)`, if inside.
    fn tap(&self, ox: usize, oy: usize, kx: usize, ky: usize) -> Option<usize> {
        let x = (2 * ox + kx).checked_sub(1)?;
        let y = (2 * oy + ky).checked_sub(1)?;
        (x < self.width && y < self.height).then_some(y * self.width + x)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (wo, ho) = self.output_size();
        let k = 9 * self.cin;
        let mut cols = vec![0.0; wo * ho * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(p) = self.tap(ox, oy, kx, ky) {
                            let dst = (ky * 3 + kx) * self.cin;
                            row[dst..dst + self.cin].copy_from_slice(&x[p * self.cin..(p + 1) * self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError> {
        let x = inputs[0];
        if x.shape() != [self.width * self.height, self.cin] {
            return Err(OpError::Shape(format!(
                "conv2d expects {}×{}, got {:?}",
                self.width * self.height,
                self.cin,
                x.shape()
            )));
        }
        let (wo, ho) = self.output_size();
        let m = wo * ho;
        let mut out = Vec::with_capacity(m * self.cout);
        for _ in 0..m {
            out.extend_from_slice(&self.bias);
        }
        gemm_acc(&self.im2col(x.data()), &self.weights, &mut out, m, 9 * self.cin, self.cout);
        Ok(Forward::new(Tensor::matrix(m, self.cout, out).unwrap()))
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (wo, ho) = self.output_size();
        let m = wo * ho;
        let k = 9 * self.cin;
        let mut dcols = vec![0.0; m * k];
        // dcols = dout · Wᵀ, with W stored k × cout.
        gemm_nt_acc(ctx.grad.data(), &self.weights, &mut dcols, m, self.cout, k);
        let mut dx = vec![0.0; self.width * self.height * self.cin];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &dcols[(oy * wo + ox) * k..(oy * wo + ox + 1) * k];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(p) = self.tap(ox, oy, kx, ky) {
                            let src = (ky * 3 + kx) * self.cin;
                            for c in 0..self.cin {
                                dx[p * self.cin + c] += row[src + c];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::matrix(self.width * self.height, self.cin, dx).unwrap())]
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    weights: Arc<Vec<f64>>,
    bias: Arc<Vec<f64>>,
}

/// Fixed multi-scale feature stack `Φ`: stride-2 convolutions with tanh,
/// channels unit-normalized per pixel at every scale.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    layers: Vec<ConvLayer>,
}

/// Unit-normalized features of one scale, `(h·w) × C`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub features: Var,
    pub width: usize,
    pub height: usize,
    /// Input pixels per feature pixel along each axis.
    pub stride: usize,
}

impl FeatureExtractor {
    pub const CHANNELS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = Self::CHANNELS
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (9 * cin + cout) as f64).sqrt();
                let w = (0..9 * cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
                let b = (0..cout).map(|_| rng.gen_range(-0.2..0.2)).collect();
                let l = ConvLayer { cin, cout, weights: Arc::new(w), bias: Arc::new(b) };
                cin = cout;
                l
            })
            .collect();
        Self { seed, layers }
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn features(&self, tape: &mut Tape, image: Var, width: usize, height: usize) -> Result<Vec<FeatureMap>> {
        let mut h = image;
        let (mut w, mut hgt) = (width, height);
        let mut stride = 1;
        let mut maps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let conv = Conv2d {
                width: w,
                height: hgt,
                cin: l.cin,
                cout: l.cout,
                weights: l.weights.clone(),
                bias: l.bias.clone(),
            };
            let (wo, ho) = conv.output_size();
            let z = tape.apply(conv, &[h])?;
            h = tape.tanh(z)?;
            let features = tape.normalize_rows(h)?;
            w = wo;
            hgt = ho;
            stride *= 2;
            maps.push(FeatureMap { features, width: w, height: hgt, stride });
        }
        Ok(maps)
    }
}

/// Mean over scales of the mean squared distance between unit features.
pub fn perceptual(tape: &mut Tape, phi: &FeatureExtractor, a: Var, b: Var, width: usize, height: usize) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a) != [width * height, 3] {
        return Err(Error::invalid(format!(
            "perceptual needs two {}×3 images, got {:?} and {:?}",
            width * height,
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let fa = phi.features(tape, a, width, height)?;
    let fb = phi.features(tape, b, width, height)?;
    let mut terms = Vec::with_capacity(fa.len());
    for (x, y) in fa.iter().zip(&fb) {
        let d = tape.sub(x.features, y.features)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        terms.push(tape.scale(s, 1.0 / (x.width * x.height) as f64)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64)?)
}

/// `Σ_j −log softmax_k(y_j · y′_k)_j`.
pub fn infonce(tape: &mut Tape, y: Var, y_prime: Var) -> Result<Var> {
    let n = tape.shape(y)[0];
    if n < 2 || tape.shape(y) != tape.shape(y_prime) {
        return Err(Error::invalid(format!(
            "infonce needs two matching N×D sets with N >= 2, got {:?} and {:?}",
            tape.shape(y),
            tape.shape(y_prime)
        )));
    }
    let yt = tape.transpose(y_prime)?;
    let logits = tape.matmul(y, yt)?;
    let p = tape.softmax(logits)?;
    let lp = tape.log(p)?;
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let eye = tape.constant(Tensor::matrix(n, n, eye).unwrap());
    let diag = tape.mul(lp, eye)?;
    let s = tape.sum(diag)?;
    Ok(tape.neg(s)?)
}

/// Sum of [`infonce`] over every sampled scale.
pub fn infonce_gc(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(y, yp) in pairs {
        let l = infonce(tape, y, yp)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    total.ok_or_else(|| Error::invalid("infonce_gc needs at least one layer"))
}

/// Observation-space Gaussians as plain values.
#[derive(Clone, Debug)]
pub struct GaussianSet {
    pub means: Tensor,
    pub covariances: Tensor,
    pub opacity: Tensor,
    pub normals: Tensor,
}

impl GaussianSet {
    pub fn from_tape(tape: &Tape, means: Var, covariances: Var, opacity: Var, normals: Var) -> Self {
        Self {
            means: tape.value(means).clone(),
            covariances: tape.value(covariances).clone(),
            opacity: tape.value(opacity).clone(),
            normals: tape.value(normals).clone(),
        }
    }

    fn row3(t: &Tensor, i: usize) -> Vec3 {
        let r = t.row(i);
        [r[0], r[1], r[2]]
    }
}

/// Per-Gaussian visibility from `cam_b` and its splatted mask in `cam_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoVisibilityMask {
    pub gaussians: Vec<bool>,
    /// `W × H`, 1 where the composited indicator reaches 0.5.
    pub mask: Image,
}

impl CoVisibilityMask {
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.0).count()
    }
}

/// Visible iff the angle between `n̂` and `cam − x` is at most `90° − margin`.
pub fn faces_camera(normal: Vec3, x: Vec3, cam_center: Vec3, margin_deg: f64) -> bool {
    let Some(d) = normalize3(sub3(cam_center, x)) else { return false };
    let Some(n) = normalize3(normal) else { return false };
    dot3(n, d) >= (90.0 - margin_deg).to_radians().cos()
}

pub fn covisibility_mask(set: &GaussianSet, cam_a: &Camera, cam_b: &Camera, margin_deg: f64) -> Result<CoVisibilityMask> {
    let n = set.means.rows();
    let eye = cam_b.center();
    let gaussians: Vec<bool> = (0..n)
        .map(|i| faces_camera(GaussianSet::row3(&set.normals, i), GaussianSet::row3(&set.means, i), eye, margin_deg))
        .collect();
    let payload =
        Tensor::matrix(n, 1, gaussians.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap();
    let splats: Vec<Splat2D> =
        crate::raster::project_all(cam_a, &set.means, &set.covariances, &set.opacity, &payload);
    let r = rasterize(&splats, cam_a)?;
    let bits = r.color.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let mask = Image::new(cam_a.width, cam_a.height, 1, bits)?;
    Ok(CoVisibilityMask { gaussians, mask })
}

/// Row indices into the two feature maps of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PairIndices {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPairs {
    pub layers: Vec<PairIndices>,
    /// Set when some scale had fewer than `N` candidates and was drawn with replacement.
    pub with_replacement: bool,
}

/// Candidate location correspondences `(pixel in a, pixel in b)` at full resolution.
pub type Correspondences = Vec<([f64; 2], [f64; 2])>;

/// Same-pixel correspondences for every masked pixel.
pub fn identity_correspondences(mask: &Image) -> Correspondences {
    (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.pixel(x, y)[0] > 0.0)
        .map(|(x, y)| ([x as f64, y as f64], [x as f64, y as f64]))
        .collect()
}

/// Co-visible Gaussians projected into both cameras, keeping those whose
/// `cam_a` pixel lies inside the mask and whose `cam_b` pixel is in frame.
pub fn gaussian_correspondences(set: &GaussianSet, covis: &CoVisibilityMask, cam_a: &Camera, cam_b: &Camera) -> Correspondences {
    let mut out = Vec::new();
    for (i, &vis) in covis.gaussians.iter().enumerate() {
        if !vis {
            continue;
        }
        let x = GaussianSet::row3(&set.means, i);
        let (Some((pa, _)), Some((pb, _))) = (cam_a.project_point(x), cam_b.project_point(x)) else { continue };
        let (ax, ay) = (pa[0].round(), pa[1].round());
        let inside = |p: [f64; 2], c: &Camera| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (c.width - 1) as f64 && p[1] <= (c.height - 1) as f64;
        if !inside([ax, ay], cam_a) || !inside([pb[0].round(), pb[1].round()], cam_b) {
            continue;
        }
        if covis.mask.pixel(ax as usize, ay as usize)[0] > 0.0 {
            out.push((pa, pb));
        }
    }
    out
}

fn layer_cell(p: [f64; 2], stride: usize, w: usize, h: usize) -> usize {
    let s = stride as f64;
    let x = ((p[0] / s).round().max(0.0) as usize).min(w - 1);
    let y = ((p[1] / s).round().max(0.0) as usize).min(h - 1);
    y * w + x
}

/// Draws `n` pairs per scale: without replacement when enough distinct
/// cells exist, otherwise with replacement and flagged.
pub fn sample_correspondence_pairs(
    corr: &Correspondences,
    scales: &[(usize, usize, usize)],
    n: usize,
    rng: &mut impl Rng,
) -> Result<SampledPairs> {
    if corr.is_empty() {
        return Err(Error::invalid("no co-visible locations to sample"));
    }
    let mut with_replacement = false;
    let mut layers = Vec::with_capacity(scales.len());
    for &(w, h, stride) in scales {
        let mut cells: Vec<(usize, usize)> =
            corr.iter().map(|(a, b)| (layer_cell(*a, stride, w, h), layer_cell(*b, stride, w, h))).collect();
        cells.sort_unstable();
        cells.dedup_by_key(|c| c.0);
        let picks: Vec<usize> = if cells.len() >= n {
            sample(rng, cells.len(), n).into_vec()
        } else {
            with_replacement = true;
            (0..n).map(|_| rng.gen_range(0..cells.len())).collect()
        };
        layers.push(PairIndices { a: picks.iter().map(|&i| cells[i].0).collect(), b: picks.iter().map(|&i| cells[i].1).collect() });
    }
    Ok(SampledPairs { layers, with_replacement })
}

/// Aligned sampling inside `mask` (identity correspondences).
pub fn sample_feature_pairs(
    maps: &[FeatureMap],
    mask: &Image,
    n: usize,
    rng: &mut impl Rng,
) -> Result<SampledPairs> {
    let scales: Vec<(usize, usize, usize)> = maps.iter().map(|m| (m.width, m.height, m.stride)).collect();
    let mut corr = identity_correspondences(mask);
    // Nearest-neighbour downsampling: a cell is masked when its center pixel is.
    corr.retain(|(a, _)| {
        scales.iter().all(|&(_, _, s)| {
            let (x, y) = ((a[0] / s as f64).round() as usize * s, (a[1] / s as f64).round() as usize * s);
            x < mask.width() && y < mask.height() && mask.pixel(x, y)[0] > 0.0
        })
    });
    sample_correspondence_pairs(&corr, &scales, n, rng)
}

/// Gathers sampled rows of matching feature maps into `(Y, Y′)` per scale.
pub fn gather_pairs(tape: &mut Tape, fa: &[FeatureMap], fb: &[FeatureMap], pairs: &SampledPairs) -> Result<Vec<(Var, Var)>> {
    fa.iter()
        .zip(fb)
        .zip(&pairs.layers)
        .map(|((a, b), idx)| {
            let y = tape.gather_rows(a.features, idx.a.clone())?;
            let yp = tape.gather_rows(b.features, idx.b.clone())?;
            Ok((y, yp))
        })
        .collect()
}

/// Camera orbited about `target`: azimuth about world z, then elevation
/// about the horizontal axis perpendicular to the view, both in radians.
pub fn orbit_camera(cam: &Camera, target: Vec3, azimuth: f64, elevation: f64) -> Result<Camera> {
    let eye = cam.center();
    let back = sub3(eye, target);
    let side = normalize3(cross3([0.0, 0.0, 1.0], back)).unwrap_or([1.0, 0.0, 0.0]);
    let rz = axis_angle_matrix([0.0, 0.0, azimuth]);
    let re = axis_angle_matrix([side[0] * elevation, side[1] * elevation, side[2] * elevation]);
    // World motion applied to the camera: eye′ = p + R (eye − p).
    let r = mat_mul(&rz, &re);
    let rot = mat_mul(&cam.rotation, &transpose(&r));
    let shift = sub3(target, mat_vec(&transpose(&r), target));
    let d = mat_vec(&cam.rotation, shift);
    let t = [cam.translation[0] + d[0], cam.translation[1] + d[1], cam.translation[2] + d[2]];
    Camera::new(rot, t, [cam.fx, cam.fy, cam.cx, cam.cy], cam.width, cam.height)
}

/// Random orbit within ±30° azimuth and ±10° elevation.
pub fn virtual_camera(cam: &Camera, target: Vec3, rng: &mut impl Rng) -> Result<Camera> {
    let az = rng.gen_range(-30.0f64..=30.0).to_radians();
    let el = rng.gen_range(-10.0f64..=10.0).to_radians();
    orbit_camera(cam, target, az, el)
}

/// Named components of a composite loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Var,
    pub normal: Var,
    pub gc: Option<Var>,
}

fn image_slices(tape: &mut Tape, render: Var) -> Result<(Var, Var)> {
    if tape.shape(render).len() != 2 || tape.shape(render)[1] != 7 {
        return Err(Error::invalid(format!("expected an (H·W)×7 render, got {:?}", tape.shape(render))));
    }
    Ok((tape.slice_cols(render, 0..3)?, tape.slice_cols(render, 3..6)?))
}

/// `L1 + λ_lpips·perceptual` on RGB plus `λ_n·normal`, from a render `(H·W) × 7`.
pub fn stage1_loss(tape: &mut Tape, render: Var, gt: &Targets, phi: &FeatureExtractor, w: &LossWeights) -> Result<LossTerms> {
    let (rgb, nrm) = image_slices(tape, render)?;
    let l1 = l1_image(tape, rgb, &gt.rgb, &gt.mask)?;
    let target = tape.constant(gt.rgb.clone());
    let perc = perceptual(tape, phi, rgb, target, gt.width, gt.height)?;
    let normal = normal_loss(tape, nrm, &gt.normal, &gt.mask)?;
    let rec = {
        let p = tape.scale(perc, w.lpips)?;
        tape.add(l1, p)?
    };
    let n = tape.scale(normal, w.normal)?;
    let total = tape.add(rec, n)?;
    Ok(LossTerms { total, l1, perceptual: perc, normal, gc: None })
}

/// Stage-1 composite on a shaded render plus `λ_gs·gc` when given.
pub fn stage2_loss(
    tape: &mut Tape,
    render: Var,
    gt: &Targets,
    phi: &FeatureExtractor,
    gc: Option<Var>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let mut terms = stage1_loss(tape, render, gt, phi, w)?;
    if let Some(g) = gc {
        let s = tape.scale(g, w.gc)?;
        terms.total = tape.add(terms.total, s)?;
        terms.gc = Some(g);
    }
    Ok(terms)
}
