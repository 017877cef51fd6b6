//! Finite-difference checks over every differentiable path, on randomly
//! drawn small configurations.

use std::sync::Arc;

use avatar_tensor::{check_leaf, Tape, Tensor, Var, Vec3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::covariance_matrix;
use crate::model::{random_quaternion, splat_rgb_normal, view_vectors, GaussianAvatar, ModelConfig, Template};
use crate::objectives::{
    infonce_gc, l1_image, normal_loss, perceptual, stage1_loss, stage2_loss, FeatureExtractor, LossWeights, Targets,
};
use crate::pbr::{ShadeTape, DEFAULT_F0};
use crate::raster::{Camera, RasterTape};
use crate::sh::{EnvLightProbe, PROBE_TEXELS};
use crate::image::Image;
use crate::skinning::{deform, PoseSequence, Skeleton};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Coordinates perturbed per configuration.
pub const COORDS: usize = 6;

pub type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Every check in the suite, by name.
pub const CHECKS: &[(&str, Check)] = &[
    ("geometry_encoder", geometry_encoder),
    ("appearance_encoder", appearance_encoder),
    ("visibility_encoder", visibility_encoder),
    ("skinning_encoder", skinning_encoder),
    ("offsets", offsets),
    ("deformation", deformation),
    ("brdf", brdf),
    ("shade", shade),
    ("rasterizer", rasterizer),
    ("l1_image", l1),
    ("perceptual", perceptual_check),
    ("normal_loss", normal),
    ("infonce_gc", infonce),
    ("stage1_loss", stage1),
    ("stage2_loss", stage2),
    ("stage2_end_to_end", end_to_end),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
    pub worst_config: usize,
}

/// Runs every check on `configs` random configurations each.
pub fn run_suite(configs: usize, seed: u64, mut progress: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(CHECKS.len());
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let mut r = CheckResult { name, configs, max_rel_error: 0.0, worst_config: 0 };
        for c in 0..configs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((i as u64) << 32) | c as u64);
            let e = check(&mut rng)?;
            if e > r.max_rel_error || e.is_nan() {
                r.max_rel_error = e;
                r.worst_config = c;
            }
        }
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn unit_rows(rng: &mut impl Rng, rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * 3);
    for _ in 0..rows {
        let v: Vec3 = loop {
            let v: Vec3 = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.2 {
                break v.map(|x| x / n);
            }
        };
        data.extend_from_slice(&v);
    }
    Tensor::matrix(rows, 3, data).unwrap()
}

/// Scalar `Σ out ⊙ R` for a random fixed `R`.
fn project(tape: &mut Tape, out: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = Tensor::new(shape.clone(), (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p)?)
}

fn check(tape: &mut Tape, out: Var, leaf: Var, rng: &mut impl Rng) -> Result<f64> {
    let n = tape.value(leaf).len();
    let coords = sample(rng, n, COORDS.min(n)).into_vec();
    Ok(check_leaf(tape, out, leaf, Some(&coords), STEP)?.max_rel_error)
}

fn small_config(window: usize) -> ModelConfig {
    ModelConfig {
        octaves: 2,
        encoder_width: 8,
        encoder_layers: 2,
        visibility_width: 8,
        skin_width: 8,
        window,
        ..ModelConfig::default()
    }
}

/// Small random avatar without a skinning prior, so every encoder is live.
fn small_avatar(rng: &mut ChaCha8Rng) -> Result<GaussianAvatar> {
    let n = rng.gen_range(3..7);
    let vertices: Vec<Vec3> = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect();
    let skeleton = Skeleton::new(vec![None, Some(0), Some(1)], vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.3], [0.2, 0.0, 0.3]])?;
    let config = small_config(3);
    GaussianAvatar::init_from_template(&Template::from_vertices(vertices), skeleton, config, rng.gen())
}

fn random_window(rng: &mut impl Rng, d: usize, joints: usize) -> Result<PoseSequence> {
    PoseSequence::new((0..d).map(|_| (0..joints).map(|_| [0; 3].map(|_| rng.gen_range(-0.8..0.8))).collect()).collect())
}

fn pick<'a>(rng: &mut impl Rng, names: &[&'a str]) -> &'a str {
    names[rng.gen_range(0..names.len())]
}

fn model_check(
    rng: &mut ChaCha8Rng,
    leaves: &[&str],
    f: impl FnOnce(&GaussianAvatar, &mut Tape, &crate::params::Bound, Var, &PoseSequence) -> Result<Var>,
) -> Result<f64> {
    let avatar = small_avatar(rng)?;
    let window = random_window(rng, avatar.config.window, avatar.skeleton.joints())?;
    let name = pick(rng, leaves);
    let mut tape = Tape::new();
    let bound = avatar.params.bind(&mut tape, |n| n == name);
    let pe = tape.constant(avatar.encoding().clone());
    let out = f(&avatar, &mut tape, &bound, pe, &window)?;
    let y = project(&mut tape, out, rng)?;
    check(&mut tape, y, bound.var(name)?, rng)
}

fn geometry_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    model_check(rng, &["geo.0.w", "geo.0.b", "geo.1.w", "geo.1.b"], |a, tape, bound, pe, _| {
        let g = a.encode_geometry(tape, bound, pe)?;
        Ok(tape.concat_cols(&[g.opacity, g.rotation, g.scale, g.normal])?)
    })
}

fn appearance_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    model_check(rng, &["material.0.w", "material.1.w", "color.0.w", "color.1.b"], |a, tape, bound, pe, _| {
        let app = a.encode_appearance(tape, bound, pe)?;
        Ok(tape.concat_cols(&[app.color.unwrap(), app.albedo, app.roughness])?)
    })
}

fn visibility_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    model_check(rng, &["visibility.0.w", "visibility.1.w", "visibility.2.b"], |a, tape, bound, pe, _| {
        let n = tape.value(pe).rows();
        let normals = tape.constant(unit_rows(&mut ChaCha8Rng::seed_from_u64(n as u64), n));
        a.encode_visibility(tape, bound, pe, normals)
    })
}

fn skinning_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let leaves = [
        "skin.fx.0.w",
        "skin.head.0.w",
        "skin.head.1.b",
        "skin.t_embed.w",
        "skin.t_q.w",
        "skin.t_k.w",
        "skin.t_v.w",
        "skin.tc_q.w",
        "skin.tc_v.w",
        "skin.s_embed.b",
        "skin.s_q.w",
        "skin.sc_k.w",
        "skin.sc_v.w",
        "skin.t_time",
        "skin.t_joint",
        "skin.s_joint",
    ];
    model_check(rng, &leaves, |a, tape, bound, pe, window| a.skinning_weights(tape, bound, pe, window))
}

fn offsets(rng: &mut ChaCha8Rng) -> Result<f64> {
    model_check(rng, &["offset.0.w", "offset.1.w", "offset.2.w", "offset.2.b"], |a, tape, bound, _, window| {
        let input = tape.constant(crate::skinning::OffsetField::input(a.encoding(), window.current()));
        let (dx, dr) = a.offset_field().forward(tape, bound, input)?;
        Ok(tape.concat_cols(&[dx, dr])?)
    })
}

fn deformation(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(2..6);
    let j = rng.gen_range(2..4);
    let mut tape = Tape::new();
    let logits = uniform(rng, n, j, -1.0, 1.0);
    let w = tape.param(logits);
    let w = tape.softmax(w)?;
    let pose: Vec<Vec3> = (0..j).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let skel = Skeleton::new((0..j).map(|k| k.checked_sub(1)).collect(), (0..j).map(|k| [0.0, 0.0, 0.3 * k as f64]).collect())?;
    let jt = tape.constant(skel.forward_kinematics(&pose)?.to_tensor());
    let x = tape.param(uniform(rng, n, 3, -0.5, 0.5));
    let dx = tape.param(uniform(rng, n, 3, -0.05, 0.05));
    let q = tape.param(Tensor::from_rows(&(0..n).map(|_| random_quaternion(rng)).collect::<Vec<_>>()));
    let dr = tape.param(uniform(rng, n, 4, -0.1, 0.1));
    let s = tape.param(uniform(rng, n, 3, 0.05, 0.3));
    let nrm = tape.param(unit_rows(rng, n));
    let p = deform(&mut tape, w, jt, x, Some(dx), q, Some(dr), s, nrm)?;
    let out = tape.concat_cols(&[p.means, p.covariances, p.normals])?;
    let y = project(&mut tape, out, rng)?;
    let leaves = tape.params();
    let leaf = leaves[rng.gen_range(0..leaves.len())];
    check(&mut tape, y, leaf, rng)
}

struct ShadeInputs {
    normals: Var,
    wo: Var,
    albedo: Var,
    rough: Var,
    vis: Var,
    radiance: Var,
}

fn shade_inputs(tape: &mut Tape, rng: &mut impl Rng, n: usize) -> ShadeInputs {
    ShadeInputs {
        normals: tape.param(unit_rows(rng, n)),
        wo: tape.param(unit_rows(rng, n)),
        albedo: tape.param(uniform(rng, n, 3, 0.05, 0.95)),
        rough: tape.param(uniform(rng, n, 1, 0.2, 0.9)),
        vis: tape.param(uniform(rng, n, 16, -0.3, 0.3)),
        radiance: tape.param(uniform(rng, PROBE_TEXELS, 3, 0.0, 2.0)),
    }
}

fn shade_check(rng: &mut ChaCha8Rng, brdf_only: bool) -> Result<f64> {
    let n = rng.gen_range(1..4);
    let mut tape = Tape::new();
    let s = shade_inputs(&mut tape, rng, n);
    let out = tape.shade(DEFAULT_F0, s.normals, s.wo, s.albedo, s.rough, s.vis, s.radiance)?;
    let y = project(&mut tape, out, rng)?;
    let leaves = if brdf_only { vec![s.albedo, s.rough] } else { vec![s.normals, s.wo, s.vis, s.radiance] };
    let leaf = leaves[rng.gen_range(0..leaves.len())];
    check(&mut tape, y, leaf, rng)
}

fn brdf(rng: &mut ChaCha8Rng) -> Result<f64> {
    shade_check(rng, true)
}

fn shade(rng: &mut ChaCha8Rng) -> Result<f64> {
    shade_check(rng, false)
}

struct Scene {
    camera: Arc<Camera>,
    means: Tensor,
    covs: Tensor,
    opacity: Tensor,
}

/// Wide, well-separated Gaussians: every splat covers every pixel with α far
/// above the cutoff and depth order is stable under the difference step.
fn random_scene(rng: &mut impl Rng, n: usize, size: usize) -> Result<Scene> {
    let eye = [rng.gen_range(-0.5..0.5), -3.0, rng.gen_range(-0.5..0.5)];
    let camera = Arc::new(Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 1.2 * size as f64, size, size)?);
    let mut means = Vec::with_capacity(n * 3);
    let mut covs = Vec::with_capacity(n * 9);
    for k in 0..n {
        means.extend_from_slice(&[rng.gen_range(-0.2..0.2), -0.6 + 0.3 * k as f64, rng.gen_range(-0.2..0.2)]);
        let s = [0; 3].map(|_| rng.gen_range(1.8..2.6));
        covs.extend(covariance_matrix(random_quaternion(rng), s).iter().flatten());
    }
    Ok(Scene {
        camera,
        means: Tensor::matrix(n, 3, means)?,
        covs: Tensor::matrix(n, 9, covs)?,
        opacity: uniform(rng, n, 1, 0.3, 0.8),
    })
}

fn rasterizer(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(1..6);
    let c = rng.gen_range(1..4);
    let scene = random_scene(rng, n, 16)?;
    let mut tape = Tape::new();
    let means = tape.param(scene.means);
    let covs = tape.param(scene.covs);
    let opacity = tape.param(scene.opacity);
    let payload = tape.param(uniform(rng, n, c, -1.0, 1.0));
    let out = tape.rasterize(&scene.camera, means, covs, opacity, payload)?;
    let y = project(&mut tape, out, rng)?;
    let leaf = [means, covs, opacity, payload][rng.gen_range(0..4)];
    check(&mut tape, y, leaf, rng)
}

fn image_pair(rng: &mut impl Rng, size: usize, channels: usize) -> (Tensor, Tensor, Tensor) {
    let p = size * size;
    let mask = Tensor::matrix(p, 1, (0..p).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect()).unwrap();
    (uniform(rng, p, channels, 0.0, 1.0), uniform(rng, p, channels, 0.0, 1.0), mask)
}

fn l1(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, mask) = image_pair(rng, 8, 3);
    let mut tape = Tape::new();
    let x = tape.param(a);
    let y = l1_image(&mut tape, x, &b, &mask)?;
    check(&mut tape, y, x, rng)
}

fn normal(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, mask) = image_pair(rng, 8, 3);
    let mut tape = Tape::new();
    let x = tape.param(a);
    let y = normal_loss(&mut tape, x, &b, &mask)?;
    check(&mut tape, y, x, rng)
}

fn perceptual_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (a, b, _) = image_pair(rng, 16, 3);
    let phi = FeatureExtractor::new(rng.gen());
    let mut tape = Tape::new();
    let x = tape.param(a);
    let t = tape.constant(b);
    let y = perceptual(&mut tape, &phi, x, t, 16, 16)?;
    check(&mut tape, y, x, rng)
}

fn infonce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let layers = rng.gen_range(1..4);
    let mut tape = Tape::new();
    let mut pairs = Vec::new();
    for _ in 0..layers {
        let n = rng.gen_range(2..7);
        let d = rng.gen_range(2..6);
        let y = tape.param(uniform(rng, n, d, -1.0, 1.0));
        let yp = tape.param(uniform(rng, n, d, -1.0, 1.0));
        let y = tape.normalize_rows(y)?;
        let yp = tape.normalize_rows(yp)?;
        pairs.push((y, yp));
    }
    let out = infonce_gc(&mut tape, &pairs)?;
    let leaves = tape.params();
    let leaf = leaves[rng.gen_range(0..leaves.len())];
    check(&mut tape, out, leaf, rng)
}

fn targets(rng: &mut impl Rng, size: usize) -> Result<Targets> {
    let p = size * size;
    let rgb = Image::new(size, size, 3, (0..3 * p).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let nrm = Image::new(size, size, 3, (0..3 * p).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let alpha = Image::new(size, size, 1, (0..p).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect())?;
    Targets::new(&rgb, &nrm, &alpha)
}

fn random_weights(rng: &mut impl Rng) -> LossWeights {
    LossWeights { lpips: rng.gen_range(0.0..0.5), normal: rng.gen_range(0.0..0.5), gc: rng.gen_range(0.0..0.1), pairs: 8 }
}

fn stage1(rng: &mut ChaCha8Rng) -> Result<f64> {
    let gt = targets(rng, 16)?;
    let phi = FeatureExtractor::new(rng.gen());
    let w = random_weights(rng);
    let mut tape = Tape::new();
    let x = tape.param(uniform(rng, 256, 7, 0.0, 1.0));
    let l = stage1_loss(&mut tape, x, &gt, &phi, &w)?;
    check(&mut tape, l.total, x, rng)
}

fn stage2(rng: &mut ChaCha8Rng) -> Result<f64> {
    let gt = targets(rng, 16)?;
    let phi = FeatureExtractor::new(rng.gen());
    let w = random_weights(rng);
    let mut tape = Tape::new();
    let x = tape.param(uniform(rng, 256, 7, 0.0, 1.0));
    let g = tape.param(Tensor::scalar(rng.gen_range(0.0..5.0)));
    let l = stage2_loss(&mut tape, x, &gt, &phi, Some(g), &w)?;
    let leaf = if rng.gen_bool(0.8) { x } else { g };
    check(&mut tape, l.total, leaf, rng)
}

/// Stage-2 loss, including the contrastive term against a second view,
/// with respect to one Gaussian's position in a 5-Gaussian shaded scene.
fn end_to_end(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = 5;
    let size = 16;
    let scene = random_scene(rng, n, size)?;
    let other = {
        let c = &scene.camera;
        Arc::new(crate::objectives::orbit_camera(c, [0.0; 3], rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2))?)
    };
    let gt = targets(rng, size)?;
    let phi = FeatureExtractor::new(rng.gen());
    let w = random_weights(rng);
    let probe = EnvLightProbe::from_fn(|d| [0.6 + 0.4 * d[2], 0.5 + 0.3 * d[0], 0.7])?;
    let mut tape = Tape::new();
    let means = tape.param(scene.means);
    let covs = tape.constant(scene.covs);
    let opacity = tape.constant(scene.opacity);
    let normals = tape.constant(unit_rows(rng, n));
    let albedo = tape.constant(uniform(rng, n, 3, 0.1, 0.9));
    let rough = tape.constant(uniform(rng, n, 1, 0.3, 0.9));
    let vis = tape.constant(uniform(rng, n, 16, -0.2, 0.2));
    let radiance = tape.constant(Tensor::matrix(
        PROBE_TEXELS,
        3,
        probe.radiance().iter().flatten().copied().collect(),
    )?);
    let render = |tape: &mut Tape, cam: &Arc<Camera>| -> Result<Var> {
        let v = view_vectors(tape, cam, means)?;
        let wo = tape.normalize_rows(v)?;
        let rgb = tape.shade(DEFAULT_F0, normals, wo, albedo, rough, vis, radiance)?;
        splat_rgb_normal(tape, cam, means, covs, opacity, rgb, normals)
    };
    let ra = render(&mut tape, &scene.camera)?;
    let rb = render(&mut tape, &other)?;
    let fa = {
        let rgb = tape.slice_cols(ra, 0..3)?;
        phi.features(&mut tape, rgb, size, size)?
    };
    let fb = {
        let rgb = tape.slice_cols(rb, 0..3)?;
        phi.features(&mut tape, rgb, size, size)?
    };
    let mut pairs = Vec::new();
    for (a, b) in fa.iter().zip(&fb) {
        let cells = a.width * a.height;
        let k = cells.min(4);
        let ia = sample(rng, cells, k).into_vec();
        let ib = sample(rng, cells, k).into_vec();
        pairs.push((tape.gather_rows(a.features, ia)?, tape.gather_rows(b.features, ib)?));
    }
    let gc = infonce_gc(&mut tape, &pairs)?;
    let l = stage2_loss(&mut tape, ra, &gt, &phi, Some(gc), &w)?;
    let row = rng.gen_range(0..n);
    let coords: Vec<usize> = (0..3).map(|k| row * 3 + k).collect();
    Ok(check_leaf(&mut tape, l.total, means, Some(&coords), STEP)?.max_rel_error)
}
