//! Rendering a trained avatar and scoring it against held-out ground truth.

use std::sync::Arc;

use avatar_tensor::{Tape, Tensor, Vec3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{apply_mask, psnr, psnr_masked, ssim, union_mask, MetricReport, Task};
use crate::model::{probe_radiance, splat_rgb_normal, GaussianAvatar, PosedVars, RenderMode};
use crate::objectives::{perceptual, FeatureExtractor};
use crate::raster::{Camera, RenderedImage};
use crate::sh::EnvLightProbe;
use crate::skinning::PoseSequence;
use crate::synth::{record_from_render, FrameRecord, SceneDataset};

/// Seed of the fixed feature stack behind the perceptual-proxy metric.
pub const PROXY_SEED: u64 = 0;

#[derive(Clone, Copy, Debug)]
pub enum Lighting<'a> {
    /// View-dependent color when present, else the learned probe.
    Auto,
    ViewColor,
    Learned,
    Probe(&'a EnvLightProbe),
    Albedo,
}

fn probe_tensor(probe: &EnvLightProbe) -> Tensor {
    Tensor::matrix(probe.radiance().len(), 3, probe.radiance().iter().flatten().copied().collect()).unwrap()
}

/// Renders `avatar` at frame `t` of `poses`; `albedo_scale` multiplies the
/// decoded albedo per channel before shading.
pub fn render_avatar(
    avatar: &GaussianAvatar,
    poses: &[Vec<Vec3>],
    t: usize,
    camera: &Camera,
    lighting: Lighting<'_>,
    albedo_scale: [f64; 3],
) -> Result<RenderedImage> {
    let mut tape = Tape::new();
    let bound = avatar.params.bind(&mut tape, |_| false);
    let window = PoseSequence::window(poses, t, avatar.config.window)?;
    let mut posed: PosedVars = avatar.pose(&mut tape, &bound, &window)?;
    if albedo_scale != [1.0; 3] {
        let n = avatar.len();
        let s = tape.constant(Tensor::matrix(n, 3, (0..n).flat_map(|_| albedo_scale).collect()).unwrap());
        posed.albedo = tape.mul(posed.albedo, s)?;
    }
    let cam = Arc::new(camera.clone());
    let lighting = match lighting {
        Lighting::Auto if avatar.has_color() => Lighting::ViewColor,
        Lighting::Auto => Lighting::Learned,
        other => other,
    };
    let out = match lighting {
        Lighting::ViewColor => avatar.render(&mut tape, &posed, &cam, RenderMode::ShColor, None)?,
        Lighting::Learned => {
            let r = probe_radiance(&mut tape, &bound)?;
            avatar.render(&mut tape, &posed, &cam, RenderMode::Pbr, Some(r))?
        }
        Lighting::Probe(p) => {
            let r = tape.constant(probe_tensor(p));
            avatar.render(&mut tape, &posed, &cam, RenderMode::Pbr, Some(r))?
        }
        Lighting::Albedo => splat_rgb_normal(
            &mut tape,
            &cam,
            posed.means,
            posed.covariances,
            posed.opacity,
            posed.albedo,
            posed.normals,
        )?,
        Lighting::Auto => unreachable!(),
    };
    Ok(RenderedImage::from_tensor(camera, tape.value(out)))
}

/// Views scored per task, as `(frame, camera)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub novel_view: Vec<(usize, usize)>,
    pub novel_pose: Vec<(usize, usize)>,
    pub relight: Vec<(usize, usize)>,
}

impl EvalProtocol {
    /// Non-training cameras on sampled training frames; the training camera on
    /// sampled held-out frames; every camera on a sparse frame set for relighting.
    pub fn standard(data: &SceneDataset) -> Self {
        let train = data.training_frames();
        let frames = data.poses.len();
        let cam0 = data.training_camera();
        let cams = data.cameras.len();
        let step = (train / 10).max(1);
        let novel_view = (0..train)
            .step_by(step)
            .flat_map(|t| (0..cams).filter(move |&c| c != cam0).map(move |c| (t, c)))
            .collect();
        let pstep = ((frames - train) / 10).max(1);
        let novel_pose = (train..frames).step_by(pstep).map(|t| (t, cam0)).collect();
        let rstep = (frames / 5).max(1);
        let relight = (0..frames).step_by(rstep).flat_map(|t| (0..cams).map(move |c| (t, c))).collect();
        Self { novel_view, novel_pose, relight }
    }
}

pub fn view_key(frame: usize, camera: usize) -> String {
    format!("f{frame:04}c{camera}")
}

fn proxy(phi: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    let mut tape = Tape::new();
    let ta = tape.constant(Tensor::matrix(a.pixels(), 3, a.data().to_vec())?);
    let tb = tape.constant(Tensor::matrix(b.pixels(), 3, b.data().to_vec())?);
    let v = perceptual(&mut tape, phi, ta, tb, a.width(), a.height())?;
    Ok(tape.value(v).item()?)
}

/// Adds psnr, ssim, psnr_n, ssim_n and perceptual_proxy for one view.
pub fn score_view(report: &mut MetricReport, task: Task, key: &str, pred: &FrameRecord, gt: &FrameRecord, phi: &FeatureExtractor) -> Result<()> {
    let p = psnr(&pred.rgb, &gt.rgb, 1.0)?;
    report.insert(task, "psnr", key, p.db);
    report.insert(task, "ssim", key, ssim(&pred.rgb, &gt.rgb)?);
    let mask = union_mask(&pred.alpha, &gt.alpha);
    let (pn, gn) = (apply_mask(&pred.normal, &mask), apply_mask(&gt.normal, &mask));
    report.insert(task, "psnr_n", key, psnr_masked(&pred.normal, &gt.normal, &mask, 1.0)?.db);
    report.insert(task, "ssim_n", key, ssim(&pn, &gn)?);
    report.insert(task, "perceptual_proxy", key, proxy(phi, &pred.rgb, &gt.rgb)?);
    Ok(())
}

/// Per-channel least-squares scale taking predicted to ground-truth albedo
/// over ground-truth foreground pixels.
pub fn albedo_alignment(avatar: &GaussianAvatar, data: &SceneDataset, views: &[(usize, usize)]) -> Result<[f64; 3]> {
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    for &(t, c) in views {
        let cam = &data.cameras[c];
        let pred = render_avatar(avatar, &data.poses, t, cam, Lighting::Albedo, [1.0; 3])?;
        let gt = data.figure.render(&data.poses, t, cam, None, data.spec.wrinkles)?;
        for p in 0..gt.alpha.pixels() {
            if gt.alpha.data()[p] <= 0.0 {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (pred.color.data()[p * 6 + k], gt.color.data()[p * 6 + k]);
                num[k] += a * b;
                den[k] += a * a;
            }
        }
    }
    Ok([0, 1, 2].map(|k| if den[k] > 0.0 { num[k] / den[k] } else { 1.0 }))
}

/// Scores novel views, novel poses, and relighting under the held-out probe.
pub fn evaluate(avatar: &GaussianAvatar, data: &SceneDataset, protocol: &EvalProtocol) -> Result<MetricReport> {
    if data.records.is_empty() {
        return Err(Error::invalid("dataset has no frames"));
    }
    let phi = FeatureExtractor::new(PROXY_SEED);
    let mut report = MetricReport::new();
    for (task, views) in [(Task::NovelView, &protocol.novel_view), (Task::NovelPose, &protocol.novel_pose)] {
        for &(t, c) in views {
            let r = render_avatar(avatar, &data.poses, t, &data.cameras[c], Lighting::Auto, [1.0; 3])?;
            score_view(&mut report, task, &view_key(t, c), &record_from_render(t, c, &r), data.record(t, c), &phi)?;
        }
    }
    if !avatar.has_color() && !protocol.relight.is_empty() {
        let scale = albedo_alignment(avatar, data, &protocol.relight)?;
        for (k, s) in scale.iter().enumerate() {
            report.insert(Task::Relight, "albedo_scale", ["r", "g", "b"][k], *s);
        }
        for &(t, c) in &protocol.relight {
            let cam = &data.cameras[c];
            let probe = &data.heldout_probe;
            let pred = render_avatar(avatar, &data.poses, t, cam, Lighting::Probe(probe), scale)?;
            let gt = data.figure.render(&data.poses, t, cam, Some(probe), data.spec.wrinkles)?;
            score_view(&mut report, Task::Relight, &view_key(t, c), &record_from_render(t, c, &pred), &record_from_render(t, c, &gt), &phi)?;
        }
    }
    report.add_means();
    Ok(report)
}

/// Scores ground-truth re-renders against the stored images; a consistent
/// dataset reports infinite PSNR and unit SSIM everywhere.
pub fn evaluate_ground_truth(data: &SceneDataset, protocol: &EvalProtocol) -> Result<MetricReport> {
    let phi = FeatureExtractor::new(PROXY_SEED);
    let mut report = MetricReport::new();
    let w = data.spec.wrinkles;
    for (task, views) in [(Task::NovelView, &protocol.novel_view), (Task::NovelPose, &protocol.novel_pose)] {
        for &(t, c) in views {
            let r = data.figure.render(&data.poses, t, &data.cameras[c], Some(&data.probe), w)?;
            score_view(&mut report, task, &view_key(t, c), &record_from_render(t, c, &r), data.record(t, c), &phi)?;
        }
    }
    for &(t, c) in &protocol.relight {
        let r = data.figure.render(&data.poses, t, &data.cameras[c], Some(&data.heldout_probe), w)?;
        let rec = record_from_render(t, c, &r);
        score_view(&mut report, Task::Relight, &view_key(t, c), &rec, &rec, &phi)?;
    }
    report.add_means();
    Ok(report)
}
