//! Procedural articulated figures and rendered multi-view sequences with
//! known ground truth.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use avatar_tensor::geometry::{add3, cross3, dot3, norm3, normalize3, scale3, sub3, Mat3, Vec3};
use avatar_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{read_pfm, write_atomic, write_pfm, Image};
use crate::model::{shade_posed, splat_rgb_normal, PosedVars, Template, SH_C0, SH_C1};
use crate::raster::{Camera, RenderedImage};
use crate::sh::{EnvLightProbe, SH_COEFFS};
use crate::skinning::{deform, format_poses, read_poses, JointTransformSet, Skeleton};

pub const MAX_JOINTS: usize = 6;

/// One capsule bone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    /// Rotation center in the rest pose.
    pub pivot: Vec3,
    /// Capsule axis endpoints.
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
    pub color: Vec3,
    pub roughness: f64,
}

impl Bone {
    /// Distance from `x` to the capsule surface (zero inside).
    pub fn surface_distance(&self, x: Vec3) -> f64 {
        (segment_distance(x, self.start, self.end) - self.radius).max(0.0)
    }
}

fn segment_closest(x: Vec3, a: Vec3, b: Vec3) -> Vec3 {
    let ab = sub3(b, a);
    let len2 = dot3(ab, ab);
    let t = if len2 > 0.0 { (dot3(sub3(x, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    add3(a, scale3(ab, t))
}

fn segment_distance(x: Vec3, a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(x, segment_closest(x, a, b)))
}

/// One pose-dependent ripple: `a · W[joint] · sin(κ·x + φ) · sin(α θ_t + β θ_{t−lag})`
/// along the rest normal, where `θ` is one axis-angle component of `joint`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrinkleTerm {
    pub joint: usize,
    pub axis: usize,
    pub amplitude: f64,
    pub wave: Vec3,
    pub phase: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lag: usize,
}

/// Per-Gaussian rendering attributes of the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtAttributes {
    pub opacity: f64,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vec3>,
    pub albedo: Vec<Vec3>,
    pub roughness: Vec<f64>,
    /// Visibility `a + b (n̂ · ω)`.
    pub visibility: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedFigure {
    pub seed: u64,
    pub bones: Vec<Bone>,
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub weights: Vec<Vec<f64>>,
    pub spacing: f64,
    pub falloff: f64,
    pub wrinkles: Vec<WrinkleTerm>,
    pub attributes: GtAttributes,
}

fn bone_layout(j: usize) -> Vec<(&'static str, Option<usize>, Vec3, Vec3, Vec3, f64)> {
    let torso = ("torso", None, [0.0, 0.0, 0.9], [0.0, 0.0, 0.95], [0.0, 0.0, 1.35], 0.14);
    let head = ("head", Some(0), [0.0, 0.0, 1.49], [0.0, 0.0, 1.6], [0.0, 0.0, 1.6], 0.1);
    let full_arm = |s: f64, n| (n, Some(0), [0.14 * s, 0.0, 1.38], [0.2 * s, 0.0, 1.38], [0.72 * s, 0.0, 1.38], 0.05);
    let upper = |s: f64, n| (n, Some(0), [0.14 * s, 0.0, 1.38], [0.2 * s, 0.0, 1.38], [0.46 * s, 0.0, 1.38], 0.05);
    let fore = |s: f64, p, n| (n, Some(p), [0.46 * s, 0.0, 1.38], [0.46 * s, 0.0, 1.38], [0.72 * s, 0.0, 1.38], 0.045);
    match j {
        2 => vec![torso, head],
        3 => vec![torso, head, full_arm(1.0, "left_arm")],
        4 => vec![torso, head, full_arm(1.0, "left_arm"), full_arm(-1.0, "right_arm")],
        5 => vec![torso, head, upper(1.0, "left_upper_arm"), full_arm(-1.0, "right_arm"), fore(1.0, 2, "left_forearm")],
        _ => vec![
            torso,
            head,
            upper(1.0, "left_upper_arm"),
            upper(-1.0, "right_upper_arm"),
            fore(1.0, 2, "left_forearm"),
            fore(-1.0, 3, "right_forearm"),
        ],
    }
}

fn capsule_area(b: &Bone) -> f64 {
    2.0 * PI * b.radius * norm3(sub3(b.end, b.start)) + 4.0 * PI * b.radius * b.radius
}

/// Area-uniform point and outward normal on a capsule.
fn sample_capsule(b: &Bone, rng: &mut impl Rng) -> (Vec3, Vec3) {
    let axis = sub3(b.end, b.start);
    let len = norm3(axis);
    let u = normalize3(axis).unwrap_or([0.0, 0.0, 1.0]);
    let helper = if u[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = normalize3(cross3(u, helper)).unwrap();
    let e2 = cross3(u, e1);
    let side = 2.0 * PI * b.radius * len;
    let total = side + 4.0 * PI * b.radius * b.radius;
    if rng.gen::<f64>() * total < side {
        let t = rng.gen::<f64>();
        let a = rng.gen::<f64>() * 2.0 * PI;
        let n = add3(scale3(e1, a.cos()), scale3(e2, a.sin()));
        (add3(add3(b.start, scale3(axis, t)), scale3(n, b.radius)), n)
    } else {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let a = rng.gen::<f64>() * 2.0 * PI;
        let r = (1.0 - z * z).sqrt();
        let n = add3(add3(scale3(e1, r * a.cos()), scale3(e2, r * a.sin())), scale3(u, z));
        let base = if z >= 0.0 { b.end } else { b.start };
        (add3(base, scale3(n, b.radius)), n)
    }
}

/// Quaternion of the tangent frame whose third axis is `n`.
fn frame_quaternion(n: Vec3) -> [f64; 4] {
    let helper = if n[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let t1 = normalize3(cross3(helper, n)).unwrap();
    let t2 = cross3(n, t1);
    let m: Mat3 = [[t1[0], t2[0], n[0]], [t1[1], t2[1], n[1]], [t1[2], t2[2], n[2]]];
    rotmat_to_quat(&m)
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, `w ≥ 0`.
pub fn rotmat_to_quat(m: &Mat3) -> [f64; 4] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

/// Builds a `J`-bone capsule figure with about `samples` surface points.
pub fn generate_figure(seed: u64, joints: usize) -> Result<ArticulatedFigure> {
    generate_figure_with(seed, joints, 500)
}

pub fn generate_figure_with(seed: u64, joints: usize, samples: usize) -> Result<ArticulatedFigure> {
    if joints < 2 {
        return Err(Error::invalid(format!("a figure needs at least 2 joints, got {joints}")));
    }
    if joints > MAX_JOINTS {
        return Err(Error::invalid(format!("figures support at most {MAX_JOINTS} joints, got {joints}")));
    }
    if samples == 0 {
        return Err(Error::invalid("a figure needs at least one surface sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = [[0.75, 0.45, 0.3], [0.85, 0.7, 0.55], [0.3, 0.45, 0.75], [0.35, 0.7, 0.4], [0.6, 0.35, 0.7], [0.7, 0.65, 0.3]];
    let rough = [0.45, 0.7, 0.35, 0.55, 0.4, 0.6];
    let bones: Vec<Bone> = bone_layout(joints)
        .into_iter()
        .enumerate()
        .map(|(k, (name, parent, pivot, start, end, radius))| Bone {
            name: name.to_string(),
            parent,
            pivot,
            start,
            end,
            radius,
            color: palette[k],
            roughness: rough[k],
        })
        .collect();

    // Candidates uniform by area on the union surface, thinned by farthest-point sampling.
    let areas: Vec<f64> = bones.iter().map(capsule_area).collect();
    let total: f64 = areas.iter().sum();
    let mut cands: Vec<(Vec3, Vec3)> = Vec::new();
    let target = samples * 12;
    let mut guard = 0;
    while cands.len() < target && guard < target * 20 {
        guard += 1;
        let mut pick = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < bones.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let (p, n) = sample_capsule(&bones[k], &mut rng);
        let buried = bones
            .iter()
            .enumerate()
            .any(|(o, b)| o != k && segment_distance(p, b.start, b.end) < b.radius - 1e-9);
        if !buried {
            cands.push((p, n));
        }
    }
    let picked = farthest_points(&cands, samples);
    let vertices: Vec<Vec3> = picked.iter().map(|&i| cands[i].0).collect();
    let normals: Vec<Vec3> = picked.iter().map(|&i| cands[i].1).collect();

    let falloff = 0.03;
    let weights: Vec<Vec<f64>> = vertices
        .iter()
        .map(|&x| {
            let raw: Vec<f64> = bones.iter().map(|b| (-b.surface_distance(x) / falloff).exp()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|w| w / s).collect()
        })
        .collect();

    let spacing = mean_nearest(&vertices);
    let mut albedo = Vec::with_capacity(vertices.len());
    let mut roughness = Vec::with_capacity(vertices.len());
    for (x, w) in vertices.iter().zip(&weights) {
        let mut c = [0.0; 3];
        let mut r = 0.0;
        for (b, &wk) in bones.iter().zip(w) {
            for ch in 0..3 {
                c[ch] += wk * b.color[ch];
            }
            r += wk * b.roughness;
        }
        let ripple = 0.1 * (6.0 * x[0] + 4.0 * x[2]).sin() * (5.0 * x[1]).cos();
        albedo.push(c.map(|v| (v + ripple).clamp(0.05, 0.95)));
        roughness.push(r);
    }
    let attributes = GtAttributes {
        opacity: 0.95,
        rotations: normals.iter().map(|&n| frame_quaternion(n)).collect(),
        scales: vec![[0.7 * spacing, 0.7 * spacing, 0.15 * spacing]; vertices.len()],
        albedo,
        roughness,
        visibility: [0.6, 0.4],
    };

    let skeleton = Skeleton::new(bones.iter().map(|b| b.parent).collect(), bones.iter().map(|b| b.pivot).collect())?;
    let amplitude = 0.05 * mean_bone_length(&skeleton) / 3.0;
    let wrinkles = (0..3)
        .map(|m| {
            let dir = normalize3([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .unwrap_or([1.0, 0.0, 0.0]);
            WrinkleTerm {
                joint: 1 + m % (joints - 1),
                axis: rng.gen_range(0..3),
                amplitude,
                wave: scale3(dir, rng.gen_range(12.0..20.0)),
                phase: rng.gen_range(0.0..2.0 * PI),
                alpha: 1.5,
                beta: 2.5,
                lag: 6,
            }
        })
        .collect();

    Ok(ArticulatedFigure { seed, bones, vertices, normals, weights, spacing, falloff, wrinkles, attributes })
}

fn farthest_points(cands: &[(Vec3, Vec3)], k: usize) -> Vec<usize> {
    if cands.is_empty() {
        return Vec::new();
    }
    let mut picked = vec![0];
    let mut dist: Vec<f64> = cands.iter().map(|c| norm3(sub3(c.0, cands[0].0))).collect();
    while picked.len() < k.min(cands.len()) {
        let (best, _) = dist.iter().enumerate().fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        picked.push(best);
        for (i, c) in cands.iter().enumerate() {
            dist[i] = dist[i].min(norm3(sub3(c.0, cands[best].0)));
        }
    }
    picked
}

fn mean_nearest(v: &[Vec3]) -> f64 {
    if v.len() < 2 {
        return 0.05;
    }
    let s: f64 = v
        .iter()
        .enumerate()
        .map(|(i, a)| {
            v.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| norm3(sub3(*a, *b)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    s / v.len() as f64
}

pub fn mean_bone_length(skeleton: &Skeleton) -> f64 {
    let l: Vec<f64> = (0..skeleton.joints())
        .filter_map(|k| skeleton.parents[k].map(|p| norm3(sub3(skeleton.pivots[k], skeleton.pivots[p]))))
        .collect();
    l.iter().sum::<f64>() / l.len().max(1) as f64
}

impl ArticulatedFigure {
    pub fn joints(&self) -> usize {
        self.bones.len()
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::new(self.bones.iter().map(|b| b.parent).collect(), self.bones.iter().map(|b| b.pivot).collect())
            .expect("figure skeleton is valid by construction")
    }

    /// Vertices, normals and weights as a model template.
    pub fn template(&self) -> Template {
        Template {
            vertices: self.vertices.clone(),
            normals: Some(self.normals.clone()),
            weights: Some(self.weights.clone()),
        }
    }

    /// Bone whose capsule surface is nearest to `x`.
    pub fn nearest_bone(&self, x: Vec3) -> usize {
        let d: Vec<f64> = self.bones.iter().map(|b| segment_distance(x, b.start, b.end) - b.radius).collect();
        (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap()
    }

    /// Ground-truth canonical displacement at frame `t`.
    pub fn wrinkle(&self, poses: &[Vec<Vec3>], t: usize) -> Vec<Vec3> {
        self.vertices
            .iter()
            .zip(&self.normals)
            .zip(&self.weights)
            .map(|((x, n), w)| {
                let mut s = 0.0;
                for term in &self.wrinkles {
                    let now = poses[t][term.joint][term.axis];
                    let past = poses[t.saturating_sub(term.lag)][term.joint][term.axis];
                    s += term.amplitude
                        * w[term.joint]
                        * (dot3(term.wave, *x) + term.phase).sin()
                        * (term.alpha * now + term.beta * past).sin();
                }
                scale3(*n, s)
            })
            .collect()
    }

    /// Total wrinkle bound, `Σ |a_m|`.
    pub fn wrinkle_bound(&self) -> f64 {
        self.wrinkles.iter().map(|w| w.amplitude.abs()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Smooth joint trajectories; every joint is at rest at frame 0.
pub fn generate_poses(joints: usize, frames: usize, seed: u64) -> Vec<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a5e);
    let mut comps: Vec<Vec<Vec<(f64, f64)>>> = Vec::with_capacity(joints);
    for k in 0..joints {
        let amp: [f64; 3] = match k {
            0 => [0.08, 0.08, 0.0],
            1 => [0.3, 0.2, 0.4],
            _ => [0.25, 0.7, 0.45],
        };
        comps.push(
            amp.iter()
                .map(|&a| {
                    (0..2)
                        .map(|m| {
                            let w = 2.0 * PI / rng.gen_range(25.0..70.0);
                            (a * if m == 0 { 0.7 } else { 0.3 }, w)
                        })
                        .collect()
                })
                .collect(),
        );
    }
    (0..frames)
        .map(|t| {
            let tf = t as f64;
            (0..joints)
                .map(|k| {
                    let mut aa = [0, 1, 2].map(|a| comps[k][a].iter().map(|(amp, w)| amp * (w * tf).sin()).sum::<f64>());
                    if k == 0 {
                        aa[2] = 2.8 * (2.0 * PI * tf / 200.0).sin();
                    }
                    aa
                })
                .collect()
        })
        .collect()
}

/// Sky gradient plus two colored lobes around `key` and `fill`.
pub fn lobe_probe(key: Vec3, key_rgb: Vec3, fill: Vec3, fill_rgb: Vec3, sky: Vec3) -> Result<EnvLightProbe> {
    let key = normalize3(key).ok_or_else(|| Error::invalid("zero key direction"))?;
    let fill = normalize3(fill).ok_or_else(|| Error::invalid("zero fill direction"))?;
    let probe = EnvLightProbe::from_fn(|d| {
        let up = 0.5 + 0.5 * d[2];
        let k = ((dot3(d, key) - 1.0) / 0.08).exp();
        let f = ((dot3(d, fill) - 1.0) / 0.2).exp();
        [0, 1, 2].map(|c| sky[c] * (0.3 + 0.7 * up) + key_rgb[c] * k + fill_rgb[c] * f)
    })?;
    EnvLightProbe::from_image(&probe.to_image().quantized_f32())
}

/// Probe used to render the training data.
pub fn training_probe() -> EnvLightProbe {
    lobe_probe([-0.6, -1.0, 1.0], [4.0, 3.4, 2.6], [1.0, -0.5, 0.2], [0.5, 0.7, 1.2], [0.55, 0.6, 0.7]).unwrap()
}

/// Held-out probe for relighting.
pub fn heldout_probe() -> EnvLightProbe {
    lobe_probe([0.8, -0.6, 0.6], [1.5, 2.6, 4.2], [-1.0, 0.3, -0.1], [1.2, 0.6, 0.3], [0.7, 0.6, 0.5]).unwrap()
}

/// Rig of `count` cameras evenly spaced on a horizontal ring, camera 0 in front (−y).
pub fn camera_ring(count: usize, radius: f64, height: f64, focal: f64, size: usize) -> Result<Vec<Camera>> {
    (0..count)
        .map(|c| {
            let a = -PI / 2.0 + 2.0 * PI * c as f64 / count as f64;
            let eye = [radius * a.cos(), radius * a.sin(), height];
            Camera::look_at(eye, [0.0, 0.0, height], [0.0, 0.0, 1.0], focal, size, size)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub joints: usize,
    pub frames: usize,
    pub cameras: usize,
    pub samples: usize,
    pub image_size: usize,
    pub focal: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Whether the pose-dependent wrinkle field is applied.
    pub wrinkles: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            joints: 4,
            frames: 200,
            cameras: 4,
            samples: 500,
            image_size: 64,
            focal: 95.0,
            camera_radius: 3.0,
            camera_height: 1.25,
            wrinkles: true,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// One camera's view of one frame, values quantized to `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera: usize,
    pub rgb: Image,
    pub normal: Image,
    pub alpha: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub spec: SceneSpec,
    pub figure: ArticulatedFigure,
    pub poses: Vec<Vec<Vec3>>,
    pub cameras: Vec<Camera>,
    pub probe: EnvLightProbe,
    pub heldout_probe: EnvLightProbe,
    /// Indexed by `t · C + c`.
    pub records: Vec<FrameRecord>,
}

/// Ground-truth Gaussians posed at frame `t`.
pub struct GtFrame {
    pub means: Tensor,
    pub covariances: Tensor,
    pub normals: Tensor,
}

/// Visibility coefficients encoding `a + b (n · ω)` for each posed normal.
pub fn visibility_coefficients(normals: &Tensor, ab: [f64; 2]) -> Tensor {
    let n = normals.rows();
    let mut data = vec![0.0; n * SH_COEFFS];
    for i in 0..n {
        let r = normals.row(i);
        let v = &mut data[i * SH_COEFFS..(i + 1) * SH_COEFFS];
        v[0] = ab[0] / SH_C0;
        v[1] = ab[1] * r[1] / SH_C1;
        v[2] = ab[1] * r[2] / SH_C1;
        v[3] = ab[1] * r[0] / SH_C1;
    }
    Tensor::matrix(n, SH_COEFFS, data).unwrap()
}

impl ArticulatedFigure {
    fn gt_posed(&self, tape: &mut Tape, poses: &[Vec<Vec3>], t: usize, wrinkles: bool) -> Result<PosedVars> {
        let joints: JointTransformSet = self.skeleton().forward_kinematics(&poses[t])?;
        let w = Tensor::matrix(
            self.vertices.len(),
            self.joints(),
            self.weights.iter().flatten().copied().collect(),
        )
        .unwrap();
        let w = tape.constant(w);
        let jt = tape.constant(joints.to_tensor());
        let x = tape.constant(Tensor::from_rows(&self.vertices));
        let dx = wrinkles.then(|| tape.constant(Tensor::from_rows(&self.wrinkle(poses, t))));
        let q = tape.constant(Tensor::from_rows(&self.attributes.rotations));
        let s = tape.constant(Tensor::from_rows(&self.attributes.scales));
        let n = tape.constant(Tensor::from_rows(&self.normals));
        let posed = deform(tape, w, jt, x, dx, q, None, s, n)?;
        let count = self.vertices.len();
        let vis = visibility_coefficients(tape.value(posed.normals), self.attributes.visibility);
        Ok(PosedVars {
            blend: posed.blend,
            weights: w,
            means: posed.means,
            covariances: posed.covariances,
            normals: posed.normals,
            opacity: tape.constant(Tensor::full(vec![count, 1], self.attributes.opacity)),
            color: None,
            albedo: tape.constant(Tensor::from_rows(&self.attributes.albedo)),
            roughness: tape.constant(Tensor::matrix(count, 1, self.attributes.roughness.clone()).unwrap()),
            visibility: tape.constant(vis),
        })
    }

    /// Ground-truth Gaussians in observation space.
    pub fn pose_gt(&self, poses: &[Vec<Vec3>], t: usize, wrinkles: bool) -> Result<GtFrame> {
        let mut tape = Tape::new();
        let p = self.gt_posed(&mut tape, poses, t, wrinkles)?;
        Ok(GtFrame {
            means: tape.value(p.means).clone(),
            covariances: tape.value(p.covariances).clone(),
            normals: tape.value(p.normals).clone(),
        })
    }

    /// Renders `(rgb, normal, alpha)`; `probe = None` splats albedo instead of shading.
    pub fn render(
        &self,
        poses: &[Vec<Vec3>],
        t: usize,
        camera: &Camera,
        probe: Option<&EnvLightProbe>,
        wrinkles: bool,
    ) -> Result<RenderedImage> {
        let mut tape = Tape::new();
        let p = self.gt_posed(&mut tape, poses, t, wrinkles)?;
        let rgb = match probe {
            Some(probe) => {
                let rad = tape.constant(Tensor::matrix(
                    probe.radiance().len(),
                    3,
                    probe.radiance().iter().flatten().copied().collect(),
                )?);
                shade_posed(&mut tape, camera, DEFAULT_F0_GT, &p, rad)?
            }
            None => p.albedo,
        };
        let cam = Arc::new(camera.clone());
        let out = splat_rgb_normal(&mut tape, &cam, p.means, p.covariances, p.opacity, rgb, p.normals)?;
        Ok(RenderedImage::from_tensor(camera, tape.value(out)))
    }
}

const DEFAULT_F0_GT: f64 = crate::pbr::DEFAULT_F0;

/// Splits a `(rgb, normal)` render into quantized record images.
pub fn record_from_render(frame: usize, camera: usize, r: &RenderedImage) -> FrameRecord {
    FrameRecord {
        frame,
        camera,
        rgb: r.color.select(0..3).quantized_f32(),
        normal: r.color.select(3..6).quantized_f32(),
        alpha: r.alpha.quantized_f32(),
    }
}

/// Renders the full multi-view sequence for `spec`.
pub fn generate_sequence(spec: &SceneSpec) -> Result<SceneDataset> {
    if spec.cameras < 2 {
        return Err(Error::invalid("a sequence needs at least 2 cameras"));
    }
    if spec.frames == 0 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    let figure = generate_figure_with(spec.seed, spec.joints, spec.samples)?;
    let poses = generate_poses(spec.joints, spec.frames, spec.seed);
    let cameras = camera_ring(spec.cameras, spec.camera_radius, spec.camera_height, spec.focal, spec.image_size)?;
    let probe = training_probe();
    let mut records = Vec::with_capacity(spec.frames * spec.cameras);
    for t in 0..spec.frames {
        for (c, cam) in cameras.iter().enumerate() {
            let r = figure.render(&poses, t, cam, Some(&probe), spec.wrinkles)?;
            records.push(record_from_render(t, c, &r));
        }
    }
    Ok(SceneDataset {
        spec: spec.clone(),
        figure,
        poses,
        cameras,
        probe,
        heldout_probe: heldout_probe(),
        records,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    scene: SceneSpec,
    frame_count: usize,
    image_count: usize,
    training_camera: usize,
    training_frames: usize,
    files: Files,
}

#[derive(Debug, Serialize, Deserialize)]
struct Files {
    poses: String,
    cameras: String,
    probe: String,
    heldout_probe: String,
    figure: String,
    frames: String,
}

pub const MANIFEST: &str = "manifest.toml";

impl SceneDataset {
    pub fn record(&self, frame: usize, camera: usize) -> &FrameRecord {
        &self.records[frame * self.cameras.len() + camera]
    }

    /// Frames used for training: the first 4/5 of the sequence.
    pub fn training_frames(&self) -> usize {
        (self.poses.len() * 4) / 5
    }

    pub fn training_camera(&self) -> usize {
        0
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let manifest = Manifest {
            format: "avatar-scene 1".into(),
            scene: self.spec.clone(),
            frame_count: self.poses.len(),
            image_count: self.records.len(),
            training_camera: self.training_camera(),
            training_frames: self.training_frames(),
            files: Files {
                poses: "poses.txt".into(),
                cameras: "cameras.txt".into(),
                probe: "probe.pfm".into(),
                heldout_probe: "probe_heldout.pfm".into(),
                figure: "figure.toml".into(),
                frames: "frames/NNNN_{rgb,normal,alpha}.pfm, NNNN = frame * cameras + camera".into(),
            },
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
        write_atomic(&dir.join("poses.txt"), format_poses(&self.poses).as_bytes())?;
        write_atomic(&dir.join("cameras.txt"), format_cameras(&self.cameras).as_bytes())?;
        self.probe.save(&dir.join("probe.pfm"))?;
        self.heldout_probe.save(&dir.join("probe_heldout.pfm"))?;
        self.figure.save(&dir.join("figure.toml"))?;
        for (i, r) in self.records.iter().enumerate() {
            write_pfm(&frame_path(dir, i, "rgb"), &r.rgb)?;
            write_pfm(&frame_path(dir, i, "normal"), &r.normal)?;
            write_pfm(&frame_path(dir, i, "alpha"), &r.alpha)?;
        }
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let poses = read_poses(&dir.join(&manifest.files.poses))?;
        let cpath = dir.join(&manifest.files.cameras);
        let ctext = std::fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let cameras = parse_cameras(&ctext).map_err(|d| Error::format(&cpath, d))?;
        let probe = EnvLightProbe::load(&dir.join(&manifest.files.probe))?;
        let heldout_probe = EnvLightProbe::load(&dir.join(&manifest.files.heldout_probe))?;
        let figure = ArticulatedFigure::load(&dir.join(&manifest.files.figure))?;
        if poses.len() != manifest.frame_count {
            return Err(Error::format(&mpath, format!("manifest lists {} frames, poses file has {}", manifest.frame_count, poses.len())));
        }
        if cameras.len() * poses.len() != manifest.image_count {
            return Err(Error::format(&mpath, "image count does not match frames × cameras"));
        }
        if poses.first().is_some_and(|p| p.len() != figure.joints()) {
            return Err(Error::format(&mpath, "pose joint count differs from the figure"));
        }
        let mut records = Vec::with_capacity(manifest.image_count);
        for i in 0..manifest.image_count {
            let rgb = read_pfm(&frame_path(dir, i, "rgb"))?;
            let normal = read_pfm(&frame_path(dir, i, "normal"))?;
            let alpha = read_pfm(&frame_path(dir, i, "alpha"))?;
            let cam = &cameras[i % cameras.len()];
            for (img, ch, what) in [(&rgb, 3, "rgb"), (&normal, 3, "normal"), (&alpha, 1, "alpha")] {
                if img.width() != cam.width || img.height() != cam.height || img.channels() != ch {
                    return Err(Error::format(frame_path(dir, i, what), "image size does not match its camera"));
                }
            }
            records.push(FrameRecord { frame: i / cameras.len(), camera: i % cameras.len(), rgb, normal, alpha });
        }
        Ok(Self { spec: manifest.scene, figure, poses, cameras, probe, heldout_probe, records })
    }
}

pub fn frame_path(dir: &Path, index: usize, kind: &str) -> PathBuf {
    dir.join("frames").join(format!("{index:04}_{kind}.pfm"))
}

/// One camera per line: `width height fx fy cx cy r00 … r22 t0 t1 t2`.
pub fn format_cameras(cams: &[Camera]) -> String {
    let mut s = format!("# {} cameras: width height fx fy cx cy rotation(row-major 9) translation(3)\n", cams.len());
    for c in cams {
        let mut vals = vec![c.fx, c.fy, c.cx, c.cy];
        vals.extend(c.rotation.iter().flatten());
        vals.extend(c.translation);
        let nums: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{} {} {}", c.width, c.height, nums.join(" "));
    }
    s
}

pub fn parse_cameras(text: &str) -> std::result::Result<Vec<Camera>, String> {
    let mut cams = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 18 {
            return Err(format!("line {}: expected 18 fields, got {}", i + 1, f.len()));
        }
        let w: usize = f[0].parse().map_err(|_| format!("line {}: bad width", i + 1))?;
        let h: usize = f[1].parse().map_err(|_| format!("line {}: bad height", i + 1))?;
        let v: Vec<f64> = f[2..]
            .iter()
            .map(|x| x.parse().map_err(|_| format!("line {}: bad number {x:?}", i + 1)))
            .collect::<std::result::Result<_, _>>()?;
        let rot = [[v[4], v[5], v[6]], [v[7], v[8], v[9]], [v[10], v[11], v[12]]];
        let cam = Camera::new(rot, [v[13], v[14], v[15]], [v[0], v[1], v[2], v[3]], w, h)
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        cams.push(cam);
    }
    if cams.is_empty() {
        return Err("no cameras".into());
    }
    Ok(cams)
}

/// SHA-256 over the little-endian bits of every sample.
pub fn image_checksum(images: &[&Image]) -> String {
    let mut h = Sha256::new();
    for img in images {
        for v in img.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl SceneDataset {
    pub fn checksum(&self) -> String {
        let imgs: Vec<&Image> = self.records.iter().flat_map(|r| [&r.rgb, &r.normal, &r.alpha]).collect();
        image_checksum(&imgs)
    }
}
