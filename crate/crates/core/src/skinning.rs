//! Forward kinematics, pose windows, the pose-conditioned skinning field and
//! linear blend skinning of Gaussians.

use std::fmt::Write as _;
use std::path::Path;

use avatar_tensor::geometry::{axis_angle_matrix, mat_mul, mat_vec, norm3, sub3, Mat3, Vec3};
use avatar_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::KernelTape;
use crate::nn::{init_linear, linear, Mlp};
use crate::params::{Bound, ParamSet};

/// Bone hierarchy with rest-pose joint pivots in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub parents: Vec<Option<usize>>,
    pub pivots: Vec<Vec3>,
}

impl Skeleton {
    pub fn new(parents: Vec<Option<usize>>, pivots: Vec<Vec3>) -> Result<Self> {
        if parents.len() != pivots.len() || parents.is_empty() {
            return Err(Error::invalid("skeleton needs one pivot per joint"));
        }
        for (k, p) in parents.iter().enumerate() {
            if matches!(p, Some(q) if *q >= k) {
                return Err(Error::invalid(format!("joint {k} must come after its parent")));
            }
        }
        Ok(Self { parents, pivots })
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// Per-joint rest-to-posed rigid transforms for local axis-angle rotations.
    pub fn forward_kinematics(&self, pose: &[Vec3]) -> Result<JointTransformSet> {
        if pose.len() != self.joints() {
            return Err(Error::invalid(format!("pose has {} joints, skeleton {}", pose.len(), self.joints())));
        }
        let mut rotations: Vec<Mat3> = Vec::with_capacity(pose.len());
        let mut translations: Vec<Vec3> = Vec::with_capacity(pose.len());
        for (k, aa) in pose.iter().enumerate() {
            let rk = axis_angle_matrix(*aa);
            let p = self.pivots[k];
            let rp = mat_vec(&rk, p);
            let local_t = sub3(p, rp);
            let (r, t) = match self.parents[k] {
                None => (rk, local_t),
                Some(q) => {
                    let r = mat_mul(&rotations[q], &rk);
                    let lt = mat_vec(&rotations[q], local_t);
                    (r, [lt[0] + translations[q][0], lt[1] + translations[q][1], lt[2] + translations[q][2]])
                }
            };
            rotations.push(r);
            translations.push(t);
        }
        Ok(JointTransformSet { rotations, translations })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTransformSet {
    pub rotations: Vec<Mat3>,
    pub translations: Vec<Vec3>,
}

impl JointTransformSet {
    pub fn identity(joints: usize) -> Self {
        Self {
            rotations: vec![avatar_tensor::geometry::IDENTITY3; joints],
            translations: vec![[0.0; 3]; joints],
        }
    }

    pub fn joints(&self) -> usize {
        self.rotations.len()
    }

    /// `J × 12` rows of row-major 3×4 matrices.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.joints() * 12);
        for (r, t) in self.rotations.iter().zip(&self.translations) {
            for i in 0..3 {
                data.extend_from_slice(&r[i]);
                data.push(t[i]);
            }
        }
        Tensor::new(vec![self.joints(), 12], data).unwrap()
    }

    pub fn apply(&self, k: usize, x: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotations[k], x);
        [r[0] + self.translations[k][0], r[1] + self.translations[k][1], r[2] + self.translations[k][2]]
    }
}

/// `A = Σ_k W_k [R_k | t_k]`, without re-orthonormalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendedTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub fn blend_transforms(weights: &[f64], joints: &JointTransformSet) -> Result<BlendedTransform> {
    if weights.len() != joints.joints() {
        return Err(Error::invalid("weight row length differs from joint count"));
    }
    let mut rotation = [[0.0; 3]; 3];
    let mut translation = [0.0; 3];
    for (k, &w) in weights.iter().enumerate() {
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] += w * joints.rotations[k][i][j];
            }
            translation[i] += w * joints.translations[k][i];
        }
    }
    Ok(BlendedTransform { rotation, translation })
}

/// `d` consecutive poses, oldest first, each `J` axis-angle vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    frames: Vec<Vec<Vec3>>,
}

impl PoseSequence {
    pub fn new(frames: Vec<Vec<Vec3>>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid(format!("pose window needs d >= 2, got {}", frames.len())));
        }
        let j = frames[0].len();
        if j == 0 || frames.iter().any(|f| f.len() != j) {
            return Err(Error::invalid("every frame of a pose window needs the same nonzero joint count"));
        }
        if frames.iter().flatten().any(|aa| !(norm3(*aa) < 2.0 * std::f64::consts::PI)) {
            return Err(Error::invalid("axis-angle magnitudes must be finite and below 2π"));
        }
        Ok(Self { frames })
    }

    /// Window of `d` frames ending at `t`, repeating frame 0 before the start.
    pub fn window(poses: &[Vec<Vec3>], t: usize, d: usize) -> Result<Self> {
        if t >= poses.len() {
            return Err(Error::invalid(format!("frame {t} out of range ({} frames)", poses.len())));
        }
        let frames = (0..d).map(|k| poses[(t + k + 1).saturating_sub(d)].clone()).collect();
        Self::new(frames)
    }

    pub fn zeros(d: usize, joints: usize) -> Self {
        Self { frames: vec![vec![[0.0; 3]; joints]; d] }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frames(&self) -> &[Vec<Vec3>] {
        &self.frames
    }

    pub fn current(&self) -> &[Vec3] {
        self.frames.last().unwrap()
    }

    pub fn previous(&self) -> &[Vec3] {
        &self.frames[self.frames.len() - 2]
    }

    pub fn frames_mut(&mut self) -> &mut [Vec<Vec3>] {
        &mut self.frames
    }
}

/// Reads a pose file: header `J frames`, then one line of `3J` radians per frame.
pub fn read_poses(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text).map_err(|d| Error::format(path, d))
}

pub fn parse_poses(text: &str) -> std::result::Result<Vec<Vec<Vec3>>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty pose file")?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| format!("bad header {header:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let [j, n] = h[..] else { return Err(format!("header must be `J frames`, got {header:?}")) };
    let mut poses = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| format!("frame {i}: bad number {v:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != 3 * j {
            return Err(format!("frame {i}: expected {} values, got {}", 3 * j, vals.len()));
        }
        poses.push(vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
    }
    if poses.len() != n {
        return Err(format!("header promises {n} frames, found {}", poses.len()));
    }
    Ok(poses)
}

pub fn format_poses(poses: &[Vec<Vec3>]) -> String {
    let j = poses.first().map_or(0, Vec::len);
    let mut s = format!("{j} {}\n", poses.len());
    for p in poses {
        let row: Vec<String> = p.iter().flatten().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Pose-sequence-conditioned skinning weights.
///
/// Temporal path: per joint, the `d` axis-angle tokens are embedded, self-attend
/// over time, and the newest token becomes the joint feature. Spatial path:
/// per-joint differences `θ_t − θ_{t−1}` self-attend across joints. Each
/// path is read by a cross-attention whose query is the position feature
/// `f_x`, with `f_x` added back. A small head maps `[f_t, f_s]` to `J` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningField {
    pub joints: usize,
    pub window: usize,
    pub width: usize,
    pub position: Mlp,
    pub head: Mlp,
}

/// Keys and values the pose encoder hands to the per-Gaussian cross-attention.
pub struct PoseCode {
    pub temporal_k: Var,
    pub temporal_v: Var,
    pub spatial_k: Var,
    pub spatial_v: Var,
}

impl SkinningField {
    pub fn new(joints: usize, window: usize, width: usize, pe_width: usize) -> Self {
        Self {
            joints,
            window,
            width,
            position: Mlp::new("skin.fx", vec![pe_width, width, width]),
            head: Mlp::new("skin.head", vec![2 * width, width, joints]),
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let (j, d, w) = (self.joints, self.window, self.width);
        self.position.init(params, rng, 1.0);
        self.head.init(params, rng, 0.1);
        for p in ["skin.t_embed", "skin.s_embed"] {
            init_linear(params, rng, p, 3, w, true);
        }
        for p in ["skin.t_q", "skin.t_k", "skin.t_v", "skin.tc_q", "skin.tc_k", "skin.tc_v"] {
            init_linear(params, rng, p, w, w, false);
        }
        for p in ["skin.s_q", "skin.s_k", "skin.s_v", "skin.sc_q", "skin.sc_k", "skin.sc_v"] {
            init_linear(params, rng, p, w, w, false);
        }
        let mut emb = |name: &str, rows: usize| {
            let data = (0..rows * w).map(|_| rng.gen_range(-0.5..0.5)).collect();
            params.insert(name, Tensor::matrix(rows, w, data).unwrap());
        };
        emb("skin.t_time", d);
        emb("skin.t_joint", j);
        emb("skin.s_joint", j);
    }

    /// Zeroes the head so that weights start uniform (or equal to the prior).
    pub fn zero_head(&self, params: &mut ParamSet) {
        self.head.zero_output(params);
    }

    fn check(&self, seq: &PoseSequence) -> Result<()> {
        if seq.joints() != self.joints || seq.len() != self.window {
            return Err(Error::invalid(format!(
                "pose window is {}×{}, field expects {}×{}",
                seq.len(),
                seq.joints(),
                self.window,
                self.joints
            )));
        }
        Ok(())
    }

    pub fn position_feature(&self, tape: &mut Tape, bound: &Bound, pe: Var) -> Result<Var> {
        self.position.forward(tape, bound, pe)
    }

    /// Joint tokens after temporal self-attention, `J × width`.
    pub fn temporal_tokens(&self, tape: &mut Tape, bound: &Bound, seq: &PoseSequence) -> Result<Var> {
        self.check(seq)?;
        let (j, d) = (self.joints, self.window);
        let mut raw = Vec::with_capacity(j * d * 3);
        for k in 0..j {
            for frame in seq.frames() {
                raw.extend_from_slice(&frame[k]);
            }
        }
        let tokens = tape.constant(Tensor::matrix(j * d, 3, raw).unwrap());
        let e = linear(tape, bound, "skin.t_embed", tokens)?;
        let time = tape.gather_rows(bound.var("skin.t_time")?, (0..j * d).map(|r| r % d).collect())?;
        let joint = tape.gather_rows(bound.var("skin.t_joint")?, (0..j * d).map(|r| r / d).collect())?;
        let e = tape.add(e, time)?;
        let e = tape.add(e, joint)?;
        let q = linear(tape, bound, "skin.t_q", e)?;
        let k = linear(tape, bound, "skin.t_k", e)?;
        let v = linear(tape, bound, "skin.t_v", e)?;
        let att = tape.grouped_attention(q, k, v, j)?;
        let h = tape.add(e, att)?;
        Ok(tape.gather_rows(h, (0..j).map(|k| k * d + d - 1).collect())?)
    }

    /// Joint tokens after spatial self-attention over `θ_t − θ_{t−1}`.
    pub fn spatial_tokens(&self, tape: &mut Tape, bound: &Bound, current: &[Vec3], previous: &[Vec3]) -> Result<Var> {
        if current.len() != self.joints || previous.len() != self.joints {
            return Err(Error::invalid(format!(
                "spatial path expects {} joints, got {} and {}",
                self.joints,
                current.len(),
                previous.len()
            )));
        }
        let diff: Vec<f64> = current.iter().zip(previous).flat_map(|(a, b)| sub3(*a, *b)).collect();
        let tokens = tape.constant(Tensor::matrix(self.joints, 3, diff).unwrap());
        let e = linear(tape, bound, "skin.s_embed", tokens)?;
        let e = tape.add(e, bound.var("skin.s_joint")?)?;
        let q = linear(tape, bound, "skin.s_q", e)?;
        let k = linear(tape, bound, "skin.s_k", e)?;
        let v = linear(tape, bound, "skin.s_v", e)?;
        let att = tape.attention(q, k, v)?;
        Ok(tape.add(e, att)?)
    }

    /// Everything that depends on the pose but not on the Gaussians.
    pub fn encode_pose(&self, tape: &mut Tape, bound: &Bound, seq: &PoseSequence) -> Result<PoseCode> {
        let t = self.temporal_tokens(tape, bound, seq)?;
        let s = self.spatial_tokens(tape, bound, seq.current(), seq.previous())?;
        Ok(PoseCode {
            temporal_k: linear(tape, bound, "skin.tc_k", t)?,
            temporal_v: linear(tape, bound, "skin.tc_v", t)?,
            spatial_k: linear(tape, bound, "skin.sc_k", s)?,
            spatial_v: linear(tape, bound, "skin.sc_v", s)?,
        })
    }

    fn cross(&self, tape: &mut Tape, bound: &Bound, q_name: &str, fx: Var, k: Var, v: Var) -> Result<Var> {
        let q = linear(tape, bound, q_name, fx)?;
        let att = tape.attention(q, k, v)?;
        Ok(tape.add(fx, att)?)
    }

    /// `f_t`: position features reading the temporal joint tokens.
    pub fn temporal_feature(&self, tape: &mut Tape, bound: &Bound, seq: &PoseSequence, fx: Var) -> Result<Var> {
        let t = self.temporal_tokens(tape, bound, seq)?;
        let k = linear(tape, bound, "skin.tc_k", t)?;
        let v = linear(tape, bound, "skin.tc_v", t)?;
        self.cross(tape, bound, "skin.tc_q", fx, k, v)
    }

    /// `f_s`: position features reading the joint-difference tokens.
    pub fn spatial_feature(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        current: &[Vec3],
        previous: &[Vec3],
        fx: Var,
    ) -> Result<Var> {
        let s = self.spatial_tokens(tape, bound, current, previous)?;
        let k = linear(tape, bound, "skin.sc_k", s)?;
        let v = linear(tape, bound, "skin.sc_v", s)?;
        self.cross(tape, bound, "skin.sc_q", fx, k, v)
    }

    /// Skinning weights `N × J`; `log_prior` (if any) is added to the logits.
    pub fn weights(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pe: Var,
        seq: &PoseSequence,
        log_prior: Option<Var>,
    ) -> Result<Var> {
        let fx = self.position_feature(tape, bound, pe)?;
        let code = self.encode_pose(tape, bound, seq)?;
        let ft = self.cross(tape, bound, "skin.tc_q", fx, code.temporal_k, code.temporal_v)?;
        let fs = self.cross(tape, bound, "skin.sc_q", fx, code.spatial_k, code.spatial_v)?;
        let f = tape.concat_cols(&[ft, fs])?;
        let mut logits = self.head.forward(tape, bound, f)?;
        if let Some(p) = log_prior {
            logits = tape.add(logits, p)?;
        }
        Ok(tape.softmax(logits)?)
    }
}

/// Layer sizes that determine the pose-encoder cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub joints: usize,
    pub width: usize,
}

/// Multiply-adds of [`SkinningField::encode_pose`] for window length `d`.
///
/// The per-Gaussian part (position MLP, query projections, head) does not
/// depend on `d` and is left out.
pub fn encoder_flops(d: usize, dims: EncoderDims) -> u64 {
    let (j, w) = (dims.joints as u64, dims.width as u64);
    let d = d as u64;
    let temporal = j * d * 3 * w + 3 * j * d * w * w + j * d * d * 2 * w;
    let spatial = j * 3 * w + 3 * j * w * w + j * j * 2 * w;
    let cross_kv = 2 * 2 * j * w * w;
    temporal + spatial + cross_kv
}

/// Non-rigid offsets `(Δx, Δr)` from position encoding and the current pose.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub mlp: Mlp,
    /// Per-component bound on `Δx`.
    pub cap: f64,
}

impl OffsetField {
    pub fn new(pe_width: usize, joints: usize, width: usize, cap: f64) -> Self {
        Self { mlp: Mlp::new("offset", vec![pe_width + 3 * joints, width, width, 7]), cap }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.mlp.init(params, rng, 0.01);
    }

    /// Network input: positional encoding with the flattened pose appended to every row.
    pub fn input(pe: &Tensor, pose: &[Vec3]) -> Tensor {
        let flat: Vec<f64> = pose.iter().flatten().copied().collect();
        let w = pe.cols() + flat.len();
        let mut data = Vec::with_capacity(pe.rows() * w);
        for r in 0..pe.rows() {
            data.extend_from_slice(pe.row(r));
            data.extend_from_slice(&flat);
        }
        Tensor::matrix(pe.rows(), w, data).unwrap()
    }

    /// `(Δx, Δr)` as `N×3` and `N×4`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<(Var, Var)> {
        let raw = self.mlp.forward(tape, bound, input)?;
        let dx = tape.slice_cols(raw, 0..3)?;
        let dx = tape.tanh(dx)?;
        let dx = tape.scale(dx, self.cap)?;
        let dr = tape.slice_cols(raw, 3..7)?;
        Ok((dx, dr))
    }
}

/// Posed Gaussians on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Posed {
    pub blend: Var,
    pub means: Var,
    pub covariances: Var,
    pub normals: Var,
}

/// Linear blend skinning of canonical Gaussians.
///
/// `x′ = A_R (x_c + Δx) + A_T`, `Σ′ = A_R Σ(r_c + Δr, s) A_Rᵀ`,
/// `n̂ = normalize(A_R n_c)` with `A = W · [R_k | t_k]`.
#[allow(clippy::too_many_arguments)]
pub fn deform(
    tape: &mut Tape,
    weights: Var,
    joints: Var,
    positions: Var,
    dx: Option<Var>,
    rotations: Var,
    dr: Option<Var>,
    scales: Var,
    normals: Var,
) -> Result<Posed> {
    let blend = tape.matmul(weights, joints)?;
    let x = match dx {
        Some(d) => tape.add(positions, d)?,
        None => positions,
    };
    let means = tape.lbs_points(blend, x)?;
    let q = match dr {
        Some(d) => tape.add(rotations, d)?,
        None => rotations,
    };
    let cov = tape.covariance(q, scales)?;
    let covariances = tape.congruence(blend, cov)?;
    let rotated = tape.lbs_rotate(blend, normals, false)?;
    let normals = tape.normalize_rows(rotated)?;
    Ok(Posed { blend, means, covariances, normals })
}
