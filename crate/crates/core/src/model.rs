//! Canonical-space Gaussian avatar: attribute encoders, posing and rendering.
//!
//! Parameters live in one [`ParamSet`] under these prefixes:
//! `geo` (opacity, rotation, scale, normal), `color` (view-dependent SH color),
//! `material` (albedo, roughness), `visibility`, `skin`, `offset`, `probe`.

use std::sync::Arc;

use avatar_tensor::geometry::{norm3, normalize3, sub3, Vec3};
use avatar_tensor::{softplus_inverse, Tape, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelTape;
use crate::nn::{encoding_width, positional_encoding, Mlp};
use crate::params::{Bound, ParamSet};
use crate::pbr::{ShadeTape, DEFAULT_F0};
use crate::raster::{Camera, RasterTape};
use crate::sh::{EnvLightProbe, PROBE_TEXELS, SH_COEFFS};
use crate::skinning::{deform, JointTransformSet, OffsetField, PoseSequence, Skeleton, SkinningField};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Geometry head layout: opacity logit, raw quaternion, raw scale, normal residual.
pub const GEO_OUT: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub octaves: usize,
    pub encoder_width: usize,
    /// Linear layers per attribute encoder.
    pub encoder_layers: usize,
    pub visibility_width: usize,
    pub skin_width: usize,
    /// Pose window length `d`.
    pub window: usize,
    /// `Δx` bound as a fraction of the mean bone length.
    pub offset_cap: f64,
    /// Scale bound as a fraction of the template bounding-box diagonal.
    pub scale_cap: f64,
    pub f0: f64,
    /// When false the skinning field sees an all-zero pose window.
    pub dynamic_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            octaves: 6,
            encoder_width: 128,
            encoder_layers: 4,
            visibility_width: 64,
            skin_width: 64,
            window: 10,
            offset_cap: 0.05,
            scale_cap: 0.1,
            f0: DEFAULT_F0,
            dynamic_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.encoder_layers < 1 || self.encoder_width == 0 || self.skin_width == 0 || self.visibility_width == 0 {
            return bad("network widths and depths must be positive");
        }
        if self.window < 2 {
            return bad("pose window must be at least 2");
        }
        if !(self.offset_cap >= 0.0 && self.scale_cap > 0.0 && self.f0 >= 0.0 && self.f0 <= 1.0) {
            return bad("offset_cap >= 0, scale_cap > 0 and f0 in [0, 1] required");
        }
        Ok(())
    }

    pub fn pe_width(&self) -> usize {
        encoding_width(3, self.octaves)
    }

    fn hidden(&self, input: usize, output: usize, width: usize, layers: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(width).take(layers.saturating_sub(1)));
        dims.push(output);
        dims
    }
}

/// Template surface the avatar is initialized from.
#[derive(Clone, Debug, Default)]
pub struct Template {
    pub vertices: Vec<Vec3>,
    /// Optional outward normals; radial directions are used otherwise.
    pub normals: Option<Vec<Vec3>>,
    /// Optional template skinning weights `N × J`, used as a logit prior.
    pub weights: Option<Vec<Vec<f64>>>,
}

impl Template {
    pub fn from_vertices(vertices: Vec<Vec3>) -> Self {
        Self { vertices, ..Self::default() }
    }
}

/// Which per-Gaussian color is splatted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// View-dependent SH color (stage 1).
    ShColor,
    /// Shaded with the light probe (stage 2).
    Pbr,
    Albedo,
}

/// Decoded geometry on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GeometryVars {
    pub opacity: Var,
    /// Unnormalized quaternion; consumers normalize.
    pub rotation: Var,
    pub scale: Var,
    pub normal: Var,
}

/// Decoded appearance on the tape. `color` is absent once removed.
#[derive(Clone, Copy, Debug)]
pub struct AppearanceVars {
    pub color: Option<Var>,
    pub albedo: Var,
    pub roughness: Var,
}

/// Gaussians in observation space for one frame.
#[derive(Clone, Copy, Debug)]
pub struct PosedVars {
    pub blend: Var,
    pub weights: Var,
    pub means: Var,
    pub covariances: Var,
    pub normals: Var,
    pub opacity: Var,
    pub color: Option<Var>,
    pub albedo: Var,
    pub roughness: Var,
    pub visibility: Var,
}

/// Plain-valued decoded attributes, for inspection and invariant checks.
#[derive(Clone, Debug)]
pub struct DecodedAttributes {
    pub opacity: Vec<f64>,
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    pub color: Option<Tensor>,
    pub albedo: Vec<Vec3>,
    pub roughness: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GaussianAvatar {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    positions: Tensor,
    encoding: Tensor,
    prior_normals: Tensor,
    log_prior: Option<Tensor>,
    scale_limit: f64,
    pub params: ParamSet,
    geo: Mlp,
    color: Mlp,
    material: Mlp,
    visibility: Mlp,
    skin: SkinningField,
    offsets: OffsetField,
}

fn rows_tensor(rows: &[Vec3]) -> Tensor {
    Tensor::from_rows(rows)
}

impl GaussianAvatar {
    /// Places one Gaussian on each template vertex and initializes every
    /// encoder from `seed`.
    pub fn init_from_template(template: &Template, skeleton: Skeleton, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let verts = &template.vertices;
        if verts.is_empty() {
            return Err(Error::invalid("template has no vertices"));
        }
        if verts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("template vertices must be finite"));
        }
        let n = verts.len();
        let j = skeleton.joints();

        let mut lo = verts[0];
        let mut hi = verts[0];
        for v in verts {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max).max(1e-6);
        // A degenerate (single point) template gets a unit extent.
        let diag = norm3(sub3(hi, lo));
        let diag = if diag > 1e-6 { diag } else { 1.0 };
        let scale_limit = config.scale_cap * diag;

        let normalized: Vec<Vec3> = verts.iter().map(|v| [0, 1, 2].map(|a| (v[a] - center[a]) / half)).collect();
        let encoding = positional_encoding(&rows_tensor(&normalized), config.octaves);

        let prior: Vec<Vec3> = match &template.normals {
            Some(ns) if ns.len() == n => ns
                .iter()
                .map(|v| normalize3(*v).ok_or_else(|| Error::invalid("template normal is zero")))
                .collect::<Result<_>>()?,
            Some(ns) => return Err(Error::invalid(format!("{} normals for {n} vertices", ns.len()))),
            None => verts.iter().map(|v| normalize3(sub3(*v, center)).unwrap_or([0.0, 0.0, 1.0])).collect(),
        };

        let log_prior = match &template.weights {
            None => None,
            Some(w) => {
                if w.len() != n || w.iter().any(|r| r.len() != j) {
                    return Err(Error::invalid("template weights must be N × J"));
                }
                let data = w.iter().flatten().map(|&p| p.max(1e-8).ln()).collect();
                Some(Tensor::matrix(n, j, data).unwrap())
            }
        };

        let bones: Vec<f64> = (0..j)
            .filter_map(|k| skeleton.parents[k].map(|p| norm3(sub3(skeleton.pivots[k], skeleton.pivots[p]))))
            .collect();
        let bone = if bones.is_empty() { diag } else { bones.iter().sum::<f64>() / bones.len() as f64 };

        let pe = config.pe_width();
        let w = config.encoder_width;
        let l = config.encoder_layers;
        let geo = Mlp::new("geo", config.hidden(pe, GEO_OUT, w, l));
        let color = Mlp::new("color", config.hidden(pe, 3 * SH_COEFFS, w, l));
        let material = Mlp::new("material", config.hidden(pe, 4, w, l));
        let visibility = Mlp::new("visibility", vec![pe + 3, config.visibility_width, config.visibility_width, SH_COEFFS]);
        let skin = SkinningField::new(j, config.window, config.skin_width, pe);
        let offsets = OffsetField::new(pe, j, config.skin_width, config.offset_cap * bone);

        let mut avatar = Self {
            config,
            skeleton,
            positions: rows_tensor(verts),
            encoding,
            prior_normals: rows_tensor(&prior),
            log_prior,
            scale_limit,
            params: ParamSet::new(),
            geo,
            color,
            material,
            visibility,
            skin,
            offsets,
        };
        avatar.init_params(seed, spacing(verts));
        Ok(avatar)
    }

    fn init_params(&mut self, seed: u64, spacing: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut self.params;
        self.geo.init(p, &mut rng, 0.1);
        let s0 = (0.7 * spacing).min(0.5 * self.scale_limit).max(1e-6 * self.scale_limit);
        let raw_scale = -(1.0 / s0 - 1.0 / self.scale_limit).ln();
        let mut bias = vec![0.0; GEO_OUT];
        bias[0] = (0.9f64 / 0.1).ln();
        bias[5..8].fill(raw_scale);
        self.geo.set_output_bias(p, &bias);

        self.color.init(p, &mut rng, 0.1);
        let mut cb = vec![0.0; 3 * SH_COEFFS];
        cb[..3].fill(0.5 / SH_C0);
        self.color.set_output_bias(p, &cb);

        self.material.init(p, &mut rng, 0.1);
        self.visibility.init(p, &mut rng, 0.1);
        let mut vb = vec![0.0; SH_COEFFS];
        vb[0] = 0.95 / SH_C0;
        self.visibility.set_output_bias(p, &vb);

        self.skin.init(p, &mut rng);
        if self.log_prior.is_some() {
            self.skin.zero_head(p);
        }
        self.offsets.init(p, &mut rng);
        p.insert("probe", Tensor::full(vec![PROBE_TEXELS, 3], softplus_inverse(1.0)));
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn encoding(&self) -> &Tensor {
        &self.encoding
    }

    pub fn scale_limit(&self) -> f64 {
        self.scale_limit
    }

    pub fn offset_cap(&self) -> f64 {
        self.offsets.cap
    }

    pub fn skinning_field(&self) -> &SkinningField {
        &self.skin
    }

    pub fn offset_field(&self) -> &OffsetField {
        &self.offsets
    }

    pub fn geometry_mlp(&self) -> &Mlp {
        &self.geo
    }

    pub fn material_mlp(&self) -> &Mlp {
        &self.material
    }

    pub fn color_mlp(&self) -> &Mlp {
        &self.color
    }

    pub fn has_color(&self) -> bool {
        self.params.contains(&self.color.weight_name(0))
    }

    /// Drops the view-dependent color encoder.
    pub fn remove_color(&mut self) {
        self.params.remove_prefix("color");
    }

    /// Learned probe, `softplus(raw)`.
    pub fn probe(&self) -> Result<EnvLightProbe> {
        let raw = self.params.require("probe")?;
        EnvLightProbe::new(raw.data().chunks_exact(3).map(|c| [0, 1, 2].map(|k| avatar_tensor::softplus(c[k]))).collect())
    }

    pub fn set_probe(&mut self, probe: &EnvLightProbe) {
        let data = probe.radiance().iter().flatten().map(|&v| softplus_inverse(v.max(1e-12))).collect();
        self.params.insert("probe", Tensor::matrix(PROBE_TEXELS, 3, data).unwrap());
    }

    /// `(o, r, s, n)` from the geometry encoder.
    pub fn encode_geometry(&self, tape: &mut Tape, bound: &Bound, pe: Var) -> Result<GeometryVars> {
        let raw = self.geo.forward(tape, bound, pe)?;
        let logit = tape.slice_cols(raw, 0..1)?;
        let opacity = tape.sigmoid(logit)?;
        let q = tape.slice_cols(raw, 1..5)?;
        let unit = tape.constant(Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let rotation = tape.add_row(q, unit)?;
        let s = tape.slice_cols(raw, 5..8)?;
        let s = tape.neg(s)?;
        let s = tape.exp(s)?;
        let s = tape.add_scalar(s, 1.0 / self.scale_limit)?;
        let scale = tape.unary(s, Unary::Recip)?;
        let nr = tape.slice_cols(raw, 8..11)?;
        let prior = tape.constant(self.prior_normals.clone());
        let nr = tape.add(nr, prior)?;
        let normal = tape.normalize_rows(nr)?;
        Ok(GeometryVars { opacity, rotation, scale, normal })
    }

    /// `(c_s, c_a, γ)`; the visibility encoder needs the posed normal and
    /// runs inside [`Self::pose`].
    pub fn encode_appearance(&self, tape: &mut Tape, bound: &Bound, pe: Var) -> Result<AppearanceVars> {
        let color = if self.has_color() { Some(self.color.forward(tape, bound, pe)?) } else { None };
        let raw = self.material.forward(tape, bound, pe)?;
        let m = tape.sigmoid(raw)?;
        let albedo = tape.slice_cols(m, 0..3)?;
        let roughness = tape.slice_cols(m, 3..4)?;
        Ok(AppearanceVars { color, albedo, roughness })
    }

    /// Visibility SH coefficients from canonical encoding and posed normals.
    pub fn encode_visibility(&self, tape: &mut Tape, bound: &Bound, pe: Var, normals: Var) -> Result<Var> {
        let input = tape.concat_cols(&[pe, normals])?;
        self.visibility.forward(tape, bound, input)
    }

    /// Pose window actually fed to the skinning field.
    pub fn skinning_window(&self, window: &PoseSequence) -> PoseSequence {
        if self.config.dynamic_weights {
            window.clone()
        } else {
            PoseSequence::zeros(window.len(), window.joints())
        }
    }

    pub fn skinning_weights(&self, tape: &mut Tape, bound: &Bound, pe: Var, window: &PoseSequence) -> Result<Var> {
        let prior = self.log_prior.clone().map(|p| tape.constant(p));
        let seq = self.skinning_window(window);
        self.skin.weights(tape, bound, pe, &seq, prior)
    }

    /// Decodes, skins and deforms every Gaussian for the newest pose of `window`.
    pub fn pose(&self, tape: &mut Tape, bound: &Bound, window: &PoseSequence) -> Result<PosedVars> {
        if window.joints() != self.skeleton.joints() {
            return Err(Error::invalid(format!(
                "pose has {} joints, avatar {}",
                window.joints(),
                self.skeleton.joints()
            )));
        }
        let joints = self.skeleton.forward_kinematics(window.current())?;
        self.pose_with(tape, bound, window, &joints)
    }

    pub fn pose_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        window: &PoseSequence,
        joints: &JointTransformSet,
    ) -> Result<PosedVars> {
        let pe = tape.constant(self.encoding.clone());
        let geo = self.encode_geometry(tape, bound, pe)?;
        let app = self.encode_appearance(tape, bound, pe)?;
        let weights = self.skinning_weights(tape, bound, pe, window)?;
        let offset_in = tape.constant(OffsetField::input(&self.encoding, window.current()));
        let (dx, dr) = self.offsets.forward(tape, bound, offset_in)?;
        let jt = tape.constant(joints.to_tensor());
        let x = tape.constant(self.positions.clone());
        let posed = deform(tape, weights, jt, x, Some(dx), geo.rotation, Some(dr), geo.scale, geo.normal)?;
        let visibility = self.encode_visibility(tape, bound, pe, posed.normals)?;
        Ok(PosedVars {
            blend: posed.blend,
            weights,
            means: posed.means,
            covariances: posed.covariances,
            normals: posed.normals,
            opacity: geo.opacity,
            color: app.color,
            albedo: app.albedo,
            roughness: app.roughness,
            visibility,
        })
    }

    /// Plain attribute values at the current parameters.
    pub fn decode(&self) -> Result<DecodedAttributes> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let pe = tape.constant(self.encoding.clone());
        let g = self.encode_geometry(&mut tape, &bound, pe)?;
        let a = self.encode_appearance(&mut tape, &bound, pe)?;
        let rows3 = |t: &Tensor| t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let rotation = tape
            .value(g.rotation)
            .data()
            .chunks_exact(4)
            .map(|c| {
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                [c[0] / n, c[1] / n, c[2] / n, c[3] / n]
            })
            .collect();
        Ok(DecodedAttributes {
            opacity: tape.value(g.opacity).data().to_vec(),
            rotation,
            scale: rows3(tape.value(g.scale)),
            normal: rows3(tape.value(g.normal)),
            color: a.color.map(|c| tape.value(c).clone()),
            albedo: rows3(tape.value(a.albedo)),
            roughness: tape.value(a.roughness).data().to_vec(),
        })
    }

    /// Renders `(H·W) × 7`: RGB, encoded normal, coverage.
    pub fn render(
        &self,
        tape: &mut Tape,
        posed: &PosedVars,
        camera: &Arc<Camera>,
        mode: RenderMode,
        radiance: Option<Var>,
    ) -> Result<Var> {
        let rgb = match mode {
            RenderMode::ShColor => {
                let color = posed.color.ok_or_else(|| Error::invalid("view-dependent color was removed"))?;
                let to_cam = view_vectors(tape, camera, posed.means)?;
                let local = tape.lbs_rotate(posed.blend, to_cam, true)?;
                let dirs = tape.normalize_rows(local)?;
                tape.sh_eval(dirs, color, 3)?
            }
            RenderMode::Pbr => {
                let radiance = radiance.ok_or_else(|| Error::invalid("PBR rendering needs probe radiance"))?;
                shade_posed(tape, camera, self.config.f0, posed, radiance)?
            }
            RenderMode::Albedo => posed.albedo,
        };
        splat_rgb_normal(tape, camera, posed.means, posed.covariances, posed.opacity, rgb, posed.normals)
    }
}

/// Mean distance to the nearest other vertex.
fn spacing(verts: &[Vec3]) -> f64 {
    if verts.len() < 2 {
        return 1.0;
    }
    let total: f64 = verts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            verts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| norm3(sub3(*a, *b)))
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| d.is_finite())
        .sum();
    (total / verts.len() as f64).max(1e-6)
}

/// `c − x′` per row.
pub fn view_vectors(tape: &mut Tape, camera: &Camera, means: Var) -> Result<Var> {
    let n = tape.shape(means)[0];
    let c = camera.center();
    let centers = tape.constant(Tensor::matrix(n, 3, (0..n).flat_map(|_| c).collect()).unwrap());
    Ok(tape.sub(centers, means)?)
}

/// PBR color per Gaussian, viewed from `camera`.
pub fn shade_posed(tape: &mut Tape, camera: &Camera, f0: f64, posed: &PosedVars, radiance: Var) -> Result<Var> {
    let v = view_vectors(tape, camera, posed.means)?;
    let wo = tape.normalize_rows(v)?;
    tape.shade(f0, posed.normals, wo, posed.albedo, posed.roughness, posed.visibility, radiance)
}

/// Splats `[rgb, (n + 1) / 2]` and returns `(H·W) × 7`.
pub fn splat_rgb_normal(
    tape: &mut Tape,
    camera: &Arc<Camera>,
    means: Var,
    covs: Var,
    opacity: Var,
    rgb: Var,
    normals: Var,
) -> Result<Var> {
    let enc = tape.scale(normals, 0.5)?;
    let enc = tape.add_scalar(enc, 0.5)?;
    let payload = tape.concat_cols(&[rgb, enc])?;
    tape.rasterize(camera, means, covs, opacity, payload)
}

/// Probe radiance on the tape from the raw parameter.
pub fn probe_radiance(tape: &mut Tape, bound: &Bound) -> Result<Var> {
    Ok(tape.softplus(bound.var("probe")?)?)
}

/// Random unit-ish quaternion helper used by tests and examples.
pub fn random_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if n > 0.1 {
            return q.map(|v| v / n);
        }
    }
}
